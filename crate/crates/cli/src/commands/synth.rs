use std::fs;
use std::path::{Path, PathBuf};

use dce_core::dataset::{generate_synthetic, FileFormat};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::write_json;

pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub out: PathBuf,
    pub format: FileFormat,
    pub csv_header: bool,
}

/// Path of the JSON description written next to a generated dataset.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".spec.json");
    PathBuf::from(s)
}

pub fn run(args: &SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set, seed)?;
    let ds = generate_synthetic(&cfg.synth)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    match args.format {
        FileFormat::Binary => ds.save_binary(&args.out)?,
        FileFormat::Csv => fs::write(&args.out, ds.to_csv(args.csv_header))?,
    }
    let sidecar = sidecar_path(&args.out);
    write_json(&sidecar, &cfg.synth)?;
    println!(
        "wrote {} samples, {} classes, m={} to {} (spec: {})",
        ds.len(),
        ds.num_classes(),
        ds.dim(),
        args.out.display(),
        sidecar.display()
    );
    Ok(())
}
