//! Training checkpoints. The byte layout is described in
//! `docs/checkpoint.md`; parameters and optimizer moments round-trip
//! bitwise.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{AdamConfig, AdamState, Adapter, EmbeddingModel, ModelOptimizer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{Betas, ProxyBank};
use crate::partition::Partition;
use crate::trainer::{Stage, TrainConfig, TrainLog, TrainState};

pub const MAGIC: &[u8; 4] = b"DCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    /// 32 seed bytes as hex.
    seed: String,
    stream: u64,
    /// Position in 32-bit words, decimal (u128).
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("corrupt checkpoint: bad RNG seed {:?}", self.seed));
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed).map_err(|_| bad())?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("corrupt checkpoint: bad RNG position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    num_learners: usize,
    dim: usize,
    hidden_dim: usize,
    input_dim: usize,
    adapter: bool,
    stage: Stage,
    epoch: usize,
    last_recluster: Option<usize>,
    config: TrainConfig,
    partition: Option<Partition>,
    betas: Vec<Betas>,
    proxy_classes: Vec<Vec<usize>>,
    adam_slices: Vec<AdamMeta>,
    adam_adapter_weight: Option<AdamMeta>,
    adam_adapter_bias: Option<AdamMeta>,
    adam_proxies: Vec<AdamMeta>,
    cluster_rng: RngState,
    batch_rng: RngState,
    log: TrainLog,
    tensors: Vec<TensorMeta>,
}

fn adam_meta(s: &AdamState) -> AdamMeta {
    AdamMeta {
        step: s.step,
        config: s.config,
    }
}

/// Serializes `state` into the checkpoint byte layout.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let model = &state.model;
    let opt = &state.optimizer;
    let mut tensors: Vec<(String, &[f64])> = vec![("weight".into(), model.weight().as_slice())];
    if let Some(a) = model.adapter() {
        tensors.push(("adapter.weight".into(), a.weight.as_slice()));
        tensors.push(("adapter.bias".into(), &a.bias));
    }
    for (k, s) in opt.slices.iter().enumerate() {
        tensors.push((format!("adam.slice{k}.m"), &s.m));
        tensors.push((format!("adam.slice{k}.v"), &s.v));
    }
    for (name, s) in [("adapter_weight", &opt.adapter_weight), ("adapter_bias", &opt.adapter_bias)] {
        if let Some(s) = s {
            tensors.push((format!("adam.{name}.m"), &s.m));
            tensors.push((format!("adam.{name}.v"), &s.v));
        }
    }
    for (j, p) in state.proxies.iter().enumerate() {
        tensors.push((format!("proxies{j}"), p.proxies().as_slice()));
        tensors.push((format!("proxies{j}.adam.m"), &p.state().m));
        tensors.push((format!("proxies{j}.adam.v"), &p.state().v));
    }
    let meta = Meta {
        num_learners: model.num_learners(),
        dim: model.dim(),
        hidden_dim: model.hidden_dim(),
        input_dim: model.input_dim(),
        adapter: model.uses_adapter(),
        stage: state.stage,
        epoch: state.epoch,
        last_recluster: state.last_recluster,
        config: state.config.clone(),
        partition: state.partition.clone(),
        betas: state.betas.clone(),
        proxy_classes: state.proxies.iter().map(|p| p.classes().to_vec()).collect(),
        adam_slices: opt.slices.iter().map(adam_meta).collect(),
        adam_adapter_weight: opt.adapter_weight.as_ref().map(adam_meta),
        adam_adapter_bias: opt.adapter_bias.as_ref().map(adam_meta),
        adam_proxies: state.proxies.iter().map(|p| adam_meta(p.state())).collect(),
        cluster_rng: RngState::of(&state.cluster_rng),
        batch_rng: RngState::of(&state.batch_rng),
        log: state.log.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(json.len() as u64)?;
    out.write_all(&json)?;
    for (_, t) in &tensors {
        for &v in *t {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc)?;
    Ok(out)
}

fn corrupt(what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {what}"))
}

struct Tensors {
    items: std::vec::IntoIter<(String, Vec<f64>)>,
}

impl Tensors {
    fn next(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        match self.items.next() {
            Some((n, v)) if n == name && v.len() == len => Ok(v),
            Some((n, v)) => Err(corrupt(format!(
                "expected tensor {name} of length {len}, found {n} of length {}",
                v.len()
            ))),
            None => Err(corrupt(format!("missing tensor {name}"))),
        }
    }

    fn adam(&mut self, name: &str, len: usize, meta: &AdamMeta) -> Result<AdamState> {
        Ok(AdamState {
            m: self.next(&format!("{name}.m"), len)?,
            v: self.next(&format!("{name}.v"), len)?,
            step: meta.step,
            config: meta.config,
        })
    }
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 20 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (expected {VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = Cursor::new(tail).read_u32::<LittleEndian>()?;
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = Cursor::new(&body[8..]);
    let meta_len = cur.read_u64::<LittleEndian>()? as usize;
    let start = 16;
    if meta_len > body.len() - start {
        return Err(corrupt(format!("metadata length {meta_len} exceeds file size")));
    }
    let meta: Meta = serde_json::from_slice(&body[start..start + meta_len])?;
    let mut payload = Cursor::new(&body[start + meta_len..]);
    let mut items = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let mut v = vec![0.0; t.len];
        payload
            .read_f64_into::<LittleEndian>(&mut v)
            .map_err(|_| corrupt(format!("tensor {} is truncated", t.name)))?;
        items.push((t.name.clone(), v));
    }
    let mut rest = Vec::new();
    payload.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    let mut ts = Tensors {
        items: items.into_iter(),
    };

    let (d, h, m, k) = (meta.dim, meta.hidden_dim, meta.input_dim, meta.num_learners);
    if k == 0 || d % k != 0 {
        return Err(corrupt(format!("d={d} with K={k}")));
    }
    let weight = Matrix::from_vec(d, h, ts.next("weight", d * h)?)?;
    let adapter = if meta.adapter {
        Some(Adapter {
            weight: Matrix::from_vec(h, m, ts.next("adapter.weight", h * m)?)?,
            bias: ts.next("adapter.bias", h)?,
        })
    } else {
        None
    };
    let model = EmbeddingModel::from_parts(weight, adapter, m, k)?;
    if meta.adam_slices.len() != k {
        return Err(corrupt(format!(
            "{} optimizer groups for K={k}",
            meta.adam_slices.len()
        )));
    }
    let per_slice = d / k * h;
    let slices = meta
        .adam_slices
        .iter()
        .enumerate()
        .map(|(i, a)| ts.adam(&format!("adam.slice{i}"), per_slice, a))
        .collect::<Result<_>>()?;
    let adapter_weight = meta
        .adam_adapter_weight
        .as_ref()
        .map(|a| ts.adam("adam.adapter_weight", h * m, a))
        .transpose()?;
    let adapter_bias = meta
        .adam_adapter_bias
        .as_ref()
        .map(|a| ts.adam("adam.adapter_bias", h, a))
        .transpose()?;
    let optimizer = ModelOptimizer {
        slices,
        adapter_weight,
        adapter_bias,
    };
    if meta.proxy_classes.len() != meta.adam_proxies.len() {
        return Err(corrupt("proxy bank count mismatch"));
    }
    let mut proxies = Vec::new();
    for (j, (classes, a)) in meta.proxy_classes.iter().zip(&meta.adam_proxies).enumerate() {
        // Proxy width is the learner width during training, d when fine-tuning.
        let len = meta
            .tensors
            .iter()
            .find(|t| t.name == format!("proxies{j}"))
            .map(|t| t.len)
            .ok_or_else(|| corrupt(format!("missing tensor proxies{j}")))?;
        if classes.is_empty() || len % classes.len() != 0 {
            return Err(corrupt(format!("proxy bank {j} has {len} values for {} classes", classes.len())));
        }
        let width = len / classes.len();
        let p = Matrix::from_vec(classes.len(), width, ts.next(&format!("proxies{j}"), len)?)?;
        let state = ts.adam(&format!("proxies{j}.adam"), len, a)?;
        proxies.push(ProxyBank::from_parts(classes.clone(), p, state)?);
    }
    if let Some(extra) = ts.items.next() {
        return Err(corrupt(format!("unexpected tensor {}", extra.0)));
    }
    Ok(TrainState {
        config: meta.config,
        model,
        optimizer,
        betas: meta.betas,
        proxies,
        partition: meta.partition,
        stage: meta.stage,
        epoch: meta.epoch,
        last_recluster: meta.last_recluster,
        cluster_rng: meta.cluster_rng.restore()?,
        batch_rng: meta.batch_rng.restore()?,
        log: meta.log,
    })
}

/// Writes via a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};
    use crate::losses::LossKind;
    use crate::sampling::{BatchSpec, BatchStrategy};
    use crate::trainer::{init_model, Trainer};

    fn setup(kind: LossKind) -> (crate::dataset::FeatureDataset, TrainConfig) {
        let ds = generate_synthetic(&SynthSpec {
            num_modes: 2,
            classes_per_mode: 3,
            samples_per_class: 6,
            feature_dim: 6,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut cfg = TrainConfig {
            k: 2,
            dim: 6,
            adapter_hidden: Some(5),
            epochs: 3,
            finetune_epochs: 2,
            batch: BatchSpec {
                batch_size: 12,
                per_class: 4,
                strategy: BatchStrategy::Balanced,
            },
            eval_ks: vec![1],
            ..TrainConfig::default()
        };
        cfg.loss.kind = kind;
        (ds, cfg)
    }

    fn assert_same(a: &TrainState, b: &TrainState) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.model.weight().as_slice()), bits(b.model.weight().as_slice()));
        assert_eq!(a.model, b.model);
        assert_eq!(a.optimizer, b.optimizer);
        assert_eq!(a.betas, b.betas);
        assert_eq!(a.proxies, b.proxies);
        assert_eq!(a.partition, b.partition);
        assert_eq!((a.stage, a.epoch, a.last_recluster), (b.stage, b.epoch, b.last_recluster));
        assert_eq!(a.cluster_rng, b.cluster_rng);
        assert_eq!(a.batch_rng, b.batch_rng);
        assert_eq!(a.log, b.log);
        assert_eq!(a.config, b.config);
    }

    #[test]
    fn round_trip_is_exact_in_every_stage() {
        for kind in [LossKind::Margin, LossKind::ProxyNca] {
            let (ds, cfg) = setup(kind);
            let mut t = Trainer::new(&ds, None, init_model(&cfg, ds.dim()).unwrap(), cfg).unwrap();
            loop {
                let s = t.state();
                assert_same(s, &from_bytes(&to_bytes(s).unwrap()).unwrap());
                if !t.run_epoch().unwrap() {
                    break;
                }
            }
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (ds, cfg) = setup(LossKind::Margin);
        let model = init_model(&cfg, ds.dim()).unwrap();
        let mut full = Trainer::new(&ds, Some(&ds), model.clone(), cfg.clone()).unwrap();
        full.run().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut first = Trainer::new(&ds, Some(&ds), model, cfg).unwrap();
        for _ in 0..3 {
            first.run_epoch().unwrap();
        }
        save_checkpoint(first.state(), &path).unwrap();
        drop(first);
        let mut resumed = Trainer::resume(&ds, Some(&ds), load_checkpoint(&path).unwrap()).unwrap();
        resumed.run().unwrap();
        assert_same(full.state(), resumed.state());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (ds, cfg) = setup(LossKind::Triplet);
        let t = Trainer::new(&ds, None, init_model(&cfg, ds.dim()).unwrap(), cfg).unwrap();
        let good = to_bytes(t.state()).unwrap();

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        let e = from_bytes(&flipped).unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");

        let mut v2 = good.clone();
        v2[4] = 2;
        let e = from_bytes(&v2).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");

        assert!(from_bytes(&good[..10]).is_err());
        assert!(from_bytes(b"XXXXXXXXXXXXXXXXXXXXXXXX").is_err());
        assert!(load_checkpoint(Path::new("/nonexistent/ck.bin")).is_err());
    }

    #[test]
    fn mismatched_k_names_both_values() {
        let (ds, cfg) = setup(LossKind::Margin);
        let t = Trainer::new(&ds, None, init_model(&cfg, ds.dim()).unwrap(), cfg.clone()).unwrap();
        let state = from_bytes(&to_bytes(t.state()).unwrap()).unwrap();
        let other = TrainConfig { k: 3, ..cfg };
        let e = state.check_compatible(&other, &ds).unwrap_err().to_string();
        assert!(e.contains("k=2") && e.contains("k=3"), "{e}");
    }
}
