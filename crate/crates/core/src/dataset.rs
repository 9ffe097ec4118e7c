//! Feature datasets: ingestion, class-disjoint splits and synthetic data.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "DCE1"
//! 4       4   u32     version (= 1)
//! 8       8   u64     n, number of samples
//! 16      4   u32     m, feature dimension
//! 20      8*n*m f64   features, row-major
//! ..      4*n   u32   labels (original class ids)
//! ```
//!
//! CSV rows hold `m` feature columns followed by one integer label column.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

pub const MAGIC: &[u8; 4] = b"DCE1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// `n` feature vectors in `R^m` with class labels.
///
/// Labels are dense (`0..num_classes`), assigned in ascending order of the
/// original class ids, which are kept in `class_ids`. `sample_ids` holds
/// the row index each sample had in the file it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_ids: Vec<u32>,
    sample_ids: Vec<u64>,
}

impl FeatureDataset {
    /// Builds a dataset from raw (original) class ids.
    pub fn new(features: Matrix, raw_labels: &[u32]) -> Result<Self> {
        let ids = (0..features.rows() as u64).collect();
        Self::with_sample_ids(features, raw_labels, ids)
    }

    pub fn with_sample_ids(
        features: Matrix,
        raw_labels: &[u32],
        sample_ids: Vec<u64>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 || features.cols() == 0 {
            return Err(Error::data(format!(
                "dataset must have n >= 1 and m >= 1, got n={n}, m={}",
                features.cols()
            )));
        }
        if raw_labels.len() != n {
            return Err(Error::data(format!(
                "label count {} does not match sample count {n}",
                raw_labels.len()
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::data(format!(
                "sample id count {} does not match sample count {n}",
                sample_ids.len()
            )));
        }
        if let Some(row) = (0..n).find(|&i| features.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::data(format!("row {row}: non-finite feature value")));
        }
        let class_ids: Vec<u32> = raw_labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let dense: BTreeMap<u32, usize> =
            class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let labels = raw_labels.iter().map(|c| dense[c]).collect();
        Ok(FeatureDataset {
            features,
            labels,
            class_ids,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Dense labels in `0..num_classes()`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Original class id of each dense label.
    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    /// Original class id of every sample.
    pub fn raw_labels(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| self.class_ids[l]).collect()
    }

    /// Sample indices grouped by dense label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// New dataset holding the listed samples, labels re-densified.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(idx);
        let raw: Vec<u32> = idx.iter().map(|&i| self.class_ids[self.labels[i]]).collect();
        let ids = idx.iter().map(|&i| self.sample_ids[i]).collect();
        Self::with_sample_ids(features, &raw, ids)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let m = self.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + n * m * 8 + n * 4);
        out.extend_from_slice(MAGIC);
        // Writes into a Vec cannot fail.
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(n as u64).unwrap();
        out.write_u32::<LittleEndian>(m as u32).unwrap();
        for &v in self.features.as_slice() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        for l in self.raw_labels() {
            out.write_u32::<LittleEndian>(l).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::data(format!(
                "malformed header: file has {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::data("malformed header: bad magic bytes"));
        }
        let mut cur = Cursor::new(&bytes[4..]);
        let version = cur.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "malformed header: unsupported version {version}"
            )));
        }
        let n = cur.read_u64::<LittleEndian>()? as usize;
        let m = cur.read_u32::<LittleEndian>()? as usize;
        if n == 0 || m == 0 {
            return Err(Error::data(format!(
                "malformed header: n={n}, m={m} (both must be >= 1)"
            )));
        }
        let row_bytes = m * 8 + 4;
        let body = bytes.len() - HEADER_LEN;
        if body != n * row_bytes {
            let actual = body / row_bytes;
            return Err(Error::data(format!(
                "header declares n={n} rows but the file holds {actual} rows \
                 ({body} payload bytes, {row_bytes} per row)"
            )));
        }
        let mut values = vec![0.0; n * m];
        cur.read_f64_into::<LittleEndian>(&mut values)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "row {}: non-finite feature value in column {}",
                pos / m,
                pos % m
            )));
        }
        let mut labels = vec![0u32; n];
        cur.read_u32_into::<LittleEndian>(&mut labels)?;
        Self::new(Matrix::from_vec(n, m, values)?, &labels)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_csv(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            let cols: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
            out.push_str(&cols.join(","));
            out.push_str(",label\n");
        }
        for (row, label) in self.features.iter_rows().zip(self.raw_labels()) {
            for v in row {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{label}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, header: bool) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        let lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .skip(usize::from(header));
        for (row, (line_no, line)) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() < 2 {
                return Err(Error::data(format!(
                    "row {row} (line {}): need at least one feature and a label",
                    line_no + 1
                )));
            }
            let m = cells.len() - 1;
            match width {
                None => width = Some(m),
                Some(w) if w != m => {
                    return Err(Error::data(format!(
                        "row {row} (line {}): {m} feature columns, expected {w}",
                        line_no + 1
                    )))
                }
                _ => {}
            }
            let mut feats = Vec::with_capacity(m);
            for (col, cell) in cells[..m].iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::data(format!("row {row}: column {col} is not a number: {cell:?}"))
                })?;
                if !v.is_finite() {
                    return Err(Error::data(format!(
                        "row {row}: non-finite feature value in column {col}"
                    )));
                }
                feats.push(v);
            }
            let label: u32 = cells[m].parse().map_err(|_| {
                Error::data(format!(
                    "row {row}: label {:?} is not a non-negative integer",
                    cells[m]
                ))
            })?;
            rows.push(feats);
            labels.push(label);
        }
        if rows.is_empty() {
            return Err(Error::data("csv file contains no data rows"));
        }
        Self::new(Matrix::from_rows(&rows)?, &labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Binary,
    Csv,
}

pub fn load_dataset(path: &Path, format: FileFormat, csv_header: bool) -> Result<FeatureDataset> {
    if !path.exists() {
        return Err(Error::data(format!("{} does not exist", path.display())));
    }
    match format {
        FileFormat::Binary => {
            let mut bytes = Vec::new();
            fs::File::open(path)?.read_to_end(&mut bytes)?;
            FeatureDataset::from_bytes(&bytes)
        }
        FileFormat::Csv => FeatureDataset::from_csv(&fs::read_to_string(path)?, csv_header),
    }
}

/// Original class ids on each side of a zero-shot split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// First `ceil(fraction * classes)` classes in ascending id order train.
    Fraction(f64),
    /// Explicit list of original class ids used for training.
    TrainClasses(Vec<u32>),
}

pub fn split_by_class(
    ds: &FeatureDataset,
    rule: &SplitRule,
) -> Result<(FeatureDataset, FeatureDataset, ClassSplit)> {
    let classes = ds.class_ids();
    if classes.len() < 2 {
        return Err(Error::data(format!(
            "class split needs at least 2 classes, dataset has {}",
            classes.len()
        )));
    }
    let train_classes: BTreeSet<u32> = match rule {
        SplitRule::Fraction(f) => {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::config(format!(
                    "split fraction must lie in (0, 1), got {f}"
                )));
            }
            let count = (f * classes.len() as f64).ceil() as usize;
            if count >= classes.len() {
                return Err(Error::config(format!(
                    "split fraction {f} puts all {} classes on the train side",
                    classes.len()
                )));
            }
            classes[..count].iter().copied().collect()
        }
        SplitRule::TrainClasses(list) => {
            let known: BTreeSet<u32> = classes.iter().copied().collect();
            if let Some(bad) = list.iter().find(|c| !known.contains(c)) {
                return Err(Error::config(format!("unknown class id {bad} in train list")));
            }
            let set: BTreeSet<u32> = list.iter().copied().collect();
            if set.is_empty() || set.len() == classes.len() {
                return Err(Error::config(
                    "explicit train list must leave both sides non-empty",
                ));
            }
            set
        }
    };
    let test_classes: BTreeSet<u32> = classes
        .iter()
        .copied()
        .filter(|c| !train_classes.contains(c))
        .collect();
    let raw = ds.raw_labels();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| train_classes.contains(&raw[i]));
    Ok((
        ds.subset(&train_idx)?,
        ds.subset(&test_idx)?,
        ClassSplit {
            train_classes,
            test_classes,
        },
    ))
}

/// Parameters of the synthetic multi-modal generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_modes: usize,
    pub classes_per_mode: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub mode_separation: f64,
    pub class_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_modes: 8,
            classes_per_mode: 8,
            samples_per_class: 20,
            feature_dim: 32,
            mode_separation: 8.0,
            class_spread: 1.0,
            noise_sigma: 0.9,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_modes", self.num_modes),
            ("classes_per_mode", self.classes_per_mode),
            ("samples_per_class", self.samples_per_class),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if (self.num_modes * self.classes_per_mode) as u64 > u64::from(u32::MAX) {
            return Err(Error::config("too many classes for u32 labels"));
        }
        if !(self.mode_separation > self.class_spread) {
            return Err(Error::config(format!(
                "mode_separation ({}) must exceed class_spread ({})",
                self.mode_separation, self.class_spread
            )));
        }
        if !(self.class_spread >= self.noise_sigma) {
            return Err(Error::config(format!(
                "class_spread ({}) must be >= noise_sigma ({})",
                self.class_spread, self.noise_sigma
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.mode_separation.is_finite() {
            return Err(Error::config("noise_sigma must be >= 0 and all scales finite"));
        }
        Ok(())
    }

    /// Class id of class `c` inside mode `mode`.
    pub fn class_id(&self, mode: usize, c: usize) -> u32 {
        (mode * self.classes_per_mode + c) as u32
    }

    pub fn mode_of_class(&self, class_id: u32) -> usize {
        class_id as usize / self.classes_per_mode
    }
}

/// Draws `count` centers pairwise at least `min_dist` apart.
fn draw_separated_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize, min_dist: f64) -> Vec<Vec<f64>> {
    // Coordinates are scaled so two random centers are ~1.5 * min_dist apart.
    let mut scale = 1.5 * min_dist / (2.0 * dim as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    let min_sq = min_dist * min_dist;
    while centers.len() < count {
        let mut placed = false;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if centers.iter().all(|o| squared_distance(o, &c) >= min_sq) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            scale *= 1.5;
        }
    }
    centers
}

/// Deterministic multi-modal Gaussian data: modes, classes around modes,
/// samples around classes. Class ids enumerate `(mode, class)` pairs.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.feature_dim;
    let modes = draw_separated_centers(&mut rng, spec.num_modes, m, spec.mode_separation);
    let n = spec.num_modes * spec.classes_per_mode * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for (mode, center) in modes.iter().enumerate() {
        for c in 0..spec.classes_per_mode {
            let class_center: Vec<f64> = center
                .iter()
                .map(|&x| x + spec.class_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for _ in 0..spec.samples_per_class {
                data.extend(
                    class_center
                        .iter()
                        .map(|&x| x + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)),
                );
                labels.push(spec.class_id(mode, c));
            }
        }
    }
    FeatureDataset::new(Matrix::from_vec(n, m, data)?, &labels)
}
