//! Dataset directory: `spec.json`, `index.csv` (path, label, split, sha256)
//! and one `SSPTENS1` file per clip under `samples/`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{generate_sample, SynthSpec};
use crate::error::{Result, SspError};
use crate::tensor::{decode_tensor, encode_tensor, Tensor};

pub const VAL_FRACTION: f64 = 0.2;
pub const INDEX_FILE: &str = "index.csv";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the dataset root.
    pub path: String,
    pub label: usize,
    pub split: Split,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub video: Tensor,
    pub label: usize,
}

/// Clips of one dataset, split into train and validation sets.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Per class, a seeded shuffle of sample indices decides which
/// `round(0.2·n)` go to validation.
pub fn stratified_split(spec: &SynthSpec) -> Vec<Vec<Split>> {
    let n = spec.samples_per_class;
    let n_val = (n as f64 * VAL_FRACTION).round() as usize;
    (0..spec.n_classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(c as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut split = vec![Split::Train; n];
            for &i in &order[..n_val] {
                split[i] = Split::Val;
            }
            split
        })
        .collect()
}

/// Generate every clip in memory.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut ds = Dataset::default();
    for (class, splits) in stratified_split(spec).into_iter().enumerate() {
        for (index, split) in splits.into_iter().enumerate() {
            let s = Sample {
                video: generate_sample(spec, class, index)?,
                label: class,
            };
            match split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
            }
        }
    }
    Ok(ds)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SspError::io(path, e))
}

/// Write the dataset under `dir`; returns its index.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<Vec<IndexEntry>> {
    spec.validate()?;
    let samples = dir.join("samples");
    fs::create_dir_all(&samples).map_err(|e| SspError::io(&samples, e))?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    write(&dir.join(SPEC_FILE), json.as_bytes())?;
    let mut index = Vec::new();
    for (class, splits) in stratified_split(spec).into_iter().enumerate() {
        for (i, split) in splits.into_iter().enumerate() {
            let bytes = encode_tensor(&generate_sample(spec, class, i)?);
            let path = format!("samples/c{class}_{i:04}.sspt");
            write(&dir.join(&path), &bytes)?;
            index.push(IndexEntry {
                path,
                label: class,
                split,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    let index_path = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index_path).map_err(|e| csv_error(&index_path, e))?;
    for e in &index {
        w.serialize(e).map_err(|e| csv_error(&index_path, e))?;
    }
    w.flush().map_err(|e| SspError::io(&index_path, e))?;
    Ok(index)
}

fn csv_error(path: &Path, e: csv::Error) -> SspError {
    SspError::format(path, e.to_string())
}

pub fn read_spec(dir: &Path) -> Result<SynthSpec> {
    let path = dir.join(SPEC_FILE);
    if !path.exists() {
        return Err(SspError::Missing(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| SspError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| SspError::format(&path, e.to_string()))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(SspError::Missing(path));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<IndexEntry>, _>>()
        .map_err(|e| csv_error(&path, e))
}

/// Load one clip, checking its content hash against the index.
pub fn load_entry(dir: &Path, entry: &IndexEntry) -> Result<Tensor> {
    let path: PathBuf = dir.join(&entry.path);
    if !path.exists() {
        return Err(SspError::Missing(path));
    }
    let bytes = fs::read(&path).map_err(|e| SspError::io(&path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != entry.sha256 {
        return Err(SspError::format(
            &path,
            format!("sha256 {digest} does not match index {}", entry.sha256),
        ));
    }
    decode_tensor(&bytes, &path)
}

/// Read and verify a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for e in read_index(dir)? {
        let s = Sample {
            video: load_entry(dir, &e)?,
            label: e.label,
        };
        match e.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
        }
    }
    Ok(ds)
}

/// SHA-256 of the index file, identifying a dataset's exact contents.
pub fn index_hash(dir: &Path) -> Result<String> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(|e| SspError::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
