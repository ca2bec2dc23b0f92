//! Checkpoint directory: `model.json` (the [`ModelConfig`]), `manifest.txt`
//! with one `name<TAB>relative path<TAB>shape` line per tensor, and one
//! `SSPTENS1` file per tensor under `tensors/`.

use std::fs;
use std::path::Path;

use super::{ModelConfig, VideoModel};
use crate::error::{Result, SspError};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "model.json";

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(model: &VideoModel, dir: &Path) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| SspError::io(&tensors, e))?;
    let config = serde_json::to_string_pretty(&model.config).expect("config serializes");
    fs::write(dir.join(CONFIG), config).map_err(|e| SspError::io(dir.join(CONFIG), e))?;
    let mut manifest = String::new();
    for e in model.store.entries() {
        let rel = format!("tensors/{}.sspt", e.name);
        write_tensor(&dir.join(&rel), &e.tensor)?;
        manifest.push_str(&format!("{}\t{rel}\t{}\n", e.name, shape_string(e.tensor.shape())));
    }
    fs::write(dir.join(MANIFEST), manifest).map_err(|e| SspError::io(dir.join(MANIFEST), e))
}

/// Rebuild a model from a checkpoint directory. Every tensor of the
/// configured architecture must be listed with a matching shape.
pub fn load_checkpoint(dir: &Path) -> Result<VideoModel> {
    let read = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(SspError::Missing(p));
        }
        fs::read_to_string(&p).map_err(|e| SspError::io(&p, e))
    };
    let config_path = dir.join(CONFIG);
    let config: ModelConfig =
        serde_json::from_str(&read(CONFIG)?).map_err(|e| SspError::format(&config_path, e.to_string()))?;
    let mut model = VideoModel::new(config, 0, 0)?;
    let manifest_path = dir.join(MANIFEST);
    let mut seen = vec![false; model.store.len()];
    for (n, line) in read(MANIFEST)?.lines().enumerate() {
        let bad = |msg: String| SspError::format(&manifest_path, format!("line {}: {msg}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, rel, shape] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let id = model
            .store
            .id(name)
            .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        let t = read_tensor(&dir.join(rel))?;
        if shape_string(t.shape()) != shape {
            return Err(bad(format!("{name} has shape {:?}, manifest says {shape}", t.shape())));
        }
        model.store.set(id, t).map_err(|e| bad(e.to_string()))?;
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(SspError::format(
            &manifest_path,
            format!("tensor {} missing", model.store.entries()[i].name),
        ));
    }
    Ok(model)
}
