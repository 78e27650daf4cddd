//! Checkpoint directory: `config.txt`, `vocab.txt`, `manifest.txt` and
//! `params.fiat`.
//!
//! `params.fiat` holds every parameter flattened into one rank-1 tensor.
//! Each manifest line reads `name offset dims`, with the offset counted in
//! values and dims joined by `x`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fian_numerics::{ParamStore, Scalar, Tensor};

use crate::config::ModelConfig;
use crate::encoders::Vocabulary;
use crate::error::{FianError, Result};
use crate::harness::featfile::{read_feature_file, write_feature_file};
use crate::model::Fian;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FianError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| FianError::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, cfg: &ModelConfig, vocab: &Vocabulary, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FianError::io(dir, e))?;
    let mut manifest = String::new();
    let mut flat: Vec<T> = Vec::with_capacity(store.numel());
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", p.name, flat.len(), dims.join("x")));
        flat.extend_from_slice(p.value.data());
    }
    write(&dir.join("config.txt"), &cfg.to_text())?;
    write(&dir.join("vocab.txt"), &vocab.to_text())?;
    write(&dir.join("manifest.txt"), &manifest)?;
    let n = flat.len();
    write_feature_file(&dir.join("params.fiat"), &Tensor::new(vec![n], flat)?)
}

struct Entry {
    offset: usize,
    shape: Vec<usize>,
}

fn parse_manifest(text: &str) -> Result<HashMap<String, Entry>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || FianError::Checkpoint(format!("manifest line {}: {line:?}", i + 1));
        let mut parts = line.split_whitespace();
        let (name, offset, dims) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
        let offset = offset.parse().map_err(|_| bad())?;
        let shape = dims.split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
        out.insert(name.to_string(), Entry { offset, shape });
    }
    Ok(out)
}

/// Overwrites every parameter of `store` with the checkpoint's values.
/// Errors name the first parameter that is missing or differs in shape.
pub fn load_params<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let manifest = parse_manifest(&read(&dir.join("manifest.txt"))?)?;
    let flat = read_feature_file(&dir.join("params.fiat"))?;
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in &names {
        let id = store.id(name).expect("listed from the store");
        let entry = manifest
            .get(name)
            .ok_or_else(|| FianError::Checkpoint(format!("parameter {name} is missing from the checkpoint")))?;
        let want = store.value(id).shape().to_vec();
        if entry.shape != want {
            return Err(FianError::Checkpoint(format!(
                "parameter {name} has shape {:?} in the checkpoint but {want:?} in the model",
                entry.shape
            )));
        }
        let n: usize = want.iter().product();
        let values = flat
            .data()
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| FianError::Checkpoint(format!("parameter {name} lies outside params.fiat")))?;
        *store.value_mut(id) = Tensor::new(want, values.iter().map(|&v| T::from_f64(v as f64)).collect())?;
    }
    if let Some(extra) = manifest.keys().find(|k| !names.contains(k)) {
        return Err(FianError::Checkpoint(format!("checkpoint parameter {extra} is not part of the model")));
    }
    Ok(())
}

pub struct Loaded<T> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub model: Fian,
    pub store: ParamStore<T>,
}

/// Rebuilds the model described by the checkpoint and loads its values.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Loaded<T>> {
    let cfg = ModelConfig::from_text(&read(&dir.join("config.txt"))?)?;
    let vocab = Vocabulary::from_text(&read(&dir.join("vocab.txt"))?)?;
    let (model, init) = Fian::new(&cfg, vocab.len())?;
    let mut store = init.cast::<T>();
    load_params(dir, &mut store)?;
    Ok(Loaded { cfg, vocab, model, store })
}
