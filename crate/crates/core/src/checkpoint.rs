//! Checkpoint directories: `manifest.json` plus one SGT file per parameter.
//!
//! The manifest embeds the run configuration as TOML so a checkpoint is
//! self-describing. Nothing time-dependent is written, so equal parameters
//! give byte-identical checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sgt;

pub const FORMAT: &str = "sagvit-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: String,
    pub epoch: usize,
    pub step: u64,
    pub macro_f1: Option<f64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub step: u64,
    pub macro_f1: Option<f64>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, config: &RunConfig, store: &ParamStore, info: CheckpointInfo) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        if p.name.contains(['/', '\\']) || p.name.starts_with('.') {
            return Err(Error::contract(format!("parameter name `{}` is not a safe file name", p.name)));
        }
        let file = format!("{}.sgt", p.name);
        sgt::write_sgt(dir.join(&file), &p.value)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: config.to_toml(),
        epoch: info.epoch,
        step: info.step,
        macro_f1: info.macro_f1,
        params,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(RunConfig, ParamStore, Manifest)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::format(&mpath, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(&mpath, format!("unknown checkpoint format `{}`", manifest.format)));
    }
    let config = RunConfig::from_toml(&manifest.config)?;
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        if entry.file.contains(['/', '\\']) {
            return Err(Error::format(&mpath, format!("parameter file `{}` escapes the checkpoint", entry.file)));
        }
        let path = dir.join(&entry.file);
        let t = sgt::read_sgt(&path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                &path,
                format!("shape {:?} differs from manifest {:?}", t.shape(), entry.shape),
            ));
        }
        store.insert(entry.name.clone(), t)?;
    }
    Ok((config, store, manifest))
}
