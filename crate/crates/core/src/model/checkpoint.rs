//! Checkpoint directory: `manifest.txt` (one `name AxBxC` line per
//! parameter, in registration order), `params.cplt` (the tensors as
//! consecutive CPLT records) and `config.txt` (the experiment config).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{Model, ParamStore};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT_PARAMS: &str = "params.cplt";
pub const CHECKPOINT_CONFIG: &str = "config.txt";

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(dir: &Path, model: &Model, experiment: &ExperimentConfig) -> Result<()> {
    if experiment.model != *model.config() {
        return Err(Error::Invalid("experiment config does not describe this model".into()));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in model.params().iter() {
        manifest.push_str(&format!("{name} {}\n", shape_text(t.shape())));
    }
    fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
    let mut out = BufWriter::new(File::create(dir.join(CHECKPOINT_PARAMS))?);
    for t in model.params().tensors() {
        write_tensor(&mut out, t)?;
    }
    out.flush()?;
    fs::write(dir.join(CHECKPOINT_CONFIG), experiment.to_text())?;
    Ok(())
}

/// Reads the tensors named by the manifest, checking each recorded shape.
pub fn read_params(dir: &Path) -> Result<ParamStore> {
    let manifest = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let mut input = BufReader::new(File::open(dir.join(CHECKPOINT_PARAMS))?);
    let mut store = ParamStore::default();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (name, shape) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
        let t = read_tensor(&mut input)?;
        if shape_text(t.shape()) != shape {
            return Err(Error::Format(format!(
                "{name}: manifest says {shape}, file holds {}",
                shape_text(t.shape())
            )));
        }
        store.push(name, t);
    }
    Ok(store)
}

/// Rebuilds the model a checkpoint was saved from.
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, Model)> {
    let cfg = ExperimentConfig::load(&dir.join(CHECKPOINT_CONFIG))?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    model.load_params(read_params(dir)?)?;
    Ok((cfg, model))
}
