use serde::Serialize;
use std::path::{Path, PathBuf};

use super::config::{RunConfig, Stream};
use crate::error::{Error, Result};
use crate::synth::{generate_instances, read_dataset, write_dataset, ObjectInstance};

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub train_count: usize,
    pub val_count: usize,
    pub keypoints: usize,
}

/// Train and val splits drawn from independent seed streams.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Vec<ObjectInstance>, Vec<ObjectInstance>)> {
    cfg.validate()?;
    let s = &cfg.scene;
    let template = s.template(cfg.stream_seed(Stream::Template))?;
    let draw = |count, stream| generate_instances(&template, &s.pose, &s.camera, &s.noise, count, cfg.stream_seed(stream));
    Ok((
        draw(cfg.data.train_count, Stream::TrainSplit)?,
        draw(cfg.data.val_count, Stream::ValSplit)?,
    ))
}

/// Writes both splits into `data.dir`, which must already exist.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let (train, val) = generate_splits(cfg)?;
    let train_path = cfg.data.train_path();
    let val_path = cfg.data.val_path();
    write_dataset(&train_path, &train)?;
    write_dataset(&val_path, &val)?;
    Ok(GenerateSummary {
        train_path,
        val_path,
        train_count: train.len(),
        val_count: val.len(),
        keypoints: train.first().or(val.first()).map_or(0, |i| i.len()),
    })
}

/// Reads a split and refuses an empty one.
pub fn load_split(path: &Path) -> Result<Vec<ObjectInstance>> {
    let data = read_dataset(path)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data)
}
