use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::dgde::Selection;
use crate::error::{Error, Result};
use crate::fusion::{UncertaintyConfig, UncertaintyHead};
use crate::gmw::{GmwConfig, GmwModel};
use crate::nn::{AdamW, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "edgedepth-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Gmw,
    Uncertainty,
}

/// Model tensors plus enough configuration to rebuild and validate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: Option<GmwConfig>,
    pub uncertainty: Option<UncertaintyConfig>,
    pub selection: Selection,
    /// 0-based epoch the tensors come from.
    pub epoch: usize,
    pub val_mae: f64,
    pub tensors: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn gmw(model: &GmwModel, selection: Selection, epoch: usize, val_mae: f64, optimizer: Option<&AdamW>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Gmw,
            model: Some(model.config),
            uncertainty: None,
            selection,
            epoch,
            val_mae,
            tensors: model.store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn uncertainty(head: &UncertaintyHead, selection: Selection, epoch: usize, val_mae: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Uncertainty,
            model: None,
            uncertainty: Some(head.config),
            selection,
            epoch,
            val_mae,
            tensors: head.store.clone(),
            optimizer: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "unsupported format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Rebuilds the weighting network, checking it matches `cfg.model`.
    pub fn gmw_model(&self, cfg: &RunConfig) -> Result<GmwModel> {
        self.expect_kind(CheckpointKind::Gmw)?;
        if self.model != Some(cfg.model) {
            return Err(Error::IncompatibleCheckpoint(
                "model settings differ from the run configuration".into(),
            ));
        }
        let mut model = GmwModel::new(cfg.model, 0)?;
        model.store.load_from(&self.tensors)?;
        Ok(model)
    }

    pub fn uncertainty_head(&self, cfg: &RunConfig) -> Result<UncertaintyHead> {
        self.expect_kind(CheckpointKind::Uncertainty)?;
        if self.uncertainty != Some(cfg.uncertainty) {
            return Err(Error::IncompatibleCheckpoint(
                "uncertainty head settings differ from the run configuration".into(),
            ));
        }
        UncertaintyHead::from_store(cfg.uncertainty, &self.tensors)
    }
}
