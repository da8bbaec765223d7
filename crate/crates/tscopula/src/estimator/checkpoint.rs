//! Self-describing checkpoint archives.
//!
//! A checkpoint carries everything needed to resume or evaluate a run:
//! model config, both parameter groups, the curriculum phase, an optional
//! shared normalization state, and the training RNG position. Floats
//! round-trip exactly through the JSON encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormalizationState;
use crate::error::{Error, Result};
use crate::rng::RngState;

use super::{Model, ModelConfig, ModelState, Phase};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub phase: Phase,
    pub theta_m: crate::nn::ParamStore,
    pub theta_c: crate::nn::ParamStore,
    pub normalization: Option<NormalizationState>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_state(
        config: &ModelConfig,
        state: &ModelState,
        normalization: Option<NormalizationState>,
        rng: RngState,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: config.clone(),
            phase: state.phase,
            theta_m: state.theta_m.clone(),
            theta_c: state.theta_c.clone(),
            normalization,
            rng,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(out, ckpt).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Loads a checkpoint and reconstructs the model around it. The parameter
/// layout derived from the stored config must match the stored groups.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ModelState, Checkpoint)> {
    let file = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint =
        serde_json::from_reader(file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    let (model, fresh) = ckpt.model.build(0)?;
    for (stored, built, name) in [
        (&ckpt.theta_m, &fresh.theta_m, "theta_m"),
        (&ckpt.theta_c, &fresh.theta_c, "theta_c"),
    ] {
        if stored.len() != built.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {} parameters, config implies {}",
                stored.len(),
                built.len()
            )));
        }
        for i in 0..stored.len() {
            let (s, b) = (stored.param(i), built.param(i));
            if s.name != b.name || s.rows != b.rows || s.cols != b.cols {
                return Err(Error::Checkpoint(format!(
                    "{name}[{i}]: stored {} ({}x{}), config implies {} ({}x{})",
                    s.name, s.rows, s.cols, b.name, b.rows, b.cols
                )));
            }
        }
    }
    let state = ModelState { theta_m: ckpt.theta_m.clone(), theta_c: ckpt.theta_c.clone(), phase: ckpt.phase };
    Ok((model, state, ckpt))
}
