//! Training loops: the two-stage curriculum and the joint ablation.
//!
//! An epoch trains on `batches_per_epoch` batches sampled with replacement
//! from the training windows, then scores the validation set. A stage stops
//! on patience exhaustion (no improvement of the best validation NLL),
//! a wall-clock cap, an epoch cap, or divergence; the parameters that
//! reached the best validation value are restored.
//!
//! Stage 1 trains theta_M against the marginal NLL: the copula path is
//! never evaluated, so no gradient can reach theta_C. Stage 2 freezes
//! theta_M (its bytes are checked, not just assumed) and trains theta_C
//! against the copula NLL through frozen PIT values. The joint ablation
//! trains everything against the full NLL in a single stage.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::rng;

use super::flops::FlopLedger;
use super::history::{EpochRecord, Termination};
use super::{
    canonical_orderings, prepare_window, random_orderings, run_forward, ForwardMode, Model,
    ModelState, Phase, PreparedWindow,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Batches per epoch (the training-loop granularity for validation).
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub max_epochs_per_stage: usize,
    /// Optional tighter epoch cap for stage 1 (marginal epochs are cheap
    /// and plateau early; the default is `max_epochs_per_stage`).
    pub max_epochs_stage1: Option<usize>,
    /// Epochs without improvement of the best validation NLL before a
    /// stage stops.
    pub patience: usize,
    /// Minimum decrease of the best validation NLL that counts as an
    /// improvement for the patience counter (best-checkpoint tracking
    /// always uses strict improvement).
    pub min_delta: f64,
    pub stage1_opt: AdamConfig,
    pub stage2_opt: AdamConfig,
    pub joint_opt: AdamConfig,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Optional wall-clock cap per stage, in seconds.
    pub max_wall_clock_secs: Option<f64>,
    pub seed: u64,
    /// Validation-evaluation parallelism; training is always single-writer.
    pub workers: usize,
    /// Training loss above this value counts as divergence.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batches_per_epoch: 512,
            batch_size: 32,
            max_epochs_per_stage: 200,
            max_epochs_stage1: None,
            patience: 50,
            min_delta: 0.0,
            stage1_opt: AdamConfig::with_lr(1e-3),
            stage2_opt: AdamConfig::with_lr(1e-3),
            joint_opt: AdamConfig::with_lr(1e-3),
            grad_clip: 1e3,
            max_wall_clock_secs: None,
            seed: 0,
            workers: 1,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.batches_per_epoch and batch_size must be positive".into()));
        }
        if self.max_epochs_per_stage == 0 {
            return Err(Error::Config("train.max_epochs_per_stage must be positive".into()));
        }
        for (name, opt) in [("stage1", &self.stage1_opt), ("stage2", &self.stage2_opt), ("joint", &self.joint_opt)] {
            if opt.lr <= 0.0 {
                return Err(Error::Config(format!("train.{name}_opt.lr must be positive")));
            }
            if opt.weight_decay < 0.0 {
                return Err(Error::Config(format!("train.{name}_opt.weight_decay must be >= 0")));
            }
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        if self.min_delta < 0.0 {
            return Err(Error::Config("train.min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training and validation windows (task masks already applied).
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<TimeSeriesWindow>,
    pub val: Vec<TimeSeriesWindow>,
}

impl TrainData {
    pub fn new(train: Vec<TimeSeriesWindow>, val: Vec<TimeSeriesWindow>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        Ok(TrainData { train, val })
    }
}

/// Outcome of a training run. The model state passed in holds the
/// best-validation parameters when this returns.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub ledger: FlopLedger,
    pub termination: Termination,
    /// Best validation NLL (per dimension) of the final stage.
    pub best_val_nll: f64,
    /// Global epoch index where stage 2 began (curriculum runs only).
    pub phase_boundary_epoch: Option<usize>,
    /// Byte images of theta_M at stage-2 start and end (curriculum runs
    /// only): equal iff the freeze held.
    pub theta_m_images: Option<(Vec<u8>, Vec<u8>)>,
}

struct StageOutcome {
    termination: Termination,
    best_val: f64,
}

/// Mean validation NLL per dimension. Stage 1 scores the marginal NLL
/// only; stage 2 and joint score the full joint NLL (canonical ordering).
fn validate(
    model: &Model,
    state: &ModelState,
    val: &[PreparedWindow],
    phase: Phase,
    workers: usize,
    ledger: &mut FlopLedger,
    stage_tag: &str,
) -> Result<f64> {
    // chunk to the encoder token capacity
    let capacity = model
        .config
        .marginal_encoder
        .max_tokens
        .min(model.config.copula_encoder.max_tokens)
        .max(1);
    let mut chunks: Vec<&[PreparedWindow]> = Vec::new();
    let mut start = 0usize;
    let mut tokens = 0usize;
    for (i, p) in val.iter().enumerate() {
        if i > start && (tokens + p.window.len() > capacity || i - start >= 64) {
            chunks.push(&val[start..i]);
            start = i;
            tokens = 0;
        }
        tokens += p.window.len();
    }
    if start < val.len() {
        chunks.push(&val[start..]);
    }
    let eval_chunk = |windows: &[PreparedWindow]| -> Result<(f64, usize, u64)> {
        let refs: Vec<&PreparedWindow> = windows.iter().collect();
        let orderings = canonical_orderings(&refs);
        let mode = match phase {
            Phase::Stage1 => ForwardMode::MarginalOnly,
            _ => ForwardMode::Full,
        };
        let fwd = run_forward(model, state, &refs, mode, &orderings)?;
        let mut total = 0.0;
        for w in &fwd.windows {
            let m = w.marg.map(|n| fwd.tape.scalar(n)).unwrap_or(w.marg_value);
            let c = w.cop.map(|n| fwd.tape.scalar(n)).unwrap_or(0.0);
            total += -(m + c) / w.d as f64;
        }
        Ok((total, windows.len(), fwd.tape.forward_flops() + fwd.side_flops))
    };

    let results: Vec<Result<(f64, usize, u64)>> = if workers > 1 && chunks.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|c| scope.spawn(move || eval_chunk(c)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval thread")).collect()
        })
    } else {
        chunks.iter().map(|c| eval_chunk(c)).collect()
    };

    let mut sum = 0.0;
    let mut count = 0usize;
    for r in results {
        let (s, n, flops) = r?;
        sum += s;
        count += n;
        ledger.record_forward(stage_tag, flops);
    }
    if count == 0 {
        return Err(Error::Data("empty validation set".into()));
    }
    Ok(sum / count as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &Model,
    state: &mut ModelState,
    train: &[PreparedWindow],
    val: &[PreparedWindow],
    config: &TrainConfig,
    phase: Phase,
    epoch_offset: usize,
    ledger: &mut FlopLedger,
    history: &mut Vec<EpochRecord>,
    run_start: Instant,
) -> Result<StageOutcome> {
    let (stage_tag, opt_cfg) = match phase {
        Phase::Stage1 => ("stage1", config.stage1_opt.clone()),
        Phase::Stage2 => ("stage2", config.stage2_opt.clone()),
        Phase::Joint => ("joint", config.joint_opt.clone()),
    };
    state.phase = phase;
    let max_epochs = match phase {
        Phase::Stage1 => config.max_epochs_stage1.unwrap_or(config.max_epochs_per_stage),
        _ => config.max_epochs_per_stage,
    };
    let mut adam_m = Adam::new(&state.theta_m, opt_cfg.clone());
    let mut adam_c = Adam::new(&state.theta_c, opt_cfg);

    let stage_start = Instant::now();
    let mut best_val = f64::INFINITY;
    let mut patience_ref = f64::INFINITY;
    let mut best_params: Option<(crate::nn::ParamStore, crate::nn::ParamStore)> = None;
    let mut bad_epochs = 0usize;
    let mut termination = Termination::MaxEpochs;

    'stage: for epoch in 0..max_epochs {
        let mut epoch_loss = 0.0;
        for b in 0..config.batches_per_epoch {
            let mut r = rng::stream(config.seed, &[phase as u64 + 1, epoch as u64, b as u64]);
            let batch: Vec<&PreparedWindow> = (0..config.batch_size)
                .map(|_| &train[rand::Rng::random_range(&mut r, 0..train.len())])
                .collect();
            let orderings = match phase {
                Phase::Stage1 => canonical_orderings(&batch),
                _ => random_orderings(&batch, &mut r),
            };
            let mode = match phase {
                Phase::Stage1 => ForwardMode::MarginalOnly,
                Phase::Stage2 => ForwardMode::CopulaDetached,
                Phase::Joint => ForwardMode::Full,
            };
            let fwd = run_forward(model, state, &batch, mode, &orderings)?;
            let mut tape = fwd.tape;
            // mean over windows of the negated log-likelihood parts
            let mut per_window = Vec::with_capacity(fwd.windows.len());
            for w in &fwd.windows {
                let node = match (w.marg, w.cop) {
                    (Some(m), Some(c)) => tape.add(m, c),
                    (Some(m), None) => m,
                    (None, Some(c)) => c,
                    (None, None) => tape.scalar_constant(0.0),
                };
                per_window.push(node);
            }
            let stacked = tape.concat_rows(per_window);
            let mean_ll = tape.mean_all(stacked);
            let loss = tape.scale(mean_ll, -1.0);
            let loss_value = tape.scalar(loss);

            if !loss_value.is_finite() || loss_value > config.divergence_threshold {
                eprintln!(
                    "divergence in {stage_tag} epoch {epoch} batch {b}: loss {loss_value} \
                     ({} windows, flags {:?}); returning best checkpoint",
                    batch.len(),
                    fwd.flags
                );
                termination = Termination::Diverged;
                break 'stage;
            }

            ledger.record_train_batch(stage_tag, tape.forward_flops());
            if fwd.side_flops > 0 {
                ledger.record_forward(stage_tag, fwd.side_flops);
            }
            let mut grads = tape.backward(loss);
            if grads.max_abs().is_nan() {
                eprintln!(
                    "NaN gradient in {stage_tag} epoch {epoch} batch {b}; returning best checkpoint"
                );
                termination = Termination::Diverged;
                break 'stage;
            }
            clip_grad_norm(&mut grads, config.grad_clip);
            match phase {
                Phase::Stage1 => adam_m.step(&mut state.theta_m, &grads),
                Phase::Stage2 => adam_c.step(&mut state.theta_c, &grads),
                Phase::Joint => {
                    adam_m.step(&mut state.theta_m, &grads);
                    adam_c.step(&mut state.theta_c, &grads);
                }
            }
            epoch_loss += loss_value;
        }
        epoch_loss /= config.batches_per_epoch as f64;

        let val_nll = validate(model, state, val, phase, config.workers, ledger, stage_tag)?;
        let improved = val_nll < best_val;
        if improved {
            best_val = val_nll;
            best_params = Some((state.theta_m.clone(), state.theta_c.clone()));
        }
        if val_nll < patience_ref - config.min_delta {
            patience_ref = val_nll;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        history.push(EpochRecord {
            epoch: epoch_offset + epoch,
            stage: stage_tag.to_string(),
            train_loss: epoch_loss,
            val_nll,
            improved,
            cum_flops: ledger.total(),
            wall_secs: run_start.elapsed().as_secs_f64(),
        });

        if bad_epochs >= config.patience {
            termination = Termination::EarlyStopped;
            break;
        }
        if let Some(cap) = config.max_wall_clock_secs {
            if stage_start.elapsed().as_secs_f64() > cap {
                termination = Termination::WallClock;
                break;
            }
        }
    }

    // return the version of the parameters that reached the best
    // validation value
    if let Some((tm, tc)) = best_params {
        state.theta_m = tm;
        state.theta_c = tc;
    }
    Ok(StageOutcome { termination, best_val })
}

fn prepare_all(model: &Model, windows: &[TimeSeriesWindow]) -> Result<Vec<PreparedWindow>> {
    windows.iter().map(|w| prepare_window(&model.config, w)).collect()
}

/// Two-stage curriculum: stage 1 fits the marginals under the independence
/// copula (early stop on validation marginal NLL), then theta_M is frozen
/// and stage 2 fits the copula (early stop on validation joint NLL).
pub fn train_curriculum(
    model: &Model,
    state: &mut ModelState,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let train = prepare_all(model, &data.train)?;
    let val = prepare_all(model, &data.val)?;
    let mut ledger = FlopLedger::new();
    let mut history = Vec::new();
    let run_start = Instant::now();

    let s1 = run_stage(model, state, &train, &val, config, Phase::Stage1, 0, &mut ledger, &mut history, run_start)?;
    let boundary = history.len();
    let image_start = state.theta_m.byte_image();
    let s2 = run_stage(
        model,
        state,
        &train,
        &val,
        config,
        Phase::Stage2,
        boundary,
        &mut ledger,
        &mut history,
        run_start,
    )?;
    let image_end = state.theta_m.byte_image();

    let termination = if s1.termination == Termination::Diverged { s1.termination } else { s2.termination };
    Ok(TrainReport {
        history,
        ledger,
        termination,
        best_val_nll: s2.best_val,
        phase_boundary_epoch: Some(boundary),
        theta_m_images: Some((image_start, image_end)),
    })
}

/// Single-stage ablation: all parameters trained jointly against the full
/// NLL. The resulting copula carries no validity guarantee.
pub fn train_joint_ablation(
    model: &Model,
    state: &mut ModelState,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let train = prepare_all(model, &data.train)?;
    let val = prepare_all(model, &data.val)?;
    let mut ledger = FlopLedger::new();
    let mut history = Vec::new();
    let run_start = Instant::now();

    let out = run_stage(model, state, &train, &val, config, Phase::Joint, 0, &mut ledger, &mut history, run_start)?;
    Ok(TrainReport {
        history,
        ledger,
        termination: out.termination,
        best_val_nll: out.best_val,
        phase_boundary_epoch: None,
        theta_m_images: None,
    })
}
