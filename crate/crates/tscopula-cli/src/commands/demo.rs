//! `tscopula copula-demo`: the bivariate recovery experiment.
//!
//! Trains on ground-truth samples under both the curriculum and the joint
//! (no-curriculum) mode. Per mode, emits four figures mirroring the panel
//! structure of the reference experiment: reconstructed joint density,
//! copula density, and both marginal densities, each overlaid on the ground
//! truth: plus a KS uniformity report of learned-copula samples.

use std::path::Path;

use anyhow::{anyhow, Result};
use ndarray::Array2;
use serde::Serialize;

use tscopula::copula::CopulaInput;
use tscopula::estimator::{
    train_curriculum, train_joint_ablation, window_view, EvalOptions, Model, ModelState, TrainData,
};
use tscopula::flow::{cdf_forward, DsfParams};
use tscopula::oracle::{samples_to_windows, GroundTruthBivariate};
use tscopula::rng;
use tscopula::stats::ks_uniform;

use crate::config::ExperimentConfig;
use crate::plots;

#[derive(Serialize)]
struct ModeReport {
    mode: String,
    ks_per_dimension: Vec<f64>,
    n_copula_samples: usize,
    heldout_nll_per_dim: f64,
    /// Exact ground-truth NLL per dimension on the same held-out points.
    ground_truth_nll_per_dim: f64,
    best_val_nll: f64,
    epochs: usize,
    total_flops: u64,
    /// Marginal uniformity is asserted only for the curriculum; the joint
    /// mode's statistic is recorded without a validity claim.
    asserted: bool,
}

pub fn run(config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let gt = GroundTruthBivariate::standard();
    let demo = &config.demo;
    let train = samples_to_windows(&gt.sample(demo.n_train, config.seed));
    let val = samples_to_windows(&gt.sample(demo.n_val, config.seed ^ 0x5EED));
    let data = TrainData::new(train, val).map_err(|e| anyhow!(e))?;
    let heldout = gt.sample_with_log_density(demo.n_heldout, config.seed ^ 0x4E1D);

    let mut reports = Vec::new();
    for mode in ["curriculum", "joint"] {
        let mut model_config = config.model.to_model_config(2, 0);
        model_config.standardize = false;
        let (model, mut state) = model_config.build(config.seed).map_err(|e| anyhow!(e))?;
        let mut tc = config.train.clone();
        tc.seed = config.seed;
        let report = if mode == "curriculum" {
            train_curriculum(&model, &mut state, &data, &tc)
        } else {
            train_joint_ablation(&model, &mut state, &data, &tc)
        }
        .map_err(|e| anyhow!(e))?;

        let hw = samples_to_windows(&heldout.iter().map(|(p, _)| *p).collect::<Vec<_>>());
        let nlls = tscopula::estimator::batch_joint_nll(&model, &state, &hw, &EvalOptions::default())
            .map_err(|e| anyhow!(e))?;
        let heldout_nll = nlls.iter().sum::<f64>() / nlls.len() as f64;
        let gt_nll = heldout.iter().map(|(_, ld)| -ld / 2.0).sum::<f64>() / heldout.len() as f64;

        let ks = copula_sample_ks(&model, &state, &data, demo.n_copula_samples, config.seed)?;
        emit_figures(&config.out_dir, mode, &gt, &model, &state, &data, demo.grid)?;
        reports.push(ModeReport {
            mode: mode.to_string(),
            ks_per_dimension: ks,
            n_copula_samples: demo.n_copula_samples,
            heldout_nll_per_dim: heldout_nll,
            ground_truth_nll_per_dim: gt_nll,
            best_val_nll: report.best_val_nll,
            epochs: report.history.len(),
            total_flops: report.ledger.total(),
            asserted: mode == "curriculum",
        });
        println!(
            "{mode}: {} epochs, val NLL {:.4}, held-out NLL {:.4}/dim, copula KS {:?}",
            report.history.len(),
            report.best_val_nll,
            heldout_nll,
            reports.last().unwrap().ks_per_dimension,
        );
    }
    let json = serde_json::to_string_pretty(&reports)?;
    std::fs::write(config.out_dir.join("ks_report.json"), json)?;
    Ok(())
}

/// Per-dimension KS uniformity of samples drawn from the learned copula.
pub fn copula_sample_ks(
    model: &Model,
    state: &ModelState,
    data: &TrainData,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let view = window_view(model, state, &data.val[0]).map_err(|e| anyhow!(e))?;
    let mut r = rng::stream(seed, &[0x5A3]);
    let us = model
        .decoder
        .sample(&state.theta_c, &view.copula_input, n_samples, &mut r)
        .map_err(|e| anyhow!(e))?;
    Ok((0..us.ncols())
        .map(|dim| {
            let col: Vec<f64> = (0..us.nrows()).map(|s| us[[s, dim]]).collect();
            ks_uniform(&col)
        })
        .collect())
}

fn emit_figures(
    out_dir: &Path,
    mode: &str,
    gt: &GroundTruthBivariate,
    model: &Model,
    state: &ModelState,
    data: &TrainData,
    grid: usize,
) -> Result<()> {
    let view = window_view(model, state, &data.val[0]).map_err(|e| anyhow!(e))?;
    let p0 = &view.flow_params[0];
    let p1 = &view.flow_params[1];

    // learned copula density on a grid (the two-variable factorization)
    let learned_copula = |u1: f64, u2: f64| -> f64 {
        let input = CopulaInput { u_miss: vec![u1, u2], ..view.copula_input.clone() };
        model
            .decoder
            .log_density_value(&state.theta_c, &input)
            .map(|(ld, _)| ld.exp())
            .unwrap_or(0.0)
    };

    // --- copula panel: unit square ---
    let n = grid;
    let us: Vec<f64> = (0..=n).map(|i| (i as f64 + 0.5) / (n as f64 + 1.0)).collect();
    let mut gt_c = Array2::zeros((n + 1, n + 1));
    let mut md_c = Array2::zeros((n + 1, n + 1));
    for (i, &u1) in us.iter().enumerate() {
        for (j, &u2) in us.iter().enumerate() {
            gt_c[[i, j]] = gt.copula.density(u1, u2).min(25.0);
            md_c[[i, j]] = learned_copula(u1, u2).min(25.0);
        }
    }
    plots::density_overlay(
        &out_dir.join(format!("{mode}_copula_density.svg")),
        &format!("copula density ({mode}): ground truth heat, learned contours"),
        &us,
        &us,
        &gt_c,
        &md_c,
        7,
    )?;

    // --- joint panel: data space ---
    let xs: Vec<f64> = (0..=n).map(|i| 0.02 + 7.0 * i as f64 / n as f64).collect();
    let ys: Vec<f64> = (0..=n).map(|i| -1.9 + 3.8 * i as f64 / n as f64).collect();
    let mut gt_j = Array2::zeros((n + 1, n + 1));
    let mut md_j = Array2::zeros((n + 1, n + 1));
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            gt_j[[i, j]] = gt.density(x, y).min(2.0);
            let e0 = cdf_forward(p0, x);
            let e1 = cdf_forward(p1, y);
            let c = learned_copula(
                e0.u.clamp(1e-6, 1.0 - 1e-6),
                e1.u.clamp(1e-6, 1.0 - 1e-6),
            );
            md_j[[i, j]] = (c * (e0.log_density + e1.log_density).exp()).min(2.0);
        }
    }
    plots::density_overlay(
        &out_dir.join(format!("{mode}_joint_density.svg")),
        &format!("joint density ({mode}): ground truth heat, learned contours"),
        &xs,
        &ys,
        &gt_j,
        &md_j,
        7,
    )?;

    // --- marginal panels ---
    let marginal_plot = |path: &Path,
                         title: &str,
                         lo: f64,
                         hi: f64,
                         gt_pdf: &dyn Fn(f64) -> f64,
                         params: &DsfParams|
     -> Result<()> {
        let pts = 400;
        let gt_series: Vec<(f64, f64)> = (0..=pts)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / pts as f64;
                (x, gt_pdf(x))
            })
            .collect();
        let learned_series: Vec<(f64, f64)> = (0..=pts)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / pts as f64;
                (x, cdf_forward(params, x).log_density.exp())
            })
            .collect();
        plots::line_chart(
            path,
            title,
            "x",
            "density",
            &[("ground truth", gt_series), ("learned flow", learned_series)],
        )
    };
    marginal_plot(
        &out_dir.join(format!("{mode}_marginal_1.svg")),
        &format!("first marginal ({mode})"),
        0.0,
        8.0,
        &|x| gt.marginal_1.pdf(x),
        p0,
    )?;
    marginal_plot(
        &out_dir.join(format!("{mode}_marginal_2.svg")),
        &format!("second marginal ({mode})"),
        -2.0,
        2.0,
        &|y| gt.marginal_2.pdf(y),
        p1,
    )?;
    Ok(())
}
