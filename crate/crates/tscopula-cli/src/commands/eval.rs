//! `tscopula eval`: score a trained checkpoint over a backtest schedule,
//! emit the metrics table (JSON + CSV), the NLL-vs-FLOPs curve, and
//! forecast fan charts.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};

use tscopula::data::{apply_task_mask, SeriesSet, TaskSpec};
use tscopula::estimator::{load_checkpoint, predict_samples, read_history_jsonl};
use tscopula::metrics::{backtest, BacktestSchedule, BacktestTask, TrainedModel};
use tscopula::rng;
use tscopula::stats::quantile;

use crate::config::{DataSource, ExperimentConfig};
use crate::plots;

pub fn run(config: &ExperimentConfig, checkpoint: &Path, history: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let (model, state, _ckpt) = load_checkpoint(checkpoint).map_err(|e| anyhow!(e))?;

    let series = load_series(config)?;
    let schedule = BacktestSchedule {
        cutoffs: config.eval.cutoffs.clone(),
        retrain_cadence: config.eval.retrain_cadence,
        prediction_length: config.eval.prediction_length,
        history_length: config.eval.history_length,
        n_samples: config.eval.n_samples,
        validation_reservation: config.eval.validation_reservation,
        task: if config.eval.task == "interpolation" {
            BacktestTask::Interpolation
        } else {
            BacktestTask::Forecast
        },
        seed: config.seed,
    };
    if schedule.cutoffs.is_empty() {
        eprintln!("warning: eval schedule has no cutoffs; writing an empty report");
    }

    // the checkpoint is the model at every cutoff; no retraining happens
    let outcome = backtest(
        |_data, _seed| {
            Ok(TrainedModel {
                model: model.clone(),
                state: state.clone(),
            })
        },
        &series,
        &schedule,
    )
    .map_err(|e| anyhow!(e))?;

    let report_json = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(config.out_dir.join("metrics.json"), report_json)?;
    std::fs::write(config.out_dir.join("metrics.csv"), outcome.report.to_csv())?;

    let history_path: Option<PathBuf> = history
        .map(|p| p.to_path_buf())
        .or_else(|| {
            let sibling = checkpoint.parent()?.join("history.jsonl");
            sibling.exists().then_some(sibling)
        });
    if let Some(hp) = history_path {
        let records = read_history_jsonl(&hp).map_err(|e| anyhow!(e))?;
        let mut series_by_stage: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
        for stage in ["stage1", "stage2", "joint"] {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.stage == stage)
                .map(|r| (r.cum_flops as f64, r.val_nll))
                .collect();
            if !pts.is_empty() {
                series_by_stage.push((stage, pts));
            }
        }
        plots::line_chart(
            &config.out_dir.join("nll_vs_flops.svg"),
            "validation NLL vs training FLOPs",
            "cumulative FLOPs",
            "validation NLL (per dim)",
            &series_by_stage,
        )?;
    }

    if let Some(&cutoff) = schedule
        .cutoffs
        .iter()
        .find(|c| !outcome.report.skipped_cutoffs.contains(c))
    {
        fan_charts(config, &model, &state, &series, &schedule, cutoff)?;
    }
    println!(
        "evaluated {} windows ({} skipped); mean CRPS {:.6}, CRPS-Sum {:.6}, energy {:.6}, NLL {:.6}",
        outcome.report.windows.len(),
        outcome.report.skipped_cutoffs.len(),
        outcome.report.crps.mean,
        outcome.report.crps_sum.mean,
        outcome.report.energy.mean,
        outcome.report.nll.mean,
    );
    Ok(())
}

fn load_series(config: &ExperimentConfig) -> Result<SeriesSet> {
    match &config.data.source {
        DataSource::Csv { path, schema } => {
            Ok(tscopula::data::load_csv_series(path, schema).map_err(|e| anyhow!(e))?)
        }
        DataSource::NoisySines { spec, .. } => {
            let w = tscopula::data::gen_noisy_sines(spec, config.seed).map_err(|e| anyhow!(e))?;
            Ok(SeriesSet::from_window(&w))
        }
        DataSource::Oracle { .. } => bail!("eval needs a time-structured data source (csv or noisy-sines)"),
    }
}

/// Fan chart per series at one cutoff: observed context, truth, and sample
/// quantile bands.
fn fan_charts(
    config: &ExperimentConfig,
    model: &tscopula::estimator::Model,
    state: &tscopula::estimator::ModelState,
    series: &SeriesSet,
    schedule: &BacktestSchedule,
    cutoff: f64,
) -> Result<()> {
    let timeline = &series.timestamps[0];
    let cut_idx = timeline.partition_point(|&t| t < cutoff);
    let len = schedule.history_length + schedule.prediction_length;
    let start = match schedule.task {
        BacktestTask::Forecast => cut_idx - schedule.history_length,
        BacktestTask::Interpolation => cut_idx - len,
    };
    let window = series.window_by_index(start, len).map_err(|e| anyhow!(e))?;
    let task = match schedule.task {
        BacktestTask::Forecast => TaskSpec::forecast(schedule.prediction_length, 1),
        BacktestTask::Interpolation => {
            TaskSpec::centered_interpolation(len, schedule.prediction_length).map_err(|e| anyhow!(e))?
        }
    };
    let masked = apply_task_mask(&window, &task).map_err(|e| anyhow!(e))?;
    let mut srng = rng::stream(config.seed, &[0xFA11]);
    let out = predict_samples(model, state, &masked, schedule.n_samples.max(50), &mut srng)
        .map_err(|e| anyhow!(e))?;
    if out.samples.nrows() == 0 {
        bail!("no samples survived for the fan chart");
    }

    for sid in 0..series.n_series() {
        let dims: Vec<usize> = (0..out.targets.len()).filter(|&i| out.targets[i].0 == sid).collect();
        if dims.is_empty() {
            continue;
        }
        let band_t: Vec<f64> = dims.iter().map(|&i| out.targets[i].1).collect();
        let mut q05 = Vec::new();
        let mut q25 = Vec::new();
        let mut q50 = Vec::new();
        let mut q75 = Vec::new();
        let mut q95 = Vec::new();
        for &i in &dims {
            let mut col: Vec<f64> = (0..out.samples.nrows()).map(|s| out.samples[[s, i]]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            q05.push(quantile(&col, 0.05));
            q25.push(quantile(&col, 0.25));
            q50.push(quantile(&col, 0.50));
            q75.push(quantile(&col, 0.75));
            q95.push(quantile(&col, 0.95));
        }
        let observed: Vec<(f64, f64)> = masked
            .tokens()
            .iter()
            .filter(|t| t.series_id == sid && t.observed)
            .map(|t| (t.timestamp, t.value))
            .collect();
        let truth: Vec<(f64, f64)> = masked
            .tokens()
            .iter()
            .filter(|t| t.series_id == sid && !t.observed)
            .map(|t| (t.timestamp, t.value))
            .collect();
        plots::fan_chart(
            &config.out_dir.join(format!("fan_s{sid}.svg")),
            &format!("series {sid} @ cutoff {cutoff}"),
            &observed,
            &truth,
            &band_t,
            &q05,
            &q25,
            &q50,
            &q75,
            &q95,
        )?;
    }
    Ok(())
}
