//! Rolling-window backtesting with periodic retraining.
//!
//! For each cutoff: train (or reuse, per the retraining cadence) a model on
//! data strictly before the cutoff minus the validation reservation, then
//! score the prediction window at the cutoff with all metrics. Cutoffs
//! without enough history are skipped and recorded. Interpolation shifts
//! each prediction window back by the posterior observed length, and the
//! training range additionally excludes everything overlapping the
//! evaluation window.

use ndarray::Array2;

use crate::data::{apply_task_mask, SeriesSet, TaskSpec, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::estimator::{joint_nll, predict_samples, EvalOptions, Model, ModelState, TrainData};
use crate::rng;

use super::{crps_grid, crps_sum, energy_score, MetricReport, WindowMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BacktestTask {
    Forecast,
    Interpolation,
}

#[derive(Debug, Clone)]
pub struct BacktestSchedule {
    /// Cutoff timestamps, in increasing order.
    pub cutoffs: Vec<f64>,
    /// Retrain every k-th non-skipped cutoff (1 = every cutoff).
    pub retrain_cadence: usize,
    pub prediction_length: usize,
    /// Observed context per series in the evaluation window.
    pub history_length: usize,
    pub n_samples: usize,
    /// Steps reserved before each cutoff for validation.
    pub validation_reservation: usize,
    pub task: BacktestTask,
    pub seed: u64,
}

impl BacktestSchedule {
    fn window_len(&self) -> usize {
        self.history_length + self.prediction_length
    }
}

/// A trained model ready for evaluation.
pub struct TrainedModel {
    pub model: Model,
    pub state: ModelState,
}

#[derive(Debug)]
pub struct BacktestOutcome {
    pub report: MetricReport,
    /// Number of training runs actually executed.
    pub train_runs: usize,
}

fn aligned_timeline(data: &SeriesSet) -> Result<Vec<f64>> {
    if data.n_series() == 0 {
        return Err(Error::Data("backtest needs at least one series".into()));
    }
    let t0 = &data.timestamps[0];
    for s in 1..data.n_series() {
        if data.timestamps[s] != *t0 {
            return Err(Error::Data(format!(
                "backtest requires aligned series; series {s} differs from series 0"
            )));
        }
    }
    Ok(t0.clone())
}

/// Builds the task-masked evaluation window for a cutoff index, or `None`
/// when the history or horizon does not fit.
fn eval_window(
    data: &SeriesSet,
    schedule: &BacktestSchedule,
    timeline_len: usize,
    cut_idx: usize,
) -> Result<Option<(TimeSeriesWindow, usize)>> {
    let len = schedule.window_len();
    let (start, task) = match schedule.task {
        BacktestTask::Forecast => {
            if cut_idx < schedule.history_length || cut_idx + schedule.prediction_length > timeline_len {
                return Ok(None);
            }
            (cut_idx - schedule.history_length, TaskSpec::forecast(schedule.prediction_length, 1))
        }
        BacktestTask::Interpolation => {
            if cut_idx < len {
                return Ok(None);
            }
            (cut_idx - len, TaskSpec::centered_interpolation(len, schedule.prediction_length)?)
        }
    };
    let window = data.window_by_index(start, len)?;
    let masked = apply_task_mask(&window, &task)?;
    Ok(Some((masked, start)))
}

/// Slices the pre-cutoff range into task-masked training and validation
/// windows. `train_end` is exclusive; the validation range is the
/// reservation immediately before it.
fn training_data(
    data: &SeriesSet,
    schedule: &BacktestSchedule,
    train_end: usize,
) -> Result<Option<TrainData>> {
    let len = schedule.window_len();
    let task = match schedule.task {
        BacktestTask::Forecast => TaskSpec::forecast(schedule.prediction_length, 1),
        BacktestTask::Interpolation => TaskSpec::centered_interpolation(len, schedule.prediction_length)?,
    };
    let fit_end = train_end.saturating_sub(schedule.validation_reservation);
    let mut train = Vec::new();
    let mut start = 0usize;
    while start + len <= fit_end {
        let w = data.window_by_index(start, len)?;
        train.push(apply_task_mask(&w, &task)?);
        start += schedule.prediction_length.max(1);
    }
    let mut val = Vec::new();
    let mut vstart = fit_end;
    while vstart + len <= train_end {
        let w = data.window_by_index(vstart, len)?;
        val.push(apply_task_mask(&w, &task)?);
        vstart += len;
    }
    if train.is_empty() || val.is_empty() {
        return Ok(None);
    }
    Ok(Some(TrainData { train, val }))
}

/// Converts a flat canonical-order sample matrix into a series x time grid.
fn to_grid(flat: &Array2<f64>, n_series: usize, n_time: usize, sample: usize) -> Array2<f64> {
    let mut g = Array2::zeros((n_series, n_time));
    for i in 0..n_series {
        for t in 0..n_time {
            g[[i, t]] = flat[[sample, i * n_time + t]];
        }
    }
    g
}

/// Runs the rolling-window evaluation. The factory trains a model on the
/// given data; it is called once per retraining point.
pub fn backtest<F>(mut factory: F, data: &SeriesSet, schedule: &BacktestSchedule) -> Result<BacktestOutcome>
where
    F: FnMut(&TrainData, u64) -> Result<TrainedModel>,
{
    if schedule.cutoffs.is_empty() {
        eprintln!("warning: backtest schedule has no cutoffs");
        return Ok(BacktestOutcome {
            report: MetricReport::from_windows(Vec::new(), Vec::new())?,
            train_runs: 0,
        });
    }
    if schedule.retrain_cadence == 0 {
        return Err(Error::Config("schedule.retrain_cadence must be >= 1".into()));
    }
    let timeline = aligned_timeline(data)?;
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    let mut current: Option<TrainedModel> = None;
    let mut train_runs = 0usize;
    let mut evaluated = 0usize;

    for &cutoff in &schedule.cutoffs {
        let cut_idx = timeline.partition_point(|&t| t < cutoff);
        let Some((masked, eval_start)) = eval_window(data, schedule, timeline.len(), cut_idx)? else {
            skipped.push(cutoff);
            continue;
        };
        // training range never touches the evaluation window
        let train_end = match schedule.task {
            BacktestTask::Forecast => cut_idx,
            BacktestTask::Interpolation => cut_idx.min(eval_start),
        };
        let need_train = current.is_none() || evaluated % schedule.retrain_cadence == 0;
        if need_train {
            match training_data(data, schedule, train_end)? {
                Some(td) => {
                    current = Some(factory(&td, rng::stream(schedule.seed, &[train_runs as u64]).get_stream())?);
                    train_runs += 1;
                }
                None => {
                    skipped.push(cutoff);
                    continue;
                }
            }
        }
        let trained = current.as_ref().expect("model available");

        let n_series = data.n_series();
        let pred = schedule.prediction_length;
        let mut truth = Array2::zeros((n_series, pred));
        let miss = masked.missing_indices();
        debug_assert_eq!(miss.len(), n_series * pred);
        for (k, &idx) in miss.iter().enumerate() {
            let (i, t) = (k / pred, k % pred);
            truth[[i, t]] = masked.tokens()[idx].value;
        }
        let mut srng = rng::stream(schedule.seed, &[0x5A, cut_idx as u64]);
        let out = predict_samples(&trained.model, &trained.state, &masked, schedule.n_samples, &mut srng)?;
        if out.samples.nrows() == 0 {
            skipped.push(cutoff);
            continue;
        }
        let grids: Vec<Array2<f64>> =
            (0..out.samples.nrows()).map(|s| to_grid(&out.samples, n_series, pred, s)).collect();
        let truth_flat: Vec<f64> = miss.iter().map(|&i| masked.tokens()[i].value).collect();
        let nll = joint_nll(
            &trained.model,
            &trained.state,
            &masked,
            &EvalOptions { original_units: true, ..Default::default() },
        )?;
        windows.push(WindowMetrics {
            cutoff,
            crps: crps_grid(&grids, &truth)?,
            crps_sum: crps_sum(&grids, &truth)?,
            energy: energy_score(&out.samples, &truth_flat)?,
            nll,
        });
        evaluated += 1;
    }

    Ok(BacktestOutcome { report: MetricReport::from_windows(windows, skipped)?, train_runs })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_noisy_sines, SineSpec};
    use crate::estimator::ModelConfig;

    fn sine_series(length: usize, seed: u64) -> SeriesSet {
        let spec = SineSpec::bivariate(length, 0.2);
        SeriesSet::from_window(&gen_noisy_sines(&spec, seed).unwrap())
    }

    /// Factory that skips training entirely (fresh zero-init model).
    fn stub_factory(_data: &TrainData, _seed: u64) -> Result<TrainedModel> {
        let (model, state) = ModelConfig::tiny(2, 0).build(11)?;
        Ok(TrainedModel { model, state })
    }

    fn schedule(cutoffs: Vec<f64>, task: BacktestTask) -> BacktestSchedule {
        BacktestSchedule {
            cutoffs,
            retrain_cadence: 1,
            prediction_length: 3,
            history_length: 9,
            n_samples: 40,
            validation_reservation: 12,
            task,
            seed: 9,
        }
    }

    #[test]
    fn one_cutoff_one_training_run() {
        let data = sine_series(80, 1);
        let mut calls = 0usize;
        let factory = |d: &TrainData, s: u64| {
            calls += 1;
            stub_factory(d, s)
        };
        let out = backtest(factory, &data, &schedule(vec![60.0], BacktestTask::Forecast)).unwrap();
        assert_eq!(out.train_runs, 1);
        assert_eq!(calls, 1);
        assert_eq!(out.report.windows.len(), 1);
    }

    #[test]
    fn metric_count_matches_non_skipped_cutoffs() {
        let data = sine_series(80, 2);
        // 2.0 lacks history; 200.0 beyond the horizon -> both skipped
        let sched = schedule(vec![2.0, 40.0, 60.0, 200.0], BacktestTask::Forecast);
        let out = backtest(stub_factory, &data, &sched).unwrap();
        assert_eq!(out.report.windows.len(), 2);
        assert_eq!(out.report.skipped_cutoffs, vec![2.0, 200.0]);
    }

    #[test]
    fn cadence_reuses_models() {
        let data = sine_series(120, 3);
        let mut sched = schedule(vec![50.0, 60.0, 70.0, 80.0], BacktestTask::Forecast);
        sched.retrain_cadence = 2;
        let out = backtest(stub_factory, &data, &sched).unwrap();
        assert_eq!(out.report.windows.len(), 4);
        assert_eq!(out.train_runs, 2);
    }

    #[test]
    fn zeroing_post_window_data_changes_nothing() {
        let data = sine_series(100, 4);
        let sched = schedule(vec![60.0], BacktestTask::Forecast);
        let base = backtest(stub_factory, &data, &sched).unwrap();
        // the cutoff's result may depend only on data up to the end of its
        // prediction window (index 63)
        let mut censored = data.clone();
        for s in 0..censored.n_series() {
            for j in 63..censored.values[s].len() {
                censored.values[s][j] = 0.0;
            }
        }
        let after = backtest(stub_factory, &censored, &sched).unwrap();
        assert_eq!(base.report.windows.len(), 1);
        let (a, b) = (&base.report.windows[0], &after.report.windows[0]);
        assert_eq!(a.crps, b.crps);
        assert_eq!(a.crps_sum, b.crps_sum);
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.nll, b.nll);
    }

    #[test]
    fn empty_schedule_gives_empty_report() {
        let data = sine_series(50, 5);
        let out = backtest(stub_factory, &data, &schedule(vec![], BacktestTask::Forecast)).unwrap();
        assert!(out.report.windows.is_empty());
        assert_eq!(out.train_runs, 0);
    }

    #[test]
    fn interpolation_path_runs_end_to_end() {
        let data = sine_series(100, 6);
        let sched = schedule(vec![70.0], BacktestTask::Interpolation);
        let out = backtest(stub_factory, &data, &sched).unwrap();
        assert_eq!(out.report.windows.len(), 1);
        assert!(out.report.windows[0].nll.is_finite());
    }

    #[test]
    fn unaligned_series_are_rejected() {
        let mut data = sine_series(50, 7);
        data.timestamps[1][0] += 0.5;
        let err = backtest(stub_factory, &data, &schedule(vec![30.0], BacktestTask::Forecast));
        assert!(err.is_err());
    }
}
