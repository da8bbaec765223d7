//! Builds training/validation window sets from a config's data section.

use anyhow::{anyhow, Result};

use tscopula::data::{
    apply_task_mask, corrupt_unaligned, corrupt_uneven, gen_noisy_sines, load_csv_series,
    slice_windows, TimeSeriesWindow,
};
use tscopula::estimator::TrainData;
use tscopula::oracle::{samples_to_windows, GroundTruthBivariate};

use crate::config::{DataSection, DataSource};

pub struct BuiltData {
    pub data: TrainData,
    pub n_series: usize,
    pub n_covariates: usize,
}

pub fn build_data(section: &DataSection, seed: u64) -> Result<BuiltData> {
    match &section.source {
        DataSource::Oracle { n_train, n_val } => {
            let gt = GroundTruthBivariate::standard();
            let train = samples_to_windows(&gt.sample(*n_train, seed));
            let val = samples_to_windows(&gt.sample(*n_val, seed ^ 0x5EED));
            Ok(BuiltData {
                data: TrainData::new(train, val).map_err(|e| anyhow!(e))?,
                n_series: 2,
                n_covariates: 0,
            })
        }
        DataSource::NoisySines { spec, n_train_windows, n_val_windows, corruption } => {
            let task = section
                .task
                .as_ref()
                .ok_or_else(|| anyhow!("data.task required for noisy-sines"))?;
            let mk = |count: usize, tag: u64| -> Result<Vec<TimeSeriesWindow>> {
                (0..count)
                    .map(|i| {
                        let s = seed.wrapping_add(tag).wrapping_add(i as u64);
                        let mut w = gen_noisy_sines(spec, s)?;
                        w = match corruption.as_str() {
                            "uneven" => corrupt_uneven(&w, s)?,
                            "unaligned" => corrupt_unaligned(&w, s)?,
                            _ => w,
                        };
                        apply_task_mask(&w, task)
                    })
                    .collect::<tscopula::Result<_>>()
                    .map_err(|e| anyhow!(e))
            };
            let train = mk(*n_train_windows, 0)?;
            let val = mk(*n_val_windows, 0x9999)?;
            Ok(BuiltData {
                data: TrainData::new(train, val).map_err(|e| anyhow!(e))?,
                n_series: spec.n_series,
                n_covariates: 0,
            })
        }
        DataSource::Csv { path, schema } => {
            let task = section.task.as_ref().ok_or_else(|| anyhow!("data.task required for csv"))?;
            let series = load_csv_series(path, schema).map_err(|e| anyhow!(e))?;
            if series.n_series() == 0 {
                return Err(anyhow!("csv {} contains no data", path.display()));
            }
            let total = series.min_len();
            let reservation = schema.validation_reservation();
            let fit_end = total.saturating_sub(reservation);
            let train_raw = slice_windows(&series, schema, fit_end);
            // validation: non-overlapping windows inside the reserved tail
            let len = schema.window_len();
            let mut val_raw = Vec::new();
            let mut start = fit_end;
            while start + len <= total {
                val_raw.push(series.window_by_index(start, len).map_err(|e| anyhow!(e))?);
                start += len;
            }
            let mask = |ws: Vec<TimeSeriesWindow>| -> Result<Vec<TimeSeriesWindow>> {
                ws.iter()
                    .map(|w| apply_task_mask(w, task))
                    .collect::<tscopula::Result<_>>()
                    .map_err(|e| anyhow!(e))
            };
            let n_covariates = schema.covariate_cols.len();
            Ok(BuiltData {
                data: TrainData::new(mask(train_raw)?, mask(val_raw)?).map_err(|e| anyhow!(e))?,
                n_series: series.n_series(),
                n_covariates,
            })
        }
    }
}
