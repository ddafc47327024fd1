//! Observation file handling: CSV ingest with the `x1,...,xn,channel,y`
//! schema, per-channel standardization, the sensor-failure masking split and
//! seeded subsampling. Channel ids are 1-based in files and 0-based
//! internally; this module is the boundary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gp::Dataset;

/// Load a dataset from a CSV file with header `x1,...,xn,channel,y`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| Error::Csv {
        line: 0,
        reason: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let cols = headers.len();
    if cols < 3 {
        return Err(Error::Csv {
            line: 1,
            reason: format!("expected at least 3 columns (x1,channel,y), got {cols}"),
        });
    }
    let input_dim = cols - 2;
    for d in 0..input_dim {
        let expect = format!("x{}", d + 1);
        if headers.get(d) != Some(expect.as_str()) {
            return Err(Error::Csv {
                line: 1,
                reason: format!(
                    "unknown header {:?}; expected {expect}",
                    headers.get(d).unwrap_or("")
                ),
            });
        }
    }
    if headers.get(input_dim) != Some("channel") || headers.get(input_dim + 1) != Some("y") {
        return Err(Error::Csv {
            line: 1,
            reason: "header must end with `channel,y`".into(),
        });
    }

    let mut locations = Vec::new();
    let mut channels = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header occupies line 1
        let record = record.map_err(|e| Error::Csv {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != cols {
            return Err(Error::Csv {
                line,
                reason: format!("expected {cols} fields, got {}", record.len()),
            });
        }
        let parse = |field: usize, name: &str| -> Result<f64> {
            let raw = record.get(field).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| Error::Csv {
                line,
                reason: format!("cannot parse {name} value {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line,
                    reason: format!("{name} value {raw:?} is not finite"),
                });
            }
            Ok(v)
        };
        for d in 0..input_dim {
            locations.push(parse(d, &format!("x{}", d + 1))?);
        }
        let ch_raw = record.get(input_dim).unwrap_or("").trim();
        let ch: usize = ch_raw.parse().map_err(|_| Error::Csv {
            line,
            reason: format!("cannot parse channel {ch_raw:?}"),
        })?;
        if ch == 0 {
            return Err(Error::Csv {
                line,
                reason: "channel ids are 1-based".into(),
            });
        }
        channels.push(ch - 1);
        values.push(parse(input_dim + 1, "y")?);
    }
    Dataset::new(input_dim, locations, channels, values)
}

/// Write a dataset using the same schema (channels back to 1-based).
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Csv {
        line: 0,
        reason: e.to_string(),
    })?;
    let mut header: Vec<String> = (1..=data.input_dim()).map(|d| format!("x{d}")).collect();
    header.push("channel".into());
    header.push("y".into());
    writer.write_record(&header).map_err(io_err)?;
    for r in 0..data.len() {
        let mut row: Vec<String> = data.location(r).iter().map(|v| format!("{v}")).collect();
        row.push(format!("{}", data.channel(r) + 1));
        row.push(format!("{}", data.value(r)));
        writer.write_record(&row).map_err(io_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Csv {
        line: 0,
        reason: e.to_string(),
    }
}

/// Per-channel standardization statistics fitted on training values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    /// Mean and standard deviation per channel id; `None` for absent channels.
    pub stats: Vec<Option<(f64, f64)>>,
}

impl NormalizationState {
    /// Fit per-channel mean and standard deviation. Channels with constant
    /// (or missing) values cannot be standardized.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let m = data.channel_count();
        let mut stats = vec![None; m];
        for c in 0..m {
            let vals: Vec<f64> = (0..data.len())
                .filter(|&r| data.channel(r) == c)
                .map(|r| data.value(r))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            if !(var > 0.0) {
                return Err(Error::ConstantChannel { channel: c + 1 });
            }
            stats[c] = Some((mean, var.sqrt()));
        }
        Ok(Self { stats })
    }

    fn get(&self, channel: usize) -> Result<(f64, f64)> {
        self.stats
            .get(channel)
            .copied()
            .flatten()
            .ok_or(Error::InvalidData(format!(
                "no normalization statistics for channel {}",
                channel + 1
            )))
    }

    /// Standardize values channel-wise.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = data.clone();
        for r in 0..out.len() {
            let (mean, sd) = self.get(out.channel(r))?;
            out.values_mut()[r] = (data.value(r) - mean) / sd;
        }
        Ok(out)
    }

    /// Undo [`NormalizationState::apply`].
    pub fn invert(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = data.clone();
        for r in 0..out.len() {
            let (mean, sd) = self.get(out.channel(r))?;
            out.values_mut()[r] = data.value(r) * sd + mean;
        }
        Ok(out)
    }

    /// De-normalize a single predicted mean.
    pub fn denormalize_mean(&self, channel: usize, value: f64) -> Result<f64> {
        let (mean, sd) = self.get(channel)?;
        Ok(value * sd + mean)
    }

    /// De-normalize a predicted standard deviation (pure scaling).
    pub fn denormalize_sd(&self, channel: usize, sd_value: f64) -> Result<f64> {
        let (_, sd) = self.get(channel)?;
        Ok(sd_value * sd)
    }
}

/// Fit a fresh normalization on `data` and apply it.
pub fn normalize(data: &Dataset) -> Result<(Dataset, NormalizationState)> {
    let state = NormalizationState::fit(data)?;
    let out = state.apply(data)?;
    Ok((out, state))
}

/// Simulate a sensor failure: for `channel`, the observations whose first
/// coordinate ranks beyond the `(1 - fraction)` quantile of that channel's
/// locations move to the test split; every other observation stays in
/// training. Rank-based, so shuffled files behave the same as sorted ones.
pub fn mask_failure(
    data: &Dataset,
    channel: usize,
    fraction: f64,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidData(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let rows = data.rows_of_channel(channel);
    if rows.is_empty() {
        return Err(Error::InvalidData(format!(
            "channel {} has no observations",
            channel + 1
        )));
    }
    let mut order = rows.clone();
    order.sort_by(|&a, &b| {
        data.location(a)[0]
            .partial_cmp(&data.location(b)[0])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n_test = ((fraction * rows.len() as f64).ceil() as usize).min(rows.len());
    let test_rows: std::collections::HashSet<usize> =
        order[rows.len() - n_test..].iter().copied().collect();

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for r in 0..data.len() {
        if test_rows.contains(&r) {
            test_idx.push(r);
        } else {
            train_idx.push(r);
        }
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidData("mask produced an empty split".into()));
    }
    Ok((data.select(&train_idx), data.select(&test_idx)))
}

/// Uniform subsample without replacement, deterministic per seed.
pub fn uniform_subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(Error::InvalidData(format!(
            "cannot sample {n} of {} rows",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let pick = rand::Rng::random_range(&mut rng, k..idx.len());
        idx.swap(k, pick);
    }
    Ok(data.select(&idx[..n]))
}
