//! Three-channel synthetic benchmark: a reference signal drawn from a
//! spectral-mixture GP, its numerical derivative, and a delayed copy, plus
//! the analytic auto/cross-covariance truth tables and the MAE metric.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cholesky_jitter, Dataset};
use crate::kernel::{clamped_exp, sm_kernel};

/// Generator settings. All fields have defaults producing visibly oscillatory
/// paths; sample counts and intervals default to the benchmark protocol
/// (500 reference points on [-20, 20], 400 derivative and 400 delayed points
/// on [-20, 0], held-out regions [-20, 20] / [0, 20] / [0, 20]).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    /// SM generator weights, one per component.
    pub weights: Vec<f64>,
    /// SM generator angular frequencies.
    pub means: Vec<f64>,
    /// SM generator scales (squared frequency).
    pub scales: Vec<f64>,
    /// Delay of channel 3 in input units; must be a multiple of `grid_step`.
    pub delay: f64,
    /// Observation noise standard deviation added to training values.
    pub noise_sd: f64,
    pub grid_start: f64,
    pub grid_end: f64,
    pub grid_step: f64,
    /// Training sample counts per channel (reference, derivative, delayed).
    pub train_counts: [usize; 3],
    /// Training intervals per channel.
    pub train_intervals: [(f64, f64); 3],
    /// Held-out evaluation intervals per channel.
    pub test_intervals: [(f64, f64); 3],
    /// Spacing of held-out evaluation points (multiple of `grid_step`).
    pub test_step: f64,
    /// Half-width and spacing of the covariance truth tables.
    pub truth_tau_max: f64,
    pub truth_tau_step: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            weights: vec![1.0],
            means: vec![3.0],
            scales: vec![0.05],
            delay: 1.0,
            noise_sd: 0.05,
            grid_start: -22.0,
            grid_end: 22.0,
            grid_step: 0.02,
            train_counts: [500, 400, 400],
            train_intervals: [(-20.0, 20.0), (-20.0, 0.0), (-20.0, 0.0)],
            test_intervals: [(-20.0, 20.0), (0.0, 20.0), (0.0, 20.0)],
            test_step: 0.1,
            truth_tau_max: 5.0,
            truth_tau_step: 0.05,
            seed: 0,
        }
    }
}

/// One sampled draw `L z` of a zero-mean GP with an SM kernel on a sorted
/// grid, deterministic per seed.
pub fn sample_gp_path(
    weights: &[f64],
    means: &[f64],
    scales: &[f64],
    grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    if grid.len() < 1 {
        return Err(Error::InvalidData("grid must be non-empty".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidData("grid must be strictly increasing".into()));
    }
    let n = grid.len();
    let mut k = nalgebra::DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = sm_kernel(weights, means, scales, grid[a] - grid[b])?;
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    // an identically-zero kernel is the zero process
    if k.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let chol = cholesky_jitter(&k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = nalgebra::DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let path = chol.factor.l_dirty().lower_triangle() * z;
    Ok(path.iter().cloned().collect())
}

/// First-order forward differences, with the last value repeated so the
/// output aligns with the grid.
pub fn derivative_channel(grid: &[f64], values: &[f64]) -> Vec<f64> {
    assert!(grid.len() >= 2, "need at least two grid points");
    assert_eq!(grid.len(), values.len());
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n - 1 {
        out.push((values[k + 1] - values[k]) / (grid[k + 1] - grid[k]));
    }
    out.push(out[n - 2]);
    out
}

/// Index shift corresponding to `delta` on a uniform grid. Errors unless
/// `delta` is a non-negative multiple of the grid step.
pub fn delay_shift(grid: &[f64], delta: f64) -> Result<usize> {
    if grid.len() < 2 {
        return Err(Error::InvalidData("grid must have at least two points".into()));
    }
    let step = grid[1] - grid[0];
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.abs().max(1.0));
    if !uniform {
        return Err(Error::InvalidData("delay requires a uniform grid".into()));
    }
    if delta < 0.0 {
        return Err(Error::InvalidData("delay must be non-negative".into()));
    }
    let ratio = delta / step;
    let shift = ratio.round();
    if (ratio - shift).abs() > 1e-6 {
        return Err(Error::InvalidData(format!(
            "delay {delta} is not a multiple of the grid step {step}; refine the grid"
        )));
    }
    Ok(shift as usize)
}

/// Values of the delayed signal `f(x - delta)` on the usable part of the
/// grid. The returned vector aligns with `grid[shift..]`, where `shift` is
/// [`delay_shift`]; earlier points are dropped.
pub fn delay_channel(grid: &[f64], values: &[f64], delta: f64) -> Result<Vec<f64>> {
    let shift = delay_shift(grid, delta)?;
    if shift >= values.len() {
        return Err(Error::InvalidData("delay exceeds the grid span".into()));
    }
    Ok(values[..values.len() - shift].to_vec())
}

/// Analytic truth covariance for a channel pair at lag `tau`, where `tau` is
/// the lead of the second channel's argument over the first's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRow {
    /// 0-based channel pair.
    pub pair: (usize, usize),
    pub tau: f64,
    pub value: f64,
}

/// Generated benchmark: noisy training triples, noiseless held-out triples
/// and the analytic covariance tables.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: Vec<TruthRow>,
}

/// SM kernel derivative `k'(tau)` (sum over components).
pub fn sm_kernel_deriv(weights: &[f64], means: &[f64], scales: &[f64], tau: f64) -> f64 {
    let mut acc = 0.0;
    for q in 0..weights.len() {
        let (w, mu, s) = (weights[q], means[q], scales[q]);
        let e = clamped_exp(-0.5 * s * tau * tau);
        acc += w * e * (-s * tau * (mu * tau).cos() - mu * (mu * tau).sin());
    }
    acc
}

/// SM kernel second derivative `k''(tau)`.
pub fn sm_kernel_deriv2(weights: &[f64], means: &[f64], scales: &[f64], tau: f64) -> f64 {
    let mut acc = 0.0;
    for q in 0..weights.len() {
        let (w, mu, s) = (weights[q], means[q], scales[q]);
        let e = clamped_exp(-0.5 * s * tau * tau);
        let c = (mu * tau).cos();
        let si = (mu * tau).sin();
        acc += w * e * ((s * s * tau * tau - s - mu * mu) * c + 2.0 * s * mu * tau * si);
    }
    acc
}

fn interval_indices(grid: &[f64], lo: f64, hi: f64, min_index: usize) -> Vec<usize> {
    let eps = 1e-9;
    (min_index..grid.len())
        .filter(|&k| grid[k] >= lo - eps && grid[k] <= hi + eps)
        .collect()
}

/// Build the three-channel dataset: channel 0 is the reference path, channel
/// 1 its forward-difference derivative, channel 2 the delayed copy. Training
/// points are drawn uniformly without replacement from the grid indices
/// inside each channel's interval, with Gaussian observation noise; held-out
/// points are noiseless values on a regular sub-grid of the test intervals.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.grid_step <= 0.0 || cfg.test_step <= 0.0 || cfg.truth_tau_step <= 0.0 {
        return Err(Error::InvalidData("steps must be positive".into()));
    }
    if cfg.grid_end <= cfg.grid_start {
        return Err(Error::InvalidData("grid interval is empty".into()));
    }
    if cfg.noise_sd < 0.0 {
        return Err(Error::InvalidData("noise_sd must be non-negative".into()));
    }
    if cfg.train_counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidData("train counts must be positive".into()));
    }

    let steps = ((cfg.grid_end - cfg.grid_start) / cfg.grid_step).round() as usize;
    let grid: Vec<f64> = (0..=steps)
        .map(|k| cfg.grid_start + cfg.grid_step * k as f64)
        .collect();

    let path = sample_gp_path(&cfg.weights, &cfg.means, &cfg.scales, &grid, cfg.seed)?;
    let deriv = derivative_channel(&grid, &path);
    let shift = delay_shift(&grid, cfg.delay)?;

    // channel value at grid index k
    let channel_value = |ch: usize, k: usize| -> f64 {
        match ch {
            0 => path[k],
            1 => deriv[k],
            _ => path[k - shift],
        }
    };
    let min_index = |ch: usize| if ch == 2 { shift } else { 0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let noise = if cfg.noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sd).expect("valid noise sd"))
    } else {
        None
    };

    let mut train_rows: Vec<(f64, usize, f64)> = Vec::new();
    for ch in 0..3 {
        let (lo, hi) = cfg.train_intervals[ch];
        let mut avail = interval_indices(&grid, lo, hi, min_index(ch));
        let count = cfg.train_counts[ch];
        if count > avail.len() {
            return Err(Error::InvalidData(format!(
                "channel {} needs {count} samples but only {} grid points lie in [{lo}, {hi}]",
                ch + 1,
                avail.len()
            )));
        }
        // partial Fisher-Yates: uniform subset without replacement
        for k in 0..count {
            let pick = rng.random_range(k..avail.len());
            avail.swap(k, pick);
        }
        for &idx in &avail[..count] {
            let mut y = channel_value(ch, idx);
            if let Some(n) = &noise {
                y += n.sample(&mut rng);
            }
            train_rows.push((grid[idx], ch, y));
        }
    }

    let stride = (cfg.test_step / cfg.grid_step).round().max(1.0) as usize;
    let mut test_rows: Vec<(f64, usize, f64)> = Vec::new();
    for ch in 0..3 {
        let (lo, hi) = cfg.test_intervals[ch];
        for idx in interval_indices(&grid, lo, hi, min_index(ch)) {
            if idx % stride == 0 {
                test_rows.push((grid[idx], ch, channel_value(ch, idx)));
            }
        }
    }
    if test_rows.is_empty() {
        return Err(Error::InvalidData("test intervals select no grid points".into()));
    }

    // analytic covariance tables; tau is the lead of the second channel
    let (w, mu, s) = (&cfg.weights[..], &cfg.means[..], &cfg.scales[..]);
    let d = cfg.delay;
    let truth_value = |pair: (usize, usize), tau: f64| -> f64 {
        match pair {
            (0, 0) | (2, 2) => sm_kernel(w, mu, s, tau).unwrap(),
            (1, 1) => -sm_kernel_deriv2(w, mu, s, tau),
            (0, 1) => sm_kernel_deriv(w, mu, s, tau),
            (0, 2) => sm_kernel(w, mu, s, tau - d).unwrap(),
            (1, 2) => -sm_kernel_deriv(w, mu, s, tau - d),
            _ => unreachable!(),
        }
    };
    let tau_steps = (cfg.truth_tau_max / cfg.truth_tau_step).round() as i64;
    let mut truth = Vec::new();
    for pair in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)] {
        for t in -tau_steps..=tau_steps {
            let tau = t as f64 * cfg.truth_tau_step;
            truth.push(TruthRow {
                pair,
                tau,
                value: truth_value(pair, tau),
            });
        }
    }

    Ok(SynthOutput {
        train: Dataset::from_triples(&train_rows)?,
        test: Dataset::from_triples(&test_rows)?,
        truth,
    })
}

/// Mean absolute error between a truth vector and an estimate.
pub fn mae(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            context: "mae",
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidData("mae of empty vectors".into()));
    }
    let sum: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / truth.len() as f64)
}
