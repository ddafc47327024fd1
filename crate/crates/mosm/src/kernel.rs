//! Multi-output spectral mixture (MOSM) covariance functions.
//!
//! Covariances are designed in the Fourier domain: each channel carries a
//! complex-valued square-exponential spectral factor, cross-spectral densities
//! are products of factors (so the spectral matrix is positive semi-definite
//! by construction), and the time-domain kernels are their closed-form inverse
//! Fourier transforms. Single-output spectral mixture (SM) kernels, the
//! cross-spectral mixture (CSM), the SM linear model of coregionalization
//! (SM-LMC) and independent GPs (IGP) all arise as constrained
//! parametrizations of the same family.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Exponent floor: `exp` underflows gracefully to 0 near -745, but gradient
/// code divides by these factors, so we clamp well before subnormal range.
pub(crate) const EXP_CLAMP: f64 = -700.0;

#[inline]
pub(crate) fn clamped_exp(x: f64) -> f64 {
    x.max(EXP_CLAMP).exp()
}

/// Per-channel, per-mixture-component spectral factor parameters.
///
/// The factor is a complex SE function of frequency: magnitude `weight`,
/// centre `mean` (angular frequency, rad per input unit), diagonal frequency
/// covariance `scales` (squared frequency), linear phase `delay` (input
/// units) and constant `phase` (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scales: Vec<f64>,
    pub delay: Vec<f64>,
    pub phase: f64,
}

impl SpectralComponent {
    pub fn new(
        weight: f64,
        mean: Vec<f64>,
        scales: Vec<f64>,
        delay: Vec<f64>,
        phase: f64,
    ) -> Result<Self> {
        let c = Self {
            weight,
            mean,
            scales,
            delay,
            phase,
        };
        c.validate()?;
        Ok(c)
    }

    /// Scalar-input (n = 1) convenience constructor.
    pub fn new_1d(weight: f64, mean: f64, scale: f64, delay: f64, phase: f64) -> Result<Self> {
        Self::new(weight, vec![mean], vec![scale], vec![delay], phase)
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.scales.len() != n {
            return Err(Error::DimensionMismatch {
                context: "spectral component scales",
                expected: n,
                got: self.scales.len(),
            });
        }
        if self.delay.len() != n {
            return Err(Error::DimensionMismatch {
                context: "spectral component delay",
                expected: n,
                got: self.delay.len(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidParameter {
                name: "mean",
                reason: "input dimension must be at least 1".into(),
            });
        }
        for &s in &self.scales {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "scales",
                    reason: format!("entries must be finite and positive, got {s}"),
                });
            }
        }
        let finite = self.weight.is_finite()
            && self.phase.is_finite()
            && self.mean.iter().all(|v| v.is_finite())
            && self.delay.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter {
                name: "component",
                reason: "all fields must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Derived pairwise parameters of a cross-spectral density and its kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub delay: Vec<f64>,
    pub phase: f64,
    /// Kernel amplitude absorbing the inverse-transform constant:
    /// `weight * (2*pi)^(n/2) * |cov|^(1/2)`.
    pub magnitude: f64,
}

/// Derive the pairwise density parameters from two per-channel factors.
///
/// All products are elementwise since the frequency covariances are diagonal.
/// An identical pair takes the degenerate path so that the auto-density
/// identities (zero delay and phase, squared weight, unchanged mean and
/// covariance) hold exactly in floating point.
pub fn cross_params(a: &SpectralComponent, b: &SpectralComponent) -> Result<CrossParams> {
    a.validate()?;
    b.validate()?;
    let n = a.input_dim();
    if b.input_dim() != n {
        return Err(Error::DimensionMismatch {
            context: "cross_params",
            expected: n,
            got: b.input_dim(),
        });
    }

    if a == b {
        let weight = a.weight * a.weight;
        return Ok(CrossParams {
            weight,
            mean: a.mean.clone(),
            cov_diag: a.scales.clone(),
            delay: vec![0.0; n],
            phase: 0.0,
            magnitude: weight * norm_const(n, &a.scales),
        });
    }

    let mut cov_diag = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    let mut quad = 0.0;
    for d in 0..n {
        let (sa, sb) = (a.scales[d], b.scales[d]);
        let sum = sa + sb;
        cov_diag.push(2.0 * sa * sb / sum);
        mean.push((sa * b.mean[d] + sb * a.mean[d]) / sum);
        let dm = a.mean[d] - b.mean[d];
        quad += dm * dm / sum;
    }
    let weight = a.weight * b.weight * clamped_exp(-0.25 * quad);
    let delay: Vec<f64> = (0..n).map(|d| a.delay[d] - b.delay[d]).collect();
    let phase = a.phase - b.phase;
    let magnitude = weight * norm_const(n, &cov_diag);
    Ok(CrossParams {
        weight,
        mean,
        cov_diag,
        delay,
        phase,
        magnitude,
    })
}

/// `(2*pi)^(n/2) * (prod of diag)^(1/2)`
fn norm_const(n: usize, cov_diag: &[f64]) -> f64 {
    let det: f64 = cov_diag.iter().product();
    (2.0 * PI).powf(0.5 * n as f64) * det.sqrt()
}

impl CrossParams {
    /// Kernel value at lag `tau`:
    /// `magnitude * exp(-1/2 (tau+delay)' Cov (tau+delay)) * cos((tau+delay)' mean + phase)`.
    ///
    /// The quadratic form uses the density covariance itself (a time-domain
    /// precision), not its inverse: the inverse transform of an SE density
    /// with frequency covariance `Cov` has envelope `exp(-1/2 t' Cov t)`.
    pub fn kernel_value(&self, tau: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut arg = self.phase;
        for d in 0..self.cov_diag.len() {
            let v = tau[d] + self.delay[d];
            quad += self.cov_diag[d] * v * v;
            arg += self.mean[d] * v;
        }
        self.magnitude * clamped_exp(-0.5 * quad) * arg.cos()
    }

    /// Symmetrized cross-spectral density at frequency `omega`.
    ///
    /// Two mirrored complex SE terms, combined analytically:
    /// `1/2 (S(omega) + conj(S(-omega)))`. This is the exact Fourier dual of
    /// [`CrossParams::kernel_value`] and keeps the spectral matrix Hermitian
    /// positive semi-definite (each mirrored term is a factor product).
    pub fn density_value(&self, omega: &[f64]) -> Complex64 {
        let n = self.cov_diag.len();
        let mut q_pos = 0.0; // (omega - mean)' Cov^-1 (omega - mean)
        let mut q_neg = 0.0; // (omega + mean)' Cov^-1 (omega + mean)
        let mut lin = 0.0; // delay' omega
        for d in 0..n {
            let dp = omega[d] - self.mean[d];
            let dn = omega[d] + self.mean[d];
            q_pos += dp * dp / self.cov_diag[d];
            q_neg += dn * dn / self.cov_diag[d];
            lin += self.delay[d] * omega[d];
        }
        let g_pos = clamped_exp(-0.5 * q_pos);
        let g_neg = clamped_exp(-0.5 * q_neg);
        let up = Complex64::from_polar(g_pos, lin + self.phase);
        let un = Complex64::from_polar(g_neg, lin - self.phase);
        0.5 * self.weight * (up + un)
    }
}

/// Constrained families expressible inside the MOSM parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Free per-channel spectral factors.
    Mosm,
    /// Means, scales and delays tied across channels; phases free.
    Csm,
    /// Means, scales and delays tied; phases zero.
    SmLmc,
    /// Independent per-channel SM kernels; cross-covariances identically zero.
    Igp,
}

impl std::fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintMode::Mosm => "mosm",
            ConstraintMode::Csm => "csm",
            ConstraintMode::SmLmc => "sm-lmc",
            ConstraintMode::Igp => "igp",
        };
        f.write_str(s)
    }
}

/// The full hyperparameter set of an m-channel, Q-component MOSM kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelFile", into = "KernelFile")]
pub struct MosmKernel {
    channels: usize,
    input_dim: usize,
    mixture_size: usize,
    /// Row-major `channels x mixture_size` grid.
    components: Vec<SpectralComponent>,
    noise_var: Vec<f64>,
    constraint_mode: ConstraintMode,
}

/// Serialized form: `components` as an m x Q grid of component blocks.
#[derive(Serialize, Deserialize)]
struct KernelFile {
    channels: usize,
    input_dim: usize,
    mixture_size: usize,
    constraint_mode: ConstraintMode,
    components: Vec<Vec<SpectralComponent>>,
    noise_var: Vec<f64>,
}

impl TryFrom<KernelFile> for MosmKernel {
    type Error = Error;

    fn try_from(f: KernelFile) -> Result<Self> {
        if f.components.len() != f.channels {
            return Err(Error::DimensionMismatch {
                context: "kernel file components",
                expected: f.channels,
                got: f.components.len(),
            });
        }
        let mut flat = Vec::with_capacity(f.channels * f.mixture_size);
        for row in f.components {
            if row.len() != f.mixture_size {
                return Err(Error::DimensionMismatch {
                    context: "kernel file component row",
                    expected: f.mixture_size,
                    got: row.len(),
                });
            }
            flat.extend(row);
        }
        MosmKernel::new(
            f.channels,
            f.input_dim,
            f.mixture_size,
            flat,
            f.noise_var,
            f.constraint_mode,
        )
    }
}

impl From<MosmKernel> for KernelFile {
    fn from(k: MosmKernel) -> Self {
        let grid = k
            .components
            .chunks(k.mixture_size)
            .map(|row| row.to_vec())
            .collect();
        KernelFile {
            channels: k.channels,
            input_dim: k.input_dim,
            mixture_size: k.mixture_size,
            constraint_mode: k.constraint_mode,
            components: grid,
            noise_var: k.noise_var,
        }
    }
}

impl MosmKernel {
    pub fn new(
        channels: usize,
        input_dim: usize,
        mixture_size: usize,
        components: Vec<SpectralComponent>,
        noise_var: Vec<f64>,
        constraint_mode: ConstraintMode,
    ) -> Result<Self> {
        if channels == 0 || input_dim == 0 || mixture_size == 0 {
            return Err(Error::InvalidParameter {
                name: "kernel shape",
                reason: "channels, input_dim and mixture_size must be positive".into(),
            });
        }
        if components.len() != channels * mixture_size {
            return Err(Error::DimensionMismatch {
                context: "kernel components",
                expected: channels * mixture_size,
                got: components.len(),
            });
        }
        for c in &components {
            c.validate()?;
            if c.input_dim() != input_dim {
                return Err(Error::DimensionMismatch {
                    context: "component input dim",
                    expected: input_dim,
                    got: c.input_dim(),
                });
            }
        }
        if noise_var.len() != channels {
            return Err(Error::DimensionMismatch {
                context: "noise variances",
                expected: channels,
                got: noise_var.len(),
            });
        }
        for &v in &noise_var {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "noise_var",
                    reason: format!("entries must be finite and non-negative, got {v}"),
                });
            }
        }
        let k = Self {
            channels,
            input_dim,
            mixture_size,
            components,
            noise_var,
            constraint_mode,
        };
        k.check_ties()?;
        Ok(k)
    }

    fn check_ties(&self) -> Result<()> {
        let tied = matches!(
            self.constraint_mode,
            ConstraintMode::Csm | ConstraintMode::SmLmc
        );
        if !tied {
            return Ok(());
        }
        for q in 0..self.mixture_size {
            let base = self.component(0, q);
            for i in 1..self.channels {
                let c = self.component(i, q);
                if c.mean != base.mean || c.scales != base.scales || c.delay != base.delay {
                    return Err(Error::InvalidParameter {
                        name: "constraint_mode",
                        reason: format!(
                            "{} mode requires tied means, scales and delays (component {q})",
                            self.constraint_mode
                        ),
                    });
                }
            }
        }
        if self.constraint_mode == ConstraintMode::SmLmc {
            for c in &self.components {
                if c.phase != 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "constraint_mode",
                        reason: "sm-lmc mode requires zero phases".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn mixture_size(&self) -> usize {
        self.mixture_size
    }

    pub fn constraint_mode(&self) -> ConstraintMode {
        self.constraint_mode
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn component(&self, channel: usize, q: usize) -> &SpectralComponent {
        &self.components[channel * self.mixture_size + q]
    }

    pub fn components(&self) -> &[SpectralComponent] {
        &self.components
    }

    pub(crate) fn component_mut(&mut self, channel: usize, q: usize) -> &mut SpectralComponent {
        &mut self.components[channel * self.mixture_size + q]
    }

    pub(crate) fn noise_var_mut(&mut self) -> &mut [f64] {
        &mut self.noise_var
    }

    fn check_channel(&self, i: usize) -> Result<()> {
        if i >= self.channels {
            return Err(Error::ChannelOutOfRange {
                index: i,
                channels: self.channels,
            });
        }
        Ok(())
    }

    /// Whether cross-covariances between distinct channels are masked out.
    #[inline]
    pub(crate) fn cross_masked(&self, i: usize, j: usize) -> bool {
        self.constraint_mode == ConstraintMode::Igp && i != j
    }

    /// Covariance between channel `i` at `x` and channel `j` at `x'`, as a
    /// function of the lag `tau = x - x'`. Sum over mixture components of
    /// SE-times-cosine terms with pair-derived parameters.
    pub fn value(&self, i: usize, j: usize, tau: &[f64]) -> Result<f64> {
        self.check_channel(i)?;
        self.check_channel(j)?;
        if tau.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "kernel lag",
                expected: self.input_dim,
                got: tau.len(),
            });
        }
        if self.cross_masked(i, j) {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for q in 0..self.mixture_size {
            let p = cross_params(self.component(i, q), self.component(j, q))?;
            acc += p.kernel_value(tau);
        }
        Ok(acc)
    }

    /// Symmetrized cross-spectral density between channels `i` and `j`.
    pub fn cross_density(&self, i: usize, j: usize, omega: &[f64]) -> Result<Complex64> {
        self.check_channel(i)?;
        self.check_channel(j)?;
        if omega.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "density frequency",
                expected: self.input_dim,
                got: omega.len(),
            });
        }
        if self.cross_masked(i, j) {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for q in 0..self.mixture_size {
            let p = cross_params(self.component(i, q), self.component(j, q))?;
            acc += p.density_value(omega);
        }
        Ok(acc)
    }

    /// The m x m Hermitian spectral matrix at frequency `omega`.
    pub fn spectral_matrix(&self, omega: &[f64]) -> Result<nalgebra::DMatrix<Complex64>> {
        let m = self.channels;
        let mut s = nalgebra::DMatrix::<Complex64>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = self.cross_density(i, j, omega)?;
                s[(i, j)] = v;
                s[(j, i)] = v.conj();
            }
        }
        Ok(s)
    }

    /// Project onto a constrained family. Means, scales and delays are tied
    /// to channel 0's values per mixture component for CSM and SM-LMC, which
    /// additionally zeroes every phase. Channel-specific weights (and noise)
    /// are always retained. Projecting an already constrained kernel is a
    /// numerical no-op.
    pub fn project(&self, mode: ConstraintMode) -> MosmKernel {
        let mut out = self.clone();
        match mode {
            ConstraintMode::Mosm | ConstraintMode::Igp => {}
            ConstraintMode::Csm | ConstraintMode::SmLmc => {
                for q in 0..self.mixture_size {
                    let base = self.component(0, q).clone();
                    for i in 1..self.channels {
                        let c = out.component_mut(i, q);
                        c.mean = base.mean.clone();
                        c.scales = base.scales.clone();
                        c.delay = base.delay.clone();
                    }
                }
                if mode == ConstraintMode::SmLmc {
                    for c in &mut out.components {
                        c.phase = 0.0;
                    }
                }
            }
        }
        out.constraint_mode = mode;
        out
    }

    /// Precomputed pair parameters, indexed `(i * m + j) * Q + q`.
    pub(crate) fn pair_table(&self) -> Vec<CrossParams> {
        let m = self.channels;
        let q_count = self.mixture_size;
        let mut table = Vec::with_capacity(m * m * q_count);
        for i in 0..m {
            for j in 0..m {
                for q in 0..q_count {
                    // unwrap: components were validated at construction
                    table.push(cross_params(self.component(i, q), self.component(j, q)).unwrap());
                }
            }
        }
        table
    }
}

/// Single-output spectral mixture kernel on scalar inputs:
/// `sum_q w_q exp(-1/2 tau^2 s_q) cos(mu_q tau)`.
pub fn sm_kernel(weights: &[f64], means: &[f64], scales: &[f64], tau: f64) -> Result<f64> {
    if weights.len() != means.len() || weights.len() != scales.len() {
        return Err(Error::DimensionMismatch {
            context: "sm_kernel parameters",
            expected: weights.len(),
            got: means.len().max(scales.len()),
        });
    }
    let mut acc = 0.0;
    for q in 0..weights.len() {
        if !(scales[q] > 0.0) {
            return Err(Error::InvalidParameter {
                name: "scales",
                reason: format!("entries must be positive, got {}", scales[q]),
            });
        }
        acc += weights[q] * clamped_exp(-0.5 * scales[q] * tau * tau) * (means[q] * tau).cos();
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_component(rng: &mut StdRng, n: usize) -> SpectralComponent {
        SpectralComponent::new(
            rng.random_range(-2.0..2.0),
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            (0..n).map(|_| rng.random_range(0.25..4.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rng.random_range(-PI..PI),
        )
        .unwrap()
    }

    pub(crate) fn random_kernel(rng: &mut StdRng, m: usize, n: usize, q: usize) -> MosmKernel {
        let components = (0..m * q).map(|_| random_component(rng, n)).collect();
        let noise = (0..m).map(|_| rng.random_range(0.01..0.5)).collect();
        MosmKernel::new(m, n, q, components, noise, ConstraintMode::Mosm).unwrap()
    }

    #[test]
    fn cross_params_identical_pair_is_degenerate() {
        let a = SpectralComponent::new_1d(2.0, 3.0, 1.0, 0.5, 0.7).unwrap();
        let p = cross_params(&a, &a).unwrap();
        assert_eq!(p.weight, 4.0);
        assert_eq!(p.mean, vec![3.0]);
        assert_eq!(p.cov_diag, vec![1.0]);
        assert_eq!(p.delay, vec![0.0]);
        assert_eq!(p.phase, 0.0);
        assert_eq!(p.magnitude, 4.0 * (2.0 * PI).sqrt());
    }

    #[test]
    fn cross_params_equal_scales() {
        for s in [0.1, 1.0, 7.5] {
            let a = SpectralComponent::new_1d(1.0, 0.0, s, 0.0, 0.0).unwrap();
            let b = SpectralComponent::new_1d(1.0, 0.0, s, 1.0, 0.0).unwrap();
            let p = cross_params(&a, &b).unwrap();
            assert_relative_eq!(p.cov_diag[0], s, max_relative = 1e-15);
            assert_relative_eq!(p.weight, 1.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn cross_params_separated_means() {
        let a = SpectralComponent::new_1d(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let b = SpectralComponent::new_1d(1.0, 2.0, 1.0, 0.0, 0.0).unwrap();
        let p = cross_params(&a, &b).unwrap();
        // w_ab = exp(-1/4 * (0-2)^2 / (1+1)) = exp(-1/2)
        assert_relative_eq!(p.weight, (-0.5f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(p.mean[0], 1.0, max_relative = 1e-14);

        // peak of the unsymmetrized factor product sits at mu_ab with height w_ab
        let prod = |w: f64| -> f64 {
            let ra = (-0.25 * (w - 0.0) * (w - 0.0)).exp();
            let rb = (-0.25 * (w - 2.0) * (w - 2.0)).exp();
            ra * rb
        };
        assert_relative_eq!(prod(p.mean[0]), p.weight, max_relative = 1e-12);
        assert!(prod(p.mean[0] + 0.3) < p.weight);
        assert!(prod(p.mean[0] - 0.3) < p.weight);
    }

    #[test]
    fn cross_params_rejects_bad_scale() {
        let a = SpectralComponent {
            weight: 1.0,
            mean: vec![0.0],
            scales: vec![0.0],
            delay: vec![0.0],
            phase: 0.0,
        };
        let b = SpectralComponent::new_1d(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert!(cross_params(&a, &b).is_err());
    }

    #[test]
    fn auto_value_at_zero_is_alpha() {
        let mut rng = StdRng::seed_from_u64(7);
        let k = random_kernel(&mut rng, 2, 1, 1);
        let c = k.component(1, 0);
        let alpha = c.weight * c.weight * (2.0 * PI).sqrt() * c.scales[0].sqrt();
        assert_relative_eq!(k.value(1, 1, &[0.0]).unwrap(), alpha, max_relative = 1e-14);
    }

    #[test]
    fn kernel_symmetry_under_channel_swap() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..50 {
            let k = random_kernel(&mut rng, 3, 2, 2);
            let tau: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let neg: Vec<f64> = tau.iter().map(|v| -v).collect();
            let (i, j) = (rng.random_range(0..3), rng.random_range(0..3));
            assert_relative_eq!(
                k.value(i, j, &tau).unwrap(),
                k.value(j, i, &neg).unwrap(),
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn channel_bounds_are_checked() {
        let mut rng = StdRng::seed_from_u64(1);
        let k = random_kernel(&mut rng, 2, 1, 1);
        assert!(matches!(
            k.value(2, 0, &[0.0]),
            Err(Error::ChannelOutOfRange { .. })
        ));
        assert!(k.cross_density(0, 5, &[0.0]).is_err());
    }

    /// Trapezoidal inverse transform of the symmetrized density.
    fn quadrature_kernel(k: &MosmKernel, i: usize, j: usize, tau: f64) -> f64 {
        let mut hi: f64 = 0.0;
        for q in 0..k.mixture_size() {
            let p = cross_params(k.component(i, q), k.component(j, q)).unwrap();
            hi = hi.max(p.mean[0].abs() + 8.0 * p.cov_diag[0].sqrt());
        }
        let n = 8192;
        let step = 2.0 * hi / n as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for t in 0..=n {
            let w = -hi + t as f64 * step;
            let v = k.cross_density(i, j, &[w]).unwrap() * Complex64::from_polar(1.0, w * tau);
            let scale = if t == 0 || t == n { 0.5 } else { 1.0 };
            acc += v * scale;
        }
        (acc * step).re
    }

    #[test]
    fn density_and_kernel_are_fourier_pairs() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..10 {
            let k = random_kernel(&mut rng, 2, 1, 1);
            let scale: f64 = (0..61)
                .map(|t| k.value(0, 1, &[-3.0 + 0.1 * t as f64]).unwrap().abs())
                .fold(0.0, f64::max);
            for t in 0..61 {
                let tau = -3.0 + 0.1 * t as f64;
                let direct = k.value(0, 1, &[tau]).unwrap();
                let quad = quadrature_kernel(&k, 0, 1, tau);
                assert!(
                    (direct - quad).abs() <= 1e-4 * scale,
                    "tau={tau}: direct={direct}, quadrature={quad}"
                );
            }
        }
    }

    #[test]
    fn auto_density_is_real() {
        let mut rng = StdRng::seed_from_u64(3);
        let k = random_kernel(&mut rng, 3, 2, 2);
        for _ in 0..20 {
            let w: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d = k.cross_density(1, 1, &w).unwrap();
            assert!(d.im.abs() < 1e-15);
            assert!(d.re >= 0.0);
        }
    }

    #[test]
    fn cross_density_is_hermitian() {
        let mut rng = StdRng::seed_from_u64(5);
        let k = random_kernel(&mut rng, 3, 1, 2);
        for _ in 0..20 {
            let w = [rng.random_range(-5.0..5.0)];
            let a = k.cross_density(0, 2, &w).unwrap();
            let b = k.cross_density(2, 0, &w).unwrap();
            assert_relative_eq!(a.re, b.re, epsilon = 1e-15, max_relative = 1e-12);
            assert_relative_eq!(a.im, -b.im, epsilon = 1e-15, max_relative = 1e-12);
        }
    }

    #[test]
    fn cross_density_peak_value() {
        // zero-delay zero-phase pair: both symmetrization conventions coincide
        // and the value at mu_ab has the closed form below.
        let a = SpectralComponent::new_1d(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let b = SpectralComponent::new_1d(1.0, 2.0, 1.0, 0.0, 0.0).unwrap();
        let p = cross_params(&a, &b).unwrap();
        let k = MosmKernel::new(2, 1, 1, vec![a, b], vec![0.0; 2], ConstraintMode::Mosm).unwrap();
        let d = k.cross_density(0, 1, &[p.mean[0]]).unwrap();
        let expect = 0.5 * p.weight * (1.0 + (-2.0 * p.mean[0] * p.mean[0] / p.cov_diag[0]).exp());
        assert_relative_eq!(d.re, expect, max_relative = 1e-12);
        assert!(d.im.abs() < 1e-15);

        // cross-check against a discrete transform of the sampled kernel:
        // S(w) = 1/(2pi) * integral exp(-i w tau) k(tau) dtau
        let (lo, hi, n) = (-60.0, 60.0, 48_000);
        let step = (hi - lo) / n as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for t in 0..=n {
            let tau = lo + t as f64 * step;
            let v = k.value(0, 1, &[tau]).unwrap();
            let scale = if t == 0 || t == n { 0.5 } else { 1.0 };
            acc += Complex64::from_polar(v * scale, -p.mean[0] * tau);
        }
        acc = acc * step / (2.0 * PI);
        assert_relative_eq!(acc.re, d.re, max_relative = 1e-6);
        assert!(acc.im.abs() < 1e-10);
    }

    #[test]
    fn spectral_matrix_single_channel_is_sm_density() {
        let mut rng = StdRng::seed_from_u64(11);
        let k = random_kernel(&mut rng, 1, 1, 3);
        for _ in 0..10 {
            let w = [rng.random_range(-6.0..6.0)];
            let s = k.spectral_matrix(&w).unwrap();
            assert_eq!(s.nrows(), 1);
            assert!(s[(0, 0)].im.abs() < 1e-15);
            assert!(s[(0, 0)].re >= 0.0);
        }
    }

    #[test]
    fn spectral_matrix_is_psd() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..100 {
            let k = random_kernel(&mut rng, 3, 1, 1);
            let w = [rng.random_range(-6.0..6.0)];
            let s = k.spectral_matrix(&w).unwrap();
            let eig = s.symmetric_eigenvalues();
            for &ev in eig.iter() {
                assert!(ev >= -1e-10, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn spectral_matrix_identical_channels_is_rank_one() {
        let c = SpectralComponent::new_1d(1.3, 2.0, 0.8, 0.4, 0.2).unwrap();
        let k = MosmKernel::new(
            2,
            1,
            1,
            vec![c.clone(), c],
            vec![0.0; 2],
            ConstraintMode::Mosm,
        )
        .unwrap();
        let w = [1.5];
        let s = k.spectral_matrix(&w).unwrap();
        let s11 = s[(0, 0)].re;
        let mut eig: Vec<f64> = s.symmetric_eigenvalues().iter().cloned().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(eig[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(eig[1], 2.0 * s11, max_relative = 1e-10);
    }

    #[test]
    fn sm_kernel_basics() {
        assert_relative_eq!(
            sm_kernel(&[1.0, 0.5], &[0.3, 2.0], &[1.0, 1.0], 0.0).unwrap(),
            1.5
        );
        // single zero-frequency component: pure SE, monotone in |tau|
        let mut prev = f64::INFINITY;
        for t in 0..20 {
            let v = sm_kernel(&[1.0], &[0.0], &[0.5], 0.2 * t as f64).unwrap();
            assert!(v < prev || t == 0);
            prev = v;
        }
        assert_relative_eq!(
            sm_kernel(&[1.0], &[PI], &[1.0], 1.0).unwrap(),
            (-0.5f64).exp() * PI.cos(),
            max_relative = 1e-14
        );
        assert!(sm_kernel(&[1.0], &[0.0], &[-1.0], 0.0).is_err());
    }

    #[test]
    fn sm_kernel_matches_bochner_quadrature() {
        // quadrature of the symmetrized SE mixture density reproduces the kernel
        let (w, mu, s2) = (0.8f64, 2.5f64, 0.6f64);
        let sd = s2.sqrt();
        let hi = mu + 10.0 * sd;
        let n = 16384;
        let step = 2.0 * hi / n as f64;
        for tau in [-2.0, -0.3, 0.0, 0.7, 1.9] {
            let mut acc = 0.0;
            for t in 0..=n {
                let omega: f64 = -hi + t as f64 * step;
                let dp = omega - mu;
                let dn = omega + mu;
                let dens = 0.5 * w / ((2.0 * PI * s2).sqrt())
                    * ((-0.5 * dp * dp / s2).exp() + (-0.5 * dn * dn / s2).exp());
                let scale = if t == 0 || t == n { 0.5 } else { 1.0 };
                acc += dens * (omega * tau).cos() * scale;
            }
            acc *= step;
            let direct = sm_kernel(&[w], &[mu], &[s2], tau).unwrap();
            assert_relative_eq!(acc, direct, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn single_channel_reduces_to_sm() {
        // m = 1 MOSM equals the scalar SM kernel with weights
        // w_q <- w_q^2 * (2 pi)^(1/2) * sqrt(scale_q)
        let mut rng = StdRng::seed_from_u64(23);
        let k = random_kernel(&mut rng, 1, 1, 3);
        let weights: Vec<f64> = (0..3)
            .map(|q| {
                let c = k.component(0, q);
                c.weight * c.weight * (2.0 * PI).sqrt() * c.scales[0].sqrt()
            })
            .collect();
        let means: Vec<f64> = (0..3).map(|q| k.component(0, q).mean[0]).collect();
        let scales: Vec<f64> = (0..3).map(|q| k.component(0, q).scales[0]).collect();
        for t in -10..=10 {
            let tau = 0.37 * t as f64;
            assert_relative_eq!(
                k.value(0, 0, &[tau]).unwrap(),
                sm_kernel(&weights, &means, &scales, tau).unwrap(),
                epsilon = 1e-14,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn projection_ties_and_idempotence() {
        let mut rng = StdRng::seed_from_u64(31);
        let k = random_kernel(&mut rng, 3, 1, 2);
        let csm = k.project(ConstraintMode::Csm);
        for q in 0..2 {
            for i in 1..3 {
                assert_eq!(csm.component(i, q).mean, csm.component(0, q).mean);
                assert_eq!(csm.component(i, q).scales, csm.component(0, q).scales);
                assert_eq!(csm.component(i, q).delay, csm.component(0, q).delay);
            }
        }
        // idempotent: projecting again changes nothing
        assert_eq!(csm, csm.project(ConstraintMode::Csm));

        // CSM cross terms have zero delay but can keep a phase
        for q in 0..2 {
            let p = cross_params(csm.component(0, q), csm.component(1, q)).unwrap();
            assert_eq!(p.delay, vec![0.0]);
        }
        let has_phase = (0..2).any(|q| {
            cross_params(csm.component(0, q), csm.component(1, q))
                .unwrap()
                .phase
                != 0.0
        });
        assert!(has_phase);

        // SM-LMC cross-covariances are symmetric about tau = 0
        let lmc = k.project(ConstraintMode::SmLmc);
        for t in 0..40 {
            let tau = -2.0 + 0.1 * t as f64;
            let a = lmc.value(0, 2, &[tau]).unwrap();
            let b = lmc.value(0, 2, &[-tau]).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-15, max_relative = 1e-14);
        }
    }

    #[test]
    fn igp_masks_cross_terms() {
        let mut rng = StdRng::seed_from_u64(37);
        let k = random_kernel(&mut rng, 2, 1, 2).project(ConstraintMode::Igp);
        assert_eq!(k.value(0, 1, &[0.3]).unwrap(), 0.0);
        assert_eq!(
            k.cross_density(1, 0, &[0.5]).unwrap(),
            Complex64::new(0.0, 0.0)
        );
        assert!(k.value(0, 0, &[0.3]).unwrap().abs() > 0.0);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = StdRng::seed_from_u64(41);
        let k = random_kernel(&mut rng, 2, 2, 2);
        let text = serde_json::to_string(&k).unwrap();
        let back: MosmKernel = serde_json::from_str(&text).unwrap();
        assert_eq!(k, back);
    }

    #[test]
    fn deserialization_validates() {
        let mut rng = StdRng::seed_from_u64(43);
        let k = random_kernel(&mut rng, 2, 1, 1);
        let mut v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&k).unwrap()).unwrap();
        v["components"][0][0]["scales"][0] = serde_json::json!(-1.0);
        assert!(serde_json::from_value::<MosmKernel>(v).is_err());
    }
}
