//! Exact multi-channel GP inference: Gram assembly, stable factorization,
//! marginal likelihood and the predictive posterior.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{CrossParams, MosmKernel};

/// Observations as parallel columns: location, channel id (0-based), value.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    locations: Vec<f64>,
    channels: Vec<usize>,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        locations: Vec<f64>,
        channels: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidData("input_dim must be positive".into()));
        }
        if locations.len() != channels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                context: "dataset locations",
                expected: channels.len() * input_dim,
                got: locations.len(),
            });
        }
        if values.len() != channels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset values",
                expected: channels.len(),
                got: values.len(),
            });
        }
        if locations.iter().any(|v| !v.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(
                "locations and values must be finite".into(),
            ));
        }
        Ok(Self {
            input_dim,
            locations,
            channels,
            values,
        })
    }

    /// Scalar-input convenience constructor from (x, channel, y) triples.
    pub fn from_triples(rows: &[(f64, usize, f64)]) -> Result<Self> {
        Self::new(
            1,
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn location(&self, row: usize) -> &[f64] {
        &self.locations[row * self.input_dim..(row + 1) * self.input_dim]
    }

    pub fn channel(&self, row: usize) -> usize {
        self.channels[row]
    }

    pub fn value(&self, row: usize) -> f64 {
        self.values[row]
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Number of channels implied by the largest id present.
    pub fn channel_count(&self) -> usize {
        self.channels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Rows with the given channel id, in dataset order.
    pub fn rows_of_channel(&self, channel: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&r| self.channels[r] == channel)
            .collect()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut locations = Vec::with_capacity(rows.len() * self.input_dim);
        let mut channels = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        for &r in rows {
            locations.extend_from_slice(self.location(r));
            channels.push(self.channels[r]);
            values.push(self.values[r]);
        }
        Dataset {
            input_dim: self.input_dim,
            locations,
            channels,
            values,
        }
    }
}

fn pair_value(table: &[CrossParams], q_count: usize, m: usize, i: usize, j: usize, tau: &[f64]) -> f64 {
    let base = (i * m + j) * q_count;
    let mut acc = 0.0;
    for p in &table[base..base + q_count] {
        acc += p.kernel_value(tau);
    }
    acc
}

/// Covariance matrix of all observed samples: entry (r, s) is
/// `k_{i_r i_s}(x_r - x_s)` plus the channel noise variance on the diagonal.
pub fn gram(kernel: &MosmKernel, data: &Dataset) -> Result<DMatrix<f64>> {
    if data.input_dim() != kernel.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "gram input dim",
            expected: kernel.input_dim(),
            got: data.input_dim(),
        });
    }
    let m = kernel.channels();
    if let Some(&bad) = data.channels().iter().find(|&&c| c >= m) {
        return Err(Error::ChannelOutOfRange {
            index: bad,
            channels: m,
        });
    }
    let n = data.len();
    let dim = data.input_dim();
    let table = kernel.pair_table();
    let q_count = kernel.mixture_size();
    let igp = matches!(
        kernel.constraint_mode(),
        crate::kernel::ConstraintMode::Igp
    );

    // upper triangle by row, rows in parallel; mirrored serially below
    let mut buf = vec![0.0f64; n * n];
    buf.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        let xr = data.location(r);
        let ir = data.channel(r);
        let mut tau = vec![0.0f64; dim];
        for s in r..n {
            let is = data.channel(s);
            if igp && ir != is {
                continue;
            }
            let xs = data.location(s);
            for d in 0..dim {
                tau[d] = xr[d] - xs[d];
            }
            row[s] = pair_value(&table, q_count, m, ir, is, &tau);
        }
        row[r] += kernel.noise_var()[ir];
    });
    for r in 0..n {
        for s in 0..r {
            buf[r * n + s] = buf[s * n + r];
        }
    }
    // symmetric, so row-major content equals column-major
    Ok(DMatrix::from_vec(n, n, buf))
}

/// Relative jitter escalation schedule (multiples of the mean diagonal).
const JITTER_LEVELS: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// A Cholesky factor of `A + jitter * I`, with the jitter that was needed.
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Absolute diagonal inflation that made the factorization succeed.
    pub jitter: f64,
    /// Same, as a multiple of the mean diagonal.
    pub jitter_relative: f64,
}

/// Factor a symmetric matrix, escalating diagonal jitter until the
/// factorization succeeds. Fails with [`Error::IllConditioned`] if even the
/// largest level does not.
pub fn cholesky_jitter(a: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = a.nrows();
    let scale = a.diagonal().sum() / n as f64;
    for &level in &JITTER_LEVELS {
        let eps = level * scale;
        let mut work = a.clone();
        if eps != 0.0 {
            for k in 0..n {
                work[(k, k)] += eps;
            }
        }
        if let Some(factor) = Cholesky::new(work) {
            return Ok(JitteredCholesky {
                factor,
                jitter: eps,
                jitter_relative: level,
            });
        }
    }
    Err(Error::IllConditioned {
        max_jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1] * scale,
    })
}

/// `K^-1` from the Cholesky factor, column solves in parallel.
pub(crate) fn chol_inverse_parallel(chol: &JitteredCholesky) -> DMatrix<f64> {
    let l = chol.factor.l_dirty();
    let n = l.nrows();
    // rows of L as columns, for contiguous reads in the forward pass
    let lt = l.transpose();
    let mut buf = vec![0.0f64; n * n];
    buf.par_chunks_mut(n).enumerate().for_each(|(k, col)| {
        // forward solve L y = e_k; y vanishes above k
        let mut y = vec![0.0f64; n];
        y[k] = 1.0 / l[(k, k)];
        for i in k + 1..n {
            let row_i = lt.column(i);
            let mut s = 0.0;
            for j in k..i {
                s += row_i[j] * y[j];
            }
            y[i] = -s / l[(i, i)];
        }
        // backward solve L' x = y; reads columns of L contiguously
        for i in (0..n).rev() {
            let col_i = l.column(i);
            let mut s = 0.0;
            for j in i + 1..n {
                s += col_i[j] * col[j];
            }
            col[i] = (y[i] - s) / l[(i, i)];
        }
    });
    DMatrix::from_vec(n, n, buf)
}

/// Negative log marginal likelihood through an existing factor:
/// `N/2 log 2pi + sum_k log L_kk + 1/2 y' K^-1 y`.
pub fn nll_from_cholesky(chol: &JitteredCholesky, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol
        .factor
        .l_dirty()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum();
    let alpha = chol.factor.solve(y);
    0.5 * n * (2.0 * std::f64::consts::PI).ln() + log_det_half + 0.5 * y.dot(&alpha)
}

/// Query points for the posterior: locations (flat, row-major) and channels.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub input_dim: usize,
    pub locations: Vec<f64>,
    pub channels: Vec<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn location(&self, row: usize) -> &[f64] {
        &self.locations[row * self.input_dim..(row + 1) * self.input_dim]
    }
}

/// A kernel bound to observations, with the factorization and dual weights
/// cached. Immutable after construction, so the caches always correspond to
/// the stored hyperparameters; build a new model to change them.
pub struct GpModel {
    kernel: MosmKernel,
    data: Dataset,
    chol: JitteredCholesky,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn new(kernel: MosmKernel, data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidData("dataset must be non-empty".into()));
        }
        let k = gram(&kernel, &data)?;
        let chol = cholesky_jitter(&k)?;
        let y = DVector::from_column_slice(data.values());
        let alpha = chol.factor.solve(&y);
        Ok(Self {
            kernel,
            data,
            chol,
            alpha,
        })
    }

    pub fn kernel(&self) -> &MosmKernel {
        &self.kernel
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Absolute jitter used when factorizing the Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }

    pub fn nll(&self) -> f64 {
        let y = DVector::from_column_slice(self.data.values());
        nll_from_cholesky(&self.chol, &y)
    }

    fn cross_gram(&self, query: &QuerySet) -> Result<DMatrix<f64>> {
        let n = self.data.len();
        let mq = query.len();
        let dim = self.data.input_dim();
        if query.input_dim != dim {
            return Err(Error::DimensionMismatch {
                context: "query input dim",
                expected: dim,
                got: query.input_dim,
            });
        }
        let m = self.kernel.channels();
        if let Some(&bad) = query.channels.iter().find(|&&c| c >= m) {
            return Err(Error::ChannelOutOfRange {
                index: bad,
                channels: m,
            });
        }
        let table = self.kernel.pair_table();
        let q_count = self.kernel.mixture_size();
        let mut buf = vec![0.0f64; mq * n];
        buf.par_chunks_mut(n).enumerate().for_each(|(c, col)| {
            let xq = query.location(c);
            let iq = query.channels[c];
            let mut tau = vec![0.0f64; dim];
            for (r, slot) in col.iter_mut().enumerate() {
                let ir = self.data.channel(r);
                if self.kernel.cross_masked(ir, iq) {
                    continue;
                }
                let xr = self.data.location(r);
                for d in 0..dim {
                    tau[d] = xr[d] - xq[d];
                }
                *slot = pair_value(&table, q_count, m, ir, iq, &tau);
            }
        });
        // chunks above are the columns of the N x M cross matrix
        Ok(DMatrix::from_vec(n, mq, buf))
    }

    /// Exact posterior mean and covariance at the query points.
    ///
    /// The covariance is over the latent function; set `include_noise` to add
    /// the channel observation noise to the diagonal for predictive intervals.
    pub fn posterior(
        &self,
        query: &QuerySet,
        include_noise: bool,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if query.is_empty() {
            return Err(Error::InvalidData("query must be non-empty".into()));
        }
        let k_star = self.cross_gram(query)?;
        let mean = k_star.transpose() * &self.alpha;

        let mq = query.len();
        let mut k_qq = DMatrix::<f64>::zeros(mq, mq);
        let dim = query.input_dim;
        let mut tau = vec![0.0f64; dim];
        for a in 0..mq {
            for b in a..mq {
                let xa = query.location(a);
                let xb = query.location(b);
                for d in 0..dim {
                    tau[d] = xa[d] - xb[d];
                }
                let v = self
                    .kernel
                    .value(query.channels[a], query.channels[b], &tau)?;
                k_qq[(a, b)] = v;
                k_qq[(b, a)] = v;
            }
            if include_noise {
                k_qq[(a, a)] += self.kernel.noise_var()[query.channels[a]];
            }
        }
        let w = self.chol.factor.solve(&k_star);
        let mut cov = k_qq - k_star.transpose() * w;
        // scrub floating-point asymmetry
        for a in 0..mq {
            for b in a + 1..mq {
                let v = 0.5 * (cov[(a, b)] + cov[(b, a)]);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        Ok((mean, cov))
    }

    /// Posterior mean and pointwise variance, without the full covariance.
    pub fn posterior_diag(
        &self,
        query: &QuerySet,
        include_noise: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if query.is_empty() {
            return Err(Error::InvalidData("query must be non-empty".into()));
        }
        let k_star = self.cross_gram(query)?;
        let mean = k_star.transpose() * &self.alpha;
        let w = self.chol.factor.solve(&k_star);
        let zero = vec![0.0; query.input_dim];
        let mut var = Vec::with_capacity(query.len());
        for c in 0..query.len() {
            let ch = query.channels[c];
            let mut prior = self.kernel.value(ch, ch, &zero)?;
            if include_noise {
                prior += self.kernel.noise_var()[ch];
            }
            let reduction = k_star.column(c).dot(&w.column(c));
            var.push((prior - reduction).max(0.0));
        }
        Ok((mean.iter().cloned().collect(), var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ConstraintMode, MosmKernel, SpectralComponent};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_kernel(rng: &mut StdRng, m: usize, q: usize, noise: f64) -> MosmKernel {
        let components = (0..m * q)
            .map(|_| {
                SpectralComponent::new_1d(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.25..4.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-3.0..3.0),
                )
                .unwrap()
            })
            .collect();
        MosmKernel::new(m, 1, q, components, vec![noise; m], ConstraintMode::Mosm).unwrap()
    }

    fn random_dataset(rng: &mut StdRng, n: usize, m: usize) -> Dataset {
        let rows: Vec<(f64, usize, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(-5.0..5.0),
                    rng.random_range(0..m),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        Dataset::from_triples(&rows).unwrap()
    }

    #[test]
    fn gram_single_row() {
        let mut rng = StdRng::seed_from_u64(2);
        let k = random_kernel(&mut rng, 2, 1, 0.3);
        let data = Dataset::from_triples(&[(1.5, 1, 0.2)]).unwrap();
        let g = gram(&k, &data).unwrap();
        assert_eq!(g.nrows(), 1);
        let expect = k.value(1, 1, &[0.0]).unwrap() + 0.3;
        assert_relative_eq!(g[(0, 0)], expect, max_relative = 1e-15);
    }

    #[test]
    fn gram_respects_row_permutation() {
        let mut rng = StdRng::seed_from_u64(3);
        let k = random_kernel(&mut rng, 3, 2, 0.1);
        let data = random_dataset(&mut rng, 12, 3);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            p
        };
        let shuffled = data.select(&perm);
        let g = gram(&k, &data).unwrap();
        let gs = gram(&k, &shuffled).unwrap();
        for a in 0..12 {
            for b in 0..12 {
                assert_eq!(gs[(a, b)], g[(perm[a], perm[b])]);
            }
        }
    }

    #[test]
    fn gram_is_psd_before_jitter() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let k = random_kernel(&mut rng, 3, 2, 0.0);
            let data = random_dataset(&mut rng, 50, 3);
            let g = gram(&k, &data).unwrap();
            let trace = g.trace();
            let min_eig = g
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(
                min_eig >= -1e-8 * trace,
                "min eigenvalue {min_eig} vs trace {trace}"
            );
        }
    }

    #[test]
    fn gram_translation_invariance() {
        let mut rng = StdRng::seed_from_u64(7);
        let k = random_kernel(&mut rng, 2, 2, 0.05);
        // dyadic locations keep the translated lags bit-exact
        let rows: Vec<(f64, usize, f64)> = (0..20)
            .map(|_| {
                (
                    rng.random_range(-16..16) as f64 * 0.25,
                    rng.random_range(0..2),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let data = Dataset::from_triples(&rows).unwrap();
        let moved = Dataset::from_triples(
            &rows
                .iter()
                .map(|&(x, c, y)| (x + 16.0, c, y))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(gram(&k, &data).unwrap(), gram(&k, &moved).unwrap());
    }

    #[test]
    fn jitter_identity_needs_none() {
        let a = DMatrix::<f64>::identity(5, 5);
        let j = cholesky_jitter(&a).unwrap();
        assert_eq!(j.jitter, 0.0);
        assert_relative_eq!(j.factor.l()[(0, 0)], 1.0);
    }

    #[test]
    fn jitter_handles_rank_one() {
        let v = DVector::from_vec(vec![1.0, 2.0, -0.5, 0.3]);
        let a = &v * v.transpose();
        let j = cholesky_jitter(&a).unwrap();
        assert!(j.jitter_relative <= 1e-8);
        let rebuilt = j.factor.l() * j.factor.l().transpose();
        for r in 0..4 {
            for c in 0..4 {
                assert_relative_eq!(rebuilt[(r, c)], a[(r, c)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn jitter_reconstructs_random_psd() {
        let mut rng = StdRng::seed_from_u64(11);
        let b = DMatrix::<f64>::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(8, 8);
        let j = cholesky_jitter(&a).unwrap();
        let rebuilt = j.factor.l() * j.factor.l().transpose();
        for r in 0..8 {
            for c in 0..8 {
                assert_relative_eq!(rebuilt[(r, c)], a[(r, c)], max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn parallel_inverse_matches_dense() {
        let mut rng = StdRng::seed_from_u64(45);
        for n in [1usize, 3, 17, 40] {
            let b = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::identity(n, n) * 2.0;
            let chol = cholesky_jitter(&a).unwrap();
            let fast = chol_inverse_parallel(&chol);
            let slow = a.clone().try_inverse().unwrap();
            for r in 0..n {
                for c in 0..n {
                    assert_relative_eq!(fast[(r, c)], slow[(r, c)], epsilon = 1e-10, max_relative = 1e-8);
                }
            }
        }
    }

    #[test]
    fn jitter_gives_up_on_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky_jitter(&a),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn nll_scalar_cases() {
        let chol = cholesky_jitter(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        let y = DVector::from_vec(vec![0.0]);
        assert_relative_eq!(
            nll_from_cholesky(&chol, &y),
            0.5 * (2.0 * std::f64::consts::PI).ln(),
            max_relative = 1e-14
        );

        let (s2, a) = (0.7, 1.3);
        let chol = cholesky_jitter(&DMatrix::from_element(1, 1, s2)).unwrap();
        let y = DVector::from_vec(vec![a]);
        let expect =
            0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * s2.ln() + a * a / (2.0 * s2);
        assert_relative_eq!(nll_from_cholesky(&chol, &y), expect, max_relative = 1e-14);
    }

    #[test]
    fn nll_matches_dense_inverse() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(2..=20);
            let b = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let k = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
            let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let chol = cholesky_jitter(&k).unwrap();
            let fast = nll_from_cholesky(&chol, &y);
            let inv = k.clone().try_inverse().unwrap();
            let slow = 0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
                + 0.5 * k.determinant().ln()
                + 0.5 * y.dot(&(&inv * &y));
            assert_relative_eq!(fast, slow, max_relative = 1e-9);
        }
    }

    #[test]
    fn posterior_interpolates_with_tiny_noise() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut k = random_kernel(&mut rng, 2, 2, 0.0);
        k.noise_var_mut().copy_from_slice(&[1e-10, 1e-10]);
        let data = random_dataset(&mut rng, 8, 2);
        let model = GpModel::new(k, data.clone()).unwrap();
        let query = QuerySet {
            input_dim: 1,
            locations: (0..data.len()).map(|r| data.location(r)[0]).collect(),
            channels: data.channels().to_vec(),
        };
        let (mean, cov) = model.posterior(&query, false).unwrap();
        for r in 0..data.len() {
            assert_relative_eq!(mean[r], data.value(r), epsilon = 1e-4);
            assert!(cov[(r, r)].abs() < 1e-4);
        }
    }

    #[test]
    fn posterior_of_uncoupled_channel_is_prior() {
        // two components: channel 0 lives on component 0 only, channel 1 on
        // component 1 only, so the cross weight w_0 * w_1 vanishes per q.
        let c = |w: f64, mu: f64| SpectralComponent::new_1d(w, mu, 1.0, 0.0, 0.0).unwrap();
        let k = MosmKernel::new(
            2,
            1,
            2,
            vec![c(1.0, 1.0), c(0.0, 2.0), c(0.0, 1.0), c(0.8, 2.0)],
            vec![0.01, 0.01],
            ConstraintMode::Mosm,
        )
        .unwrap();
        let data = Dataset::from_triples(&[(0.0, 0, 1.0), (1.0, 0, -0.5), (2.0, 0, 0.3)]).unwrap();
        let prior = k.value(1, 1, &[0.0]).unwrap();
        let model = GpModel::new(k, data).unwrap();
        let query = QuerySet {
            input_dim: 1,
            locations: vec![0.5],
            channels: vec![1],
        };
        let (mean, cov) = model.posterior(&query, false).unwrap();
        assert_relative_eq!(mean[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 0)], prior, max_relative = 1e-10);
    }

    #[test]
    fn posterior_matches_direct_conditional() {
        let mut rng = StdRng::seed_from_u64(19);
        let k = random_kernel(&mut rng, 2, 1, 0.2);
        let data = random_dataset(&mut rng, 4, 2);
        let model = GpModel::new(k.clone(), data.clone()).unwrap();
        let query = QuerySet {
            input_dim: 1,
            locations: vec![0.3, -1.2],
            channels: vec![0, 1],
        };
        let (mean, cov) = model.posterior(&query, false).unwrap();

        let big = gram(&k, &data).unwrap();
        let inv = big.try_inverse().unwrap();
        let mut ks = DMatrix::<f64>::zeros(4, 2);
        for r in 0..4 {
            for c in 0..2 {
                let tau = data.location(r)[0] - query.location(c)[0];
                ks[(r, c)] = k
                    .value(data.channel(r), query.channels[c], &[tau])
                    .unwrap();
            }
        }
        let mut kq = DMatrix::<f64>::zeros(2, 2);
        for a in 0..2 {
            for b in 0..2 {
                let tau = query.location(a)[0] - query.location(b)[0];
                kq[(a, b)] = k
                    .value(query.channels[a], query.channels[b], &[tau])
                    .unwrap();
            }
        }
        let y = DVector::from_column_slice(data.values());
        let mean_direct = ks.transpose() * &inv * y;
        let cov_direct = kq - ks.transpose() * inv * ks;
        for c in 0..2 {
            assert_relative_eq!(mean[c], mean_direct[c], epsilon = 1e-9);
            for b in 0..2 {
                assert_relative_eq!(cov[(c, b)], cov_direct[(c, b)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn posterior_diag_matches_full() {
        let mut rng = StdRng::seed_from_u64(23);
        let k = random_kernel(&mut rng, 2, 2, 0.1);
        let data = random_dataset(&mut rng, 10, 2);
        let model = GpModel::new(k, data).unwrap();
        let query = QuerySet {
            input_dim: 1,
            locations: vec![-2.0, 0.1, 3.3],
            channels: vec![0, 1, 0],
        };
        for include_noise in [false, true] {
            let (mean, cov) = model.posterior(&query, include_noise).unwrap();
            let (mean_d, var_d) = model.posterior_diag(&query, include_noise).unwrap();
            for c in 0..3 {
                assert_relative_eq!(mean[c], mean_d[c], epsilon = 1e-12);
                assert_relative_eq!(cov[(c, c)], var_d[c], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn posterior_covariance_is_psd() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..5 {
            let k = random_kernel(&mut rng, 2, 2, 0.1);
            let data = random_dataset(&mut rng, 15, 2);
            let model = GpModel::new(k, data).unwrap();
            let query = QuerySet {
                input_dim: 1,
                locations: (0..6).map(|_| rng.random_range(-6.0..6.0)).collect(),
                channels: (0..6).map(|_| rng.random_range(0..2)).collect(),
            };
            let (_, cov) = model.posterior(&query, false).unwrap();
            let min_eig = cov
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig >= -1e-9 * (1.0 + cov.trace().abs()));
        }
    }

    #[test]
    fn conditioning_never_inflates_variance() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..5 {
            let k = random_kernel(&mut rng, 2, 1, 0.2);
            let data = random_dataset(&mut rng, 9, 2);
            let smaller = data.select(&(0..8).collect::<Vec<_>>());
            let query = QuerySet {
                input_dim: 1,
                locations: vec![rng.random_range(-5.0..5.0)],
                channels: vec![rng.random_range(0..2)],
            };
            let full = GpModel::new(k.clone(), data).unwrap();
            let part = GpModel::new(k, smaller).unwrap();
            let (_, v_full) = full.posterior_diag(&query, false).unwrap();
            let (_, v_part) = part.posterior_diag(&query, false).unwrap();
            assert!(v_full[0] <= v_part[0] + 1e-9);
        }
    }
}
