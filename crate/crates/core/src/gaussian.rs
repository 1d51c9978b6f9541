//! Multivariate Gaussians: empirical fitting, seeded sampling, and divergences.
//!
//! Every covariance is symmetrized and regularized with a diagonal jitter at
//! construction, so densities and KL terms are always defined. All divergences
//! are in nats.

use std::cmp::Ordering;
use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal regularization added to every covariance.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Per-side sample count used by the Monte-Carlo JSD estimator unless configured.
pub const DEFAULT_JSD_SAMPLES: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("need at least {need} samples to fit a Gaussian, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// How the Jensen-Shannon divergence between two Gaussians is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum JsdMethod {
    /// Unbiased sample estimate of the defining integral.
    MonteCarlo { sample_count: usize, seed: u64 },
    /// Replace the mixture by a single Gaussian with the mixture's exact first
    /// two moments, then average the closed-form KLs to it.
    MomentMatched,
}

#[derive(Debug, Clone)]
pub struct MultivariateGaussian {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Lower Cholesky factor, row-major `n*n`.
    chol: Vec<f64>,
    log_det: f64,
}

impl PartialEq for MultivariateGaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

impl MultivariateGaussian {
    /// Builds a Gaussian with the default jitter added to the covariance diagonal.
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self, GaussianError> {
        let n = mean.len();
        if covariance.len() != n {
            return Err(GaussianError::DimensionMismatch { left: n, right: covariance.len() });
        }
        let mut flat = Vec::with_capacity(n * n);
        for row in &covariance {
            if row.len() != n {
                return Err(GaussianError::DimensionMismatch { left: n, right: row.len() });
            }
            flat.extend_from_slice(row);
        }
        Self::from_parts(DVector::from_vec(mean), DMatrix::from_row_slice(n, n, &flat), DEFAULT_JITTER)
    }

    /// Diagonal Gaussian from per-dimension standard deviations.
    pub fn diagonal(mean: &[f64], std: &[f64]) -> Result<Self, GaussianError> {
        if mean.len() != std.len() {
            return Err(GaussianError::DimensionMismatch { left: mean.len(), right: std.len() });
        }
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(GaussianError::InvalidInput(format!("standard deviation must be positive, got {s}")));
        }
        let var: Vec<f64> = std.iter().map(|s| s * s).collect();
        Self::from_parts(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_vec(var)),
            DEFAULT_JITTER,
        )
    }

    /// Isotropic `N(0, std^2 I)`, the reference distribution of the deterministic correction.
    pub fn isotropic(dim: usize, std: f64) -> Result<Self, GaussianError> {
        Self::diagonal(&vec![0.0; dim], &vec![std; dim])
    }

    /// Symmetrizes `covariance`, adds `jitter` to its diagonal and factors it.
    pub fn from_parts(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self, GaussianError> {
        let n = mean.len();
        if n == 0 {
            return Err(GaussianError::InvalidInput("zero-dimensional Gaussian".into()));
        }
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(GaussianError::DimensionMismatch { left: n, right: covariance.nrows() });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(GaussianError::InvalidInput("non-finite Gaussian parameter".into()));
        }
        let mut cov = (&covariance + covariance.transpose()) * 0.5;
        for i in 0..n {
            cov[(i, i)] += jitter;
        }
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| GaussianError::Numeric("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(GaussianError::Numeric("covariance determinant underflow".into()));
        }
        let mut flat = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                flat[i * n + j] = l[(i, j)];
            }
        }
        Ok(Self { mean, covariance: cov, chol: flat, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn chol_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.chol)
    }

    /// Solves `L z = x - mean` into `scratch` and returns `z^T z`.
    fn mahalanobis_sq(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut v = x[i] - self.mean[i];
            for j in 0..i {
                v -= self.chol[i * n + j] * scratch[j];
            }
            v /= self.chol[i * n + i];
            scratch[i] = v;
            acc += v * v;
        }
        acc
    }

    fn log_density_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.dim() as f64;
        -0.5 * (self.mahalanobis_sq(x, scratch) + self.log_det + n * (2.0 * PI).ln())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, GaussianError> {
        if x.len() != self.dim() {
            return Err(GaussianError::DimensionMismatch { left: self.dim(), right: x.len() });
        }
        let mut scratch = vec![0.0; self.dim()];
        let v = self.log_density_with(x, &mut scratch);
        if v.is_nan() {
            return Err(GaussianError::Numeric("log density is NaN".into()));
        }
        Ok(v)
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<f64>) {
        let n = self.dim();
        let mut z = vec![0.0; n];
        for _ in 0..count {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            for i in 0..n {
                let mut v = self.mean[i];
                for j in 0..=i {
                    v += self.chol[i * n + j] * z[j];
                }
                out.push(v);
            }
        }
    }

    /// Canonical ordering so that symmetric estimators see the same argument order.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let a = self.mean.iter().chain(self.covariance.iter());
        let b = other.mean.iter().chain(other.covariance.iter());
        for (x, y) in a.zip(b) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

/// Fits the empirical mean and unbiased (divisor `B - 1`) covariance of the rows.
pub fn fit_gaussian(rows: ArrayView2<'_, f64>) -> Result<MultivariateGaussian, GaussianError> {
    let (b, n) = rows.dim();
    if b < 2 {
        return Err(GaussianError::InsufficientSamples { got: b, need: 2 });
    }
    if n == 0 {
        return Err(GaussianError::InvalidInput("rows have zero width".into()));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(GaussianError::InvalidInput("non-finite entry in sample rows".into()));
    }
    let mut mean = DVector::zeros(n);
    for row in rows.rows() {
        for (j, v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= b as f64;
    let mut cov = DMatrix::zeros(n, n);
    for row in rows.rows() {
        for i in 0..n {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov /= (b - 1) as f64;
    MultivariateGaussian::from_parts(mean, cov, DEFAULT_JITTER)
}

/// Draws `count` rows from `g` as `mean + L z`; deterministic for a fixed seed.
pub fn sample(g: &MultivariateGaussian, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::with_capacity(count * g.dim());
    g.sample_into(&mut rng, count, &mut flat);
    Array2::from_shape_vec((count, g.dim()), flat).expect("sample buffer matches shape")
}

fn check_dims(p: &MultivariateGaussian, q: &MultivariateGaussian) -> Result<(), GaussianError> {
    if p.dim() != q.dim() {
        return Err(GaussianError::DimensionMismatch { left: p.dim(), right: q.dim() });
    }
    Ok(())
}

/// Closed-form `KL(p || q)` in nats.
pub fn kl_divergence(p: &MultivariateGaussian, q: &MultivariateGaussian) -> Result<f64, GaussianError> {
    check_dims(p, q)?;
    let n = p.dim();
    let lq = q.chol_matrix();
    let lp = p.chol_matrix();
    // tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    let a = lq
        .solve_lower_triangular(&lp)
        .ok_or_else(|| GaussianError::Numeric("singular covariance in KL".into()))?;
    let trace = a.iter().map(|v| v * v).sum::<f64>();
    let mut scratch = vec![0.0; n];
    let maha = q.mahalanobis_sq(p.mean.as_slice(), &mut scratch);
    let kl = 0.5 * (trace + maha - n as f64 + q.log_det - p.log_det);
    if !kl.is_finite() {
        return Err(GaussianError::Numeric(format!("KL evaluated to {kl}")));
    }
    Ok(kl.max(0.0))
}

/// Jensen-Shannon divergence in nats, clamped to `[0, ln 2]` and symmetric in its arguments.
pub fn jsd(
    p: &MultivariateGaussian,
    q: &MultivariateGaussian,
    method: JsdMethod,
) -> Result<f64, GaussianError> {
    check_dims(p, q)?;
    let (p, q) = match p.canonical_cmp(q) {
        Ordering::Equal => return Ok(0.0),
        Ordering::Less => (p, q),
        Ordering::Greater => (q, p),
    };
    let raw = match method {
        JsdMethod::MonteCarlo { sample_count, seed } => jsd_monte_carlo(p, q, sample_count, seed)?,
        JsdMethod::MomentMatched => jsd_moment_matched(p, q)?,
    };
    if raw.is_nan() {
        return Err(GaussianError::Numeric("JSD estimate is NaN".into()));
    }
    Ok(raw.clamp(0.0, LN_2))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn jsd_monte_carlo(
    p: &MultivariateGaussian,
    q: &MultivariateGaussian,
    sample_count: usize,
    seed: u64,
) -> Result<f64, GaussianError> {
    if sample_count == 0 {
        return Err(GaussianError::InvalidInput("Monte-Carlo JSD needs sample_count >= 1".into()));
    }
    let n = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(sample_count * n);
    let mut scratch = vec![0.0; n];
    let mut half = |from: &MultivariateGaussian, xs: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        xs.clear();
        from.sample_into(rng, sample_count, xs);
        let mut acc = 0.0;
        for x in xs.chunks_exact(n) {
            let lp = p.log_density_with(x, &mut scratch);
            let lq = q.log_density_with(x, &mut scratch);
            let lm = log_add_exp(lp, lq) - LN_2;
            let own = if std::ptr::eq(from, p) { lp } else { lq };
            acc += own - lm;
        }
        acc / sample_count as f64
    };
    let from_p = half(p, &mut xs, &mut rng);
    let from_q = half(q, &mut xs, &mut rng);
    Ok(0.5 * from_p + 0.5 * from_q)
}

fn jsd_moment_matched(p: &MultivariateGaussian, q: &MultivariateGaussian) -> Result<f64, GaussianError> {
    let mean = (&p.mean + &q.mean) * 0.5;
    let d = &p.mean - &q.mean;
    let cov = (&p.covariance + &q.covariance) * 0.5 + (&d * d.transpose()) * 0.25;
    let m = MultivariateGaussian::from_parts(mean, cov, 0.0)?;
    Ok(0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?)
}
