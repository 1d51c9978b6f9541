//! Importance weights for actor-critic off-policy correction.
//!
//! Deterministic policies get one weight per batch, derived from a Gaussian
//! fitted to the action differences between stored and current actions and
//! compared against the exploration-noise Gaussian `N(0, sigma^2 I)`.
//! Stochastic policies get one weight per transition, comparing the current
//! policy head at the stored state with the stored behavioral parameters.
//! In both cases `lambda = exp(-rho)`.
//!
//! Weights are plain numbers: they never participate in differentiation.

use std::cmp::Ordering;
use std::f64::consts::{LN_2, PI};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{self, GaussianError, JsdMethod, MultivariateGaussian, DEFAULT_JITTER, DEFAULT_JSD_SAMPLES};
use crate::stats::derive_seed;

/// Smallest admissible `||lambda||_1` before a stochastic update is skipped.
pub const MIN_LAMBDA_MASS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OffPocError {
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid policy parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected a {expected:?} weight report")]
    VariantMismatch { expected: Variant },
    #[error("total weight mass {0:e} is too small; skip this update")]
    DegenerateWeights(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    Jsd,
    /// Only meant for divergence-sensitivity experiments.
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum JsdEstimator {
    MonteCarlo { sample_count: usize },
    MomentMatched,
}

impl JsdEstimator {
    fn with_seed(self, seed: u64) -> JsdMethod {
        match self {
            JsdEstimator::MonteCarlo { sample_count } => JsdMethod::MonteCarlo { sample_count, seed },
            JsdEstimator::MomentMatched => JsdMethod::MomentMatched,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffPocConfig {
    /// Standard deviation of the exploration noise, in action units.
    pub exploration_std: f64,
    pub divergence: Divergence,
    pub jsd_estimator: JsdEstimator,
}

impl Default for OffPocConfig {
    fn default() -> Self {
        Self {
            exploration_std: 0.1,
            divergence: Divergence::Jsd,
            jsd_estimator: JsdEstimator::MonteCarlo { sample_count: DEFAULT_JSD_SAMPLES },
        }
    }
}

impl OffPocConfig {
    pub fn validate(&self) -> Result<(), OffPocError> {
        if !(self.exploration_std.is_finite() && self.exploration_std > 0.0) {
            return Err(OffPocError::Config(format!(
                "exploration_std must be > 0, got {}",
                self.exploration_std
            )));
        }
        if let JsdEstimator::MonteCarlo { sample_count: 0 } = self.jsd_estimator {
            return Err(OffPocError::Config("jsd sample_count must be >= 1".into()));
        }
        Ok(())
    }

    fn divergence_between(
        &self,
        p: &MultivariateGaussian,
        q: &MultivariateGaussian,
        seed: u64,
    ) -> Result<f64, OffPocError> {
        Ok(match self.divergence {
            Divergence::Jsd => gaussian::jsd(p, q, self.jsd_estimator.with_seed(seed))?,
            Divergence::Kl => gaussian::kl_divergence(p, q)?,
        })
    }
}

/// Output of the correction: one weight per batch or one per transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "variant")]
pub enum WeightReport {
    Deterministic { lambda: f64, rho: f64 },
    Stochastic { lambda: Vec<f64>, rho: Vec<f64> },
}

impl WeightReport {
    pub fn variant(&self) -> Variant {
        match self {
            WeightReport::Deterministic { .. } => Variant::Deterministic,
            WeightReport::Stochastic { .. } => Variant::Stochastic,
        }
    }

    pub fn lambda_scalar(&self) -> Option<f64> {
        match self {
            WeightReport::Deterministic { lambda, .. } => Some(*lambda),
            WeightReport::Stochastic { .. } => None,
        }
    }

    pub fn lambda_vector(&self) -> Option<&[f64]> {
        match self {
            WeightReport::Deterministic { .. } => None,
            WeightReport::Stochastic { lambda, .. } => Some(lambda),
        }
    }

    /// Iterates every `(lambda, rho)` pair in the report.
    pub fn pairs(&self) -> Box<dyn Iterator<Item = (f64, f64)> + '_> {
        match self {
            WeightReport::Deterministic { lambda, rho } => Box::new(std::iter::once((*lambda, *rho))),
            WeightReport::Stochastic { lambda, rho } => Box::new(lambda.iter().copied().zip(rho.iter().copied())),
        }
    }

    /// Deterministic weight forced to one; recovers the uncorrected losses.
    pub fn unit_deterministic() -> Self {
        WeightReport::Deterministic { lambda: 1.0, rho: 0.0 }
    }
}

/// `exp(-rho)`, floored at the smallest positive normal so a huge divergence
/// still yields a positive weight instead of underflowing to zero.
fn similarity(rho: f64) -> f64 {
    (-rho).exp().max(f64::MIN_POSITIVE)
}

/// Batch weight for a deterministic policy.
///
/// `current_actions` are the current actor's outputs on the batch states and
/// `stored_actions` the actions recorded in the batch. `seed` drives the
/// Monte-Carlo JSD estimator when it is configured.
pub fn deterministic_weight(
    current_actions: ArrayView2<'_, f64>,
    stored_actions: ArrayView2<'_, f64>,
    cfg: &OffPocConfig,
    seed: u64,
) -> Result<WeightReport, OffPocError> {
    cfg.validate()?;
    if current_actions.dim() != stored_actions.dim() {
        return Err(OffPocError::Shape(format!(
            "current actions {:?} vs stored actions {:?}",
            current_actions.dim(),
            stored_actions.dim()
        )));
    }
    let diff: Array2<f64> = &stored_actions - &current_actions;
    let fitted = gaussian::fit_gaussian(diff.view())?;
    let reference = MultivariateGaussian::isotropic(diff.ncols(), cfg.exploration_std)?;
    let rho = cfg.divergence_between(&fitted, &reference, seed)?;
    Ok(WeightReport::Deterministic { lambda: similarity(rho), rho })
}

/// A batch of diagonal Gaussian policy parameters, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussianBatch {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl DiagonalGaussianBatch {
    pub fn new(mean: Array2<f64>, std: Array2<f64>) -> Result<Self, OffPocError> {
        if mean.dim() != std.dim() {
            return Err(OffPocError::Shape(format!("mean {:?} vs std {:?}", mean.dim(), std.dim())));
        }
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(OffPocError::InvalidParameters(format!("std entries must be > 0, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(OffPocError::InvalidParameters("non-finite mean".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }
}

/// Per-transition weights for a stochastic (diagonal Gaussian) policy.
///
/// `current` holds the current policy head evaluated at each stored state;
/// `stored` the behavioral parameters recorded with each transition.
/// Transition `i` uses the seed `derive_seed(seed, i)`.
pub fn stochastic_weights(
    current: &DiagonalGaussianBatch,
    stored: &DiagonalGaussianBatch,
    cfg: &OffPocConfig,
    seed: u64,
) -> Result<WeightReport, OffPocError> {
    cfg.validate()?;
    if current.mean.dim() != stored.mean.dim() {
        return Err(OffPocError::Shape(format!(
            "current params {:?} vs stored params {:?}",
            current.mean.dim(),
            stored.mean.dim()
        )));
    }
    if current.is_empty() {
        return Err(OffPocError::Shape("empty batch".into()));
    }
    for batch in [current, stored] {
        if let Some(s) = batch.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(OffPocError::InvalidParameters(format!("std entries must be > 0, got {s}")));
        }
    }
    let mut lambda = Vec::with_capacity(current.len());
    let mut rho = Vec::with_capacity(current.len());
    for i in 0..current.len() {
        let r = diagonal_divergence(
            current.mean.row(i),
            current.std.row(i),
            stored.mean.row(i),
            stored.std.row(i),
            cfg,
            derive_seed(seed, i as u64),
        )?;
        rho.push(r);
        lambda.push(similarity(r));
    }
    Ok(WeightReport::Stochastic { lambda, rho })
}

/// Divergence between two diagonal Gaussians without building full matrices.
///
/// Agrees with the general [`gaussian`] routines (same jitter convention); the
/// moment-matched mixture uses Sherman-Morrison for its rank-one term.
pub fn diagonal_divergence(
    p_mean: ArrayView1<'_, f64>,
    p_std: ArrayView1<'_, f64>,
    q_mean: ArrayView1<'_, f64>,
    q_std: ArrayView1<'_, f64>,
    cfg: &OffPocConfig,
    seed: u64,
) -> Result<f64, OffPocError> {
    let p = Diag::new(p_mean, p_std);
    let q = Diag::new(q_mean, q_std);
    let value = match cfg.divergence {
        Divergence::Kl => diag_kl(&p, &q).max(0.0),
        Divergence::Jsd => {
            let (a, b) = match p.canonical_cmp(&q) {
                Ordering::Equal => return Ok(0.0),
                Ordering::Less => (&p, &q),
                Ordering::Greater => (&q, &p),
            };
            let raw = match cfg.jsd_estimator {
                JsdEstimator::MomentMatched => diag_jsd_moment_matched(a, b),
                JsdEstimator::MonteCarlo { sample_count } => diag_jsd_monte_carlo(a, b, sample_count, seed),
            };
            raw.clamp(0.0, LN_2)
        }
    };
    if !value.is_finite() {
        return Err(OffPocError::Gaussian(GaussianError::Numeric(format!("divergence evaluated to {value}"))));
    }
    Ok(value)
}

struct Diag {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Diag {
    fn new(mean: ArrayView1<'_, f64>, std: ArrayView1<'_, f64>) -> Self {
        Self {
            mean: mean.to_vec(),
            var: std.iter().map(|s| s * s + DEFAULT_JITTER).collect(),
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        for (x, y) in self.mean.iter().chain(&self.var).zip(other.mean.iter().chain(&other.var)) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            acc += d * d / self.var[i] + self.var[i].ln() + (2.0 * PI).ln();
        }
        -0.5 * acc
    }
}

fn diag_kl(p: &Diag, q: &Diag) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.mean.len() {
        let d = q.mean[i] - p.mean[i];
        acc += p.var[i] / q.var[i] + d * d / q.var[i] - 1.0 + (q.var[i] / p.var[i]).ln();
    }
    0.5 * acc
}

fn diag_jsd_moment_matched(p: &Diag, q: &Diag) -> f64 {
    let n = p.mean.len();
    // M = D + u u^T with D = (Dp + Dq) / 2 and u = (mu_p - mu_q) / 2.
    let d: Vec<f64> = (0..n).map(|i| 0.5 * (p.var[i] + q.var[i])).collect();
    let u: Vec<f64> = (0..n).map(|i| 0.5 * (p.mean[i] - q.mean[i])).collect();
    let s: f64 = (0..n).map(|i| u[i] * u[i] / d[i]).sum();
    let log_det_m = d.iter().map(|v| v.ln()).sum::<f64>() + s.ln_1p();
    let quad = s / (1.0 + s);
    let kl_to_m = |x: &Diag| {
        let trace: f64 = (0..n).map(|i| x.var[i] / d[i]).sum::<f64>()
            - (0..n).map(|i| (u[i] / d[i]).powi(2) * x.var[i]).sum::<f64>() / (1.0 + s);
        let log_det_x: f64 = x.var.iter().map(|v| v.ln()).sum();
        0.5 * (trace + quad - n as f64 + log_det_m - log_det_x)
    };
    0.5 * kl_to_m(p) + 0.5 * kl_to_m(q)
}

fn diag_jsd_monte_carlo(p: &Diag, q: &Diag, sample_count: usize, seed: u64) -> f64 {
    let n = p.mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; n];
    let mut half = |from: &Diag, rng: &mut ChaCha8Rng| {
        let mut acc = 0.0;
        for _ in 0..sample_count {
            for i in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                x[i] = from.mean[i] + from.var[i].sqrt() * z;
            }
            let lp = p.log_density(&x);
            let lq = q.log_density(&x);
            let m = lp.max(lq);
            let lm = m + ((lp - m).exp() + (lq - m).exp()).ln() - LN_2;
            acc += if std::ptr::eq(from, p) { lp } else { lq } - lm;
        }
        acc / sample_count.max(1) as f64
    };
    let a = half(p, &mut rng);
    let b = half(q, &mut rng);
    0.5 * a + 0.5 * b
}

/// Scales a deterministic agent's critic loss and policy objective by the batch weight.
pub fn apply_deterministic_weight(
    report: &WeightReport,
    critic_loss: f64,
    policy_objective: f64,
) -> Result<(f64, f64), OffPocError> {
    let lambda = report
        .lambda_scalar()
        .ok_or(OffPocError::VariantMismatch { expected: Variant::Deterministic })?;
    Ok((lambda * critic_loss, lambda * policy_objective))
}

/// Per-sample coefficients for the stochastic objectives.
///
/// Returns `(critic, policy)` where the weighted critic loss is
/// `sum_i critic[i] * delta_i^2` and the weighted policy objective is
/// `sum_i policy[i] * term_i`: `critic[i] = lambda_i^2 / ||lambda||_1` and
/// `policy[i] = lambda_i / ||lambda||_1`.
pub fn stochastic_coefficients(report: &WeightReport) -> Result<(Vec<f64>, Vec<f64>), OffPocError> {
    let lambda = report
        .lambda_vector()
        .ok_or(OffPocError::VariantMismatch { expected: Variant::Stochastic })?;
    let mass: f64 = lambda.iter().map(|l| l.abs()).sum();
    if !(mass >= MIN_LAMBDA_MASS) {
        return Err(OffPocError::DegenerateWeights(mass));
    }
    Ok((
        lambda.iter().map(|l| l * l / mass).collect(),
        lambda.iter().map(|l| l / mass).collect(),
    ))
}

/// Weighted stochastic critic loss `||lambda o delta||^2 / ||lambda||_1` and
/// policy objective `sum_i lambda_i term_i / ||lambda||_1`.
pub fn apply_stochastic_weights(
    report: &WeightReport,
    td_errors: &[f64],
    policy_terms: &[f64],
) -> Result<(f64, f64), OffPocError> {
    let (critic, policy) = stochastic_coefficients(report)?;
    if td_errors.len() != critic.len() || policy_terms.len() != critic.len() {
        return Err(OffPocError::Shape(format!(
            "{} weights, {} td errors, {} policy terms",
            critic.len(),
            td_errors.len(),
            policy_terms.len()
        )));
    }
    let loss = critic.iter().zip(td_errors).map(|(c, d)| c * d * d).sum();
    let objective = policy.iter().zip(policy_terms).map(|(c, t)| c * t).sum();
    Ok((loss, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn mm_cfg() -> OffPocConfig {
        OffPocConfig { jsd_estimator: JsdEstimator::MomentMatched, ..Default::default() }
    }

    #[test]
    fn noisy_replay_of_current_policy_is_near_one() {
        let sigma = 0.1;
        let current = gaussian::sample(&MultivariateGaussian::isotropic(2, 1.0).unwrap(), 4096, 1);
        let noise = gaussian::sample(&MultivariateGaussian::isotropic(2, sigma).unwrap(), 4096, 2);
        let stored = &current + &noise;
        let r = deterministic_weight(current.view(), stored.view(), &OffPocConfig::default(), 3).unwrap();
        let l = r.lambda_scalar().unwrap();
        assert!((0.97..=1.0).contains(&l), "{l}");
    }

    #[test]
    fn exact_replay_is_not_weight_one() {
        let current = array![[0.1], [0.2], [-0.3], [0.4]];
        let r = deterministic_weight(current.view(), current.view(), &OffPocConfig::default(), 3).unwrap();
        let l = r.lambda_scalar().unwrap();
        // N(0, 1e-6) against N(0, 1e-2) barely overlaps.
        assert!(l < 0.7 && l >= 0.5, "{l}");
    }

    #[test]
    fn far_shift_saturates_at_half() {
        let current = Array2::<f64>::zeros((512, 2));
        let noise = gaussian::sample(&MultivariateGaussian::isotropic(2, 0.1).unwrap(), 512, 9);
        let stored = noise + 10.0;
        let r = deterministic_weight(current.view(), stored.view(), &OffPocConfig::default(), 3).unwrap();
        assert!((r.lambda_scalar().unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn deterministic_errors() {
        let a = array![[0.0], [1.0]];
        let b = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(matches!(
            deterministic_weight(a.view(), b.view(), &OffPocConfig::default(), 0),
            Err(OffPocError::Shape(_))
        ));
        let one = array![[0.0]];
        assert!(matches!(
            deterministic_weight(one.view(), one.view(), &OffPocConfig::default(), 0),
            Err(OffPocError::Gaussian(GaussianError::InsufficientSamples { .. }))
        ));
        let bad = OffPocConfig { exploration_std: 0.0, ..Default::default() };
        assert!(matches!(deterministic_weight(a.view(), a.view(), &bad, 0), Err(OffPocError::Config(_))));
    }

    #[test]
    fn stochastic_identical_params_give_unit_weights() {
        let p = DiagonalGaussianBatch::new(array![[0.1, 0.2], [1.0, -1.0]], array![[0.5, 0.3], [1.0, 2.0]]).unwrap();
        let r = stochastic_weights(&p, &p.clone(), &OffPocConfig::default(), 0).unwrap();
        assert_eq!(r.lambda_vector().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn stochastic_single_outlier() {
        let cur = DiagonalGaussianBatch::new(array![[0.0], [0.0], [0.0]], array![[1.0], [1.0], [1.0]]).unwrap();
        let stored = DiagonalGaussianBatch::new(array![[0.0], [100.0], [0.0]], array![[1.0], [1.0], [1.0]]).unwrap();
        for cfg in [OffPocConfig::default(), mm_cfg()] {
            let r = stochastic_weights(&cur, &stored, &cfg, 4).unwrap();
            let l = r.lambda_vector().unwrap();
            assert_eq!(l[0], 1.0);
            assert_eq!(l[2], 1.0);
            assert!((l[1] - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn stochastic_kl_hand_value() {
        let cfg = OffPocConfig { divergence: Divergence::Kl, ..Default::default() };
        let cur = DiagonalGaussianBatch::new(array![[0.0]], array![[1.0]]).unwrap();
        let stored = DiagonalGaussianBatch::new(array![[3.0]], array![[1.0]]).unwrap();
        let r = stochastic_weights(&cur, &stored, &cfg, 0).unwrap();
        let WeightReport::Stochastic { lambda, rho } = r else { panic!() };
        // jitter shifts the variance by 1e-6
        assert!((rho[0] - 4.5).abs() < 1e-5);
        assert!((lambda[0] - (-4.5f64).exp()).abs() < 1e-6);
        assert!((lambda[0] - 0.0111).abs() < 1e-4);
    }

    #[test]
    fn stochastic_rejects_nonpositive_std() {
        assert!(matches!(
            DiagonalGaussianBatch::new(array![[0.0]], array![[0.0]]),
            Err(OffPocError::InvalidParameters(_))
        ));
        let ok = DiagonalGaussianBatch::new(array![[0.0]], array![[1.0]]).unwrap();
        let bad = DiagonalGaussianBatch { mean: array![[0.0]], std: array![[-1.0]] };
        assert!(matches!(
            stochastic_weights(&ok, &bad, &OffPocConfig::default(), 0),
            Err(OffPocError::InvalidParameters(_))
        ));
    }

    #[test]
    fn diagonal_fast_path_matches_general_route() {
        let cases = [
            (vec![0.0, 1.0], vec![1.0, 0.5], vec![0.3, -0.2], vec![0.7, 1.5]),
            (vec![2.0], vec![0.1], vec![-1.0], vec![0.3]),
            (vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], vec![5.0, -4.0, 0.1], vec![0.2, 3.0, 1.0]),
        ];
        for (pm, ps, qm, qs) in cases {
            let p = MultivariateGaussian::diagonal(&pm, &ps).unwrap();
            let q = MultivariateGaussian::diagonal(&qm, &qs).unwrap();
            let (pm, ps, qm, qs) = (Array1::from(pm), Array1::from(ps), Array1::from(qm), Array1::from(qs));
            let fast_kl = diagonal_divergence(
                pm.view(),
                ps.view(),
                qm.view(),
                qs.view(),
                &OffPocConfig { divergence: Divergence::Kl, ..Default::default() },
                0,
            )
            .unwrap();
            assert!((fast_kl - gaussian::kl_divergence(&p, &q).unwrap()).abs() < 1e-10);
            let fast_mm = diagonal_divergence(pm.view(), ps.view(), qm.view(), qs.view(), &mm_cfg(), 0).unwrap();
            let slow_mm = gaussian::jsd(&p, &q, JsdMethod::MomentMatched).unwrap();
            assert!((fast_mm - slow_mm).abs() < 1e-10, "{fast_mm} vs {slow_mm}");
            let mc = OffPocConfig {
                jsd_estimator: JsdEstimator::MonteCarlo { sample_count: 50_000 },
                ..Default::default()
            };
            let fast_mc = diagonal_divergence(pm.view(), ps.view(), qm.view(), qs.view(), &mc, 17).unwrap();
            let slow_mc =
                gaussian::jsd(&p, &q, JsdMethod::MonteCarlo { sample_count: 50_000, seed: 99 }).unwrap();
            assert!((fast_mc - slow_mc).abs() < 1e-2, "{fast_mc} vs {slow_mc}");
        }
    }

    #[test]
    fn deterministic_application() {
        let one = WeightReport::unit_deterministic();
        assert_eq!(apply_deterministic_weight(&one, 2.0, -3.0).unwrap(), (2.0, -3.0));
        let half = WeightReport::Deterministic { lambda: 0.5, rho: 2f64.ln() };
        assert_eq!(apply_deterministic_weight(&half, 2.0, 1.0).unwrap().0, 1.0);
        let sto = WeightReport::Stochastic { lambda: vec![1.0], rho: vec![0.0] };
        assert!(matches!(
            apply_deterministic_weight(&sto, 1.0, 1.0),
            Err(OffPocError::VariantMismatch { expected: Variant::Deterministic })
        ));
    }

    #[test]
    fn stochastic_application_hand_cases() {
        let r = WeightReport::Stochastic { lambda: vec![1.0, 1.0, 0.5], rho: vec![0.0, 0.0, 2f64.ln()] };
        let (loss, _) = apply_stochastic_weights(&r, &[1.0, -1.0, 2.0], &[0.0; 3]).unwrap();
        assert!((loss - 1.2).abs() < 1e-12);
        let r = WeightReport::Stochastic { lambda: vec![0.5], rho: vec![2f64.ln()] };
        let (loss, _) = apply_stochastic_weights(&r, &[4.0], &[0.0]).unwrap();
        assert!((loss - 8.0).abs() < 1e-12);
        let ones = WeightReport::Stochastic { lambda: vec![1.0; 4], rho: vec![0.0; 4] };
        let d = [1.0, 2.0, -3.0, 0.5];
        let (loss, obj) = apply_stochastic_weights(&ones, &d, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((loss - d.iter().map(|x| x * x).sum::<f64>() / 4.0).abs() < 1e-12);
        assert!((obj - 2.5).abs() < 1e-12);
    }

    #[test]
    fn stochastic_application_guards() {
        let tiny = WeightReport::Stochastic { lambda: vec![0.0, 0.0], rho: vec![f64::INFINITY; 2] };
        assert!(matches!(
            apply_stochastic_weights(&tiny, &[1.0, 1.0], &[1.0, 1.0]),
            Err(OffPocError::DegenerateWeights(_))
        ));
        let r = WeightReport::Stochastic { lambda: vec![1.0, 1.0], rho: vec![0.0, 0.0] };
        assert!(matches!(apply_stochastic_weights(&r, &[1.0], &[1.0, 1.0]), Err(OffPocError::Shape(_))));
        assert!(matches!(
            apply_stochastic_weights(&WeightReport::unit_deterministic(), &[1.0], &[1.0]),
            Err(OffPocError::VariantMismatch { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn permutation_invariant(seed in 0u64..1000, shift in 0usize..16) {
                let cur = gaussian::sample(&MultivariateGaussian::isotropic(2, 1.0).unwrap(), 16, seed);
                let st = gaussian::sample(&MultivariateGaussian::isotropic(2, 0.5).unwrap(), 16, seed + 1) + &cur;
                let perm: Vec<usize> = (0..16).map(|i| (i * 5 + shift) % 16).collect();
                let cur_p = cur.select(ndarray::Axis(0), &perm);
                let st_p = st.select(ndarray::Axis(0), &perm);
                let cfg = mm_cfg();
                let a = deterministic_weight(cur.view(), st.view(), &cfg, 1).unwrap().lambda_scalar().unwrap();
                let b = deterministic_weight(cur_p.view(), st_p.view(), &cfg, 1).unwrap().lambda_scalar().unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn stochastic_is_elementwise(j in 0usize..6, delta in -5.0f64..5.0, seed in any::<u64>()) {
                let mean = Array2::from_shape_fn((6, 2), |(i, k)| (i as f64 - k as f64) * 0.3);
                let std = Array2::from_elem((6, 2), 0.4);
                let cur = DiagonalGaussianBatch::new(mean.clone(), std.clone()).unwrap();
                let base = DiagonalGaussianBatch::new(mean.clone() + 0.2, std.clone()).unwrap();
                let mut moved = base.clone();
                moved.mean[[j, 0]] += delta;
                let cfg = OffPocConfig::default();
                let a = stochastic_weights(&cur, &base, &cfg, seed).unwrap();
                let b = stochastic_weights(&cur, &moved, &cfg, seed).unwrap();
                let (la, lb) = (a.lambda_vector().unwrap(), b.lambda_vector().unwrap());
                for i in 0..6 {
                    if i != j {
                        prop_assert_eq!(la[i], lb[i]);
                    }
                }
            }

            #[test]
            fn constant_weights_cancel_in_policy_objective(c in 0.5f64..=1.0, terms in prop::collection::vec(-10.0f64..10.0, 1..20)) {
                let r = WeightReport::Stochastic { lambda: vec![c; terms.len()], rho: vec![-c.ln(); terms.len()] };
                let (_, obj) = apply_stochastic_weights(&r, &vec![0.0; terms.len()], &terms).unwrap();
                let mean = terms.iter().sum::<f64>() / terms.len() as f64;
                prop_assert!((obj - mean).abs() < 1e-9);
            }
        }
    }
}
