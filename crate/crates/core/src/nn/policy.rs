//! Tanh-squashed diagonal Gaussian policies on top of a Gaussian-head network.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::NnError;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Maps pre-squash values onto `[low, high]` per column.
pub fn squash(u: ArrayView2<'_, f64>, low: &[f64], high: &[f64]) -> Array2<f64> {
    let mut out = u.to_owned();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 0.5 * (high[j] + low[j]) + 0.5 * (high[j] - low[j]) * v.tanh();
        }
    }
    out
}

/// Log-density of `u` under `N(mean, exp(log_std)^2)` per row (pre-squash).
pub fn gaussian_log_prob(u: ArrayView2<'_, f64>, mean: ArrayView2<'_, f64>, log_std: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut out = Array1::zeros(u.nrows());
    for i in 0..u.nrows() {
        let mut acc = 0.0;
        for j in 0..u.ncols() {
            let z = (u[[i, j]] - mean[[i, j]]) * (-log_std[[i, j]]).exp();
            acc += -0.5 * z * z - log_std[[i, j]] - 0.5 * (2.0 * PI).ln();
        }
        out[i] = acc;
    }
    out
}

/// Gradient of `sum_i coeff_i * log N(u_i; mean_i, std_i)` with respect to
/// the head outputs `[mean | log_std]`, holding `u` fixed (score function).
pub fn score_function_gradient(
    u: ArrayView2<'_, f64>,
    mean: ArrayView2<'_, f64>,
    log_std: ArrayView2<'_, f64>,
    coeff: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let (b, n) = u.dim();
    let mut g = Array2::zeros((b, 2 * n));
    for i in 0..b {
        for j in 0..n {
            let inv_var = (-2.0 * log_std[[i, j]]).exp();
            let d = u[[i, j]] - mean[[i, j]];
            g[[i, j]] = coeff[i] * d * inv_var;
            g[[i, n + j]] = coeff[i] * (d * d * inv_var - 1.0);
        }
    }
    g
}

/// A reparameterized draw `a = mid + half * tanh(mean + std * noise)`.
#[derive(Debug, Clone)]
pub struct SquashedGaussianSample {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    pub std: Array2<f64>,
    pub noise: Array2<f64>,
    pub pre_squash: Array2<f64>,
    pub action: Array2<f64>,
    /// Log-density of `action` including the tanh change of variables.
    pub log_prob: Array1<f64>,
    half: Vec<f64>,
}

impl SquashedGaussianSample {
    /// `head_out` is `B x 2n` (`[mean | log_std]`), `noise` is `B x n`.
    pub fn new(head_out: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>, low: &[f64], high: &[f64]) -> Result<Self, NnError> {
        let (b, w) = head_out.dim();
        let n = w / 2;
        if w % 2 != 0 || noise.dim() != (b, n) || low.len() != n || high.len() != n {
            return Err(NnError::Shape(format!(
                "head {:?}, noise {:?}, bounds {}/{}",
                head_out.dim(),
                noise.dim(),
                low.len(),
                high.len()
            )));
        }
        let mean = head_out.slice(s![.., ..n]).to_owned();
        let log_std = head_out.slice(s![.., n..]).to_owned();
        let std = log_std.mapv(f64::exp);
        let pre_squash = &mean + &(&std * &noise);
        let action = squash(pre_squash.view(), low, high);
        let half: Vec<f64> = (0..n).map(|j| 0.5 * (high[j] - low[j])).collect();
        let mut log_prob = Array1::zeros(b);
        for i in 0..b {
            let mut acc = 0.0;
            for j in 0..n {
                let e = noise[[i, j]];
                let u = pre_squash[[i, j]];
                acc += -0.5 * e * e - log_std[[i, j]] - 0.5 * (2.0 * PI).ln() - half[j].ln() - log_one_minus_tanh_sq(u);
            }
            log_prob[i] = acc;
        }
        Ok(Self { mean, log_std, std, noise: noise.to_owned(), pre_squash, action, log_prob, half })
    }

    /// Chain rule back to the head outputs `[mean | log_std]` given
    /// `dL/d(action)` and `dL/d(log_prob)`; the noise is held fixed.
    pub fn backward(&self, grad_action: ArrayView2<'_, f64>, grad_log_prob: ArrayView1<'_, f64>) -> Array2<f64> {
        let (b, n) = self.mean.dim();
        let mut g = Array2::zeros((b, 2 * n));
        for i in 0..b {
            for j in 0..n {
                let t = self.pre_squash[[i, j]].tanh();
                // d(log_prob)/du = 2 tanh(u) from the change-of-variables term
                let du = grad_action[[i, j]] * self.half[j] * (1.0 - t * t) + grad_log_prob[i] * 2.0 * t;
                g[[i, j]] = du;
                g[[i, n + j]] = du * self.std[[i, j]] * self.noise[[i, j]] - grad_log_prob[i];
            }
        }
        g
    }
}
