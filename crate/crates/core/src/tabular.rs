//! Exact finite-MDP evaluation of the one-step importance-sampling operator
//!
//! ```text
//! HQ(s,a) = Q(s,a) + sum_{t=0..T} gamma^t E_eta[ lambda_t (r_t + gamma E_pi Q(s_{t+1},.) - Q(s_t,a_t)) ]
//! ```
//!
//! Expectations are computed by propagating the state-action distribution
//! under the behavior policy, never by sampling. The contraction audit also
//! measures the per-cell coefficients
//!
//! ```text
//! w_{y,b}(s,a) = sum_{t=1..T} gamma^t Pr_eta(s_t = y | s,a) (pi(b|y) - eta(b|y) lambda(t,y,b))
//! ```
//!
//! and their sum `xi(s,a)`, then checks `|HQ - Q^pi|(s,a) <= xi(s,a) ||Q - Q^pi||`
//! cell by cell. Nothing about the signs or sizes of these coefficients is
//! assumed; they are reported as measured.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TabularError {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("lambda({t}, {s}, {a}) = {value} is outside [0, 1]")]
    LambdaOutOfRange { t: usize, s: usize, a: usize, value: f64 },
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("linear solve failed")]
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// Row `s * A + a` is the next-state distribution.
    transitions: DMatrix<f64>,
    /// Entry `s * A + a`.
    rewards: DVector<f64>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: DMatrix<f64>,
        rewards: DVector<f64>,
    ) -> Result<Self, TabularError> {
        if n_states == 0 || n_actions == 0 {
            return Err(TabularError::InvalidMdp("need at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TabularError::InvalidMdp(format!("gamma must be in [0, 1), got {gamma}")));
        }
        let n = n_states * n_actions;
        if transitions.shape() != (n, n_states) || rewards.len() != n {
            return Err(TabularError::InvalidMdp("tensor shapes do not match state/action counts".into()));
        }
        for r in 0..n {
            let row = transitions.row(r);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (row.sum() - 1.0).abs() > ROW_TOLERANCE {
                return Err(TabularError::InvalidMdp(format!(
                    "P[{}][{}] is not a distribution",
                    r / n_actions,
                    r % n_actions
                )));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(TabularError::InvalidMdp("non-finite reward".into()));
        }
        Ok(Self { n_states, n_actions, gamma, transitions, rewards })
    }

    /// Random MDP: next-state rows are normalized uniform draws, rewards in `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<Self, TabularError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_states * n_actions;
        let mut p = DMatrix::from_fn(n, n_states, |_, _| rng.random::<f64>() + 1e-3);
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        normalize_rows(&mut p);
        let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        Self::new(n_states, n_actions, gamma, p, r)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a, next)]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.amax()
    }

    /// Parses the text format:
    ///
    /// ```text
    /// # comments and blank lines are ignored
    /// states 3
    /// actions 2
    /// gamma 0.9
    /// R <s> <a> <reward>             (unlisted rewards are 0)
    /// P <s> <a> : <p_0> ... <p_{S-1}> (required for every (s, a))
    /// ```
    pub fn parse(text: &str) -> Result<Self, TabularError> {
        let mut states = None;
        let mut actions = None;
        let mut gamma = None;
        let mut r_lines = Vec::new();
        let mut p_lines = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let perr = |m: String| TabularError::Parse { line: line_no, message: m };
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let key = words.next().unwrap();
            let rest: Vec<&str> = words.collect();
            let num = |w: &str| w.parse::<f64>().map_err(|e| perr(format!("{w:?}: {e}")));
            let int = |w: &str| w.parse::<usize>().map_err(|e| perr(format!("{w:?}: {e}")));
            match key {
                "states" | "actions" | "gamma" if rest.len() != 1 => return Err(perr(format!("{key} takes one value"))),
                "states" => states = Some(int(rest[0])?),
                "actions" => actions = Some(int(rest[0])?),
                "gamma" => gamma = Some(num(rest[0])?),
                "R" => {
                    if rest.len() != 3 {
                        return Err(perr("expected R <s> <a> <value>".into()));
                    }
                    r_lines.push((line_no, int(rest[0])?, int(rest[1])?, num(rest[2])?));
                }
                "P" => {
                    if rest.len() < 4 || rest[2] != ":" {
                        return Err(perr("expected P <s> <a> : <probabilities>".into()));
                    }
                    let probs = rest[3..].iter().map(|w| num(w)).collect::<Result<Vec<_>, _>>()?;
                    p_lines.push((line_no, int(rest[0])?, int(rest[1])?, probs));
                }
                other => return Err(perr(format!("unknown directive {other:?}"))),
            }
        }
        let missing = |what: &str| TabularError::Parse { line: 0, message: format!("missing `{what}` line") };
        let (ns, na, g) = (states.ok_or(missing("states"))?, actions.ok_or(missing("actions"))?, gamma.ok_or(missing("gamma"))?);
        let mut p = DMatrix::from_element(ns * na, ns, f64::NAN);
        let mut r = DVector::zeros(ns * na);
        for (line, s, a, v) in r_lines {
            if s >= ns || a >= na {
                return Err(TabularError::Parse { line, message: format!("({s}, {a}) out of range") });
            }
            r[s * na + a] = v;
        }
        for (line, s, a, probs) in p_lines {
            if s >= ns || a >= na || probs.len() != ns {
                return Err(TabularError::Parse { line, message: format!("bad P row for ({s}, {a})") });
            }
            for (y, v) in probs.into_iter().enumerate() {
                p[(s * na + a, y)] = v;
            }
        }
        if let Some(idx) = (0..ns * na).find(|&i| p[(i, 0)].is_nan()) {
            return Err(TabularError::Parse { line: 0, message: format!("no P row for ({}, {})", idx / na, idx % na) });
        }
        Self::new(ns, na, g, p, r)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "states {}\nactions {}\ngamma {}", self.n_states, self.n_actions, self.gamma);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let _ = writeln!(out, "R {s} {a} {}", self.reward(s, a));
                let probs: Vec<String> = (0..self.n_states).map(|y| self.transition(s, a, y).to_string()).collect();
                let _ = writeln!(out, "P {s} {a} : {}", probs.join(" "));
            }
        }
        out
    }

    /// `(s,a) -> (y,b)` kernel: `P(y|s,a) policy(b|y)`.
    fn pair_kernel(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        DMatrix::from_fn(ns * na, ns * na, |i, j| self.transitions[(i, j / na)] * policy.probs[(j / na, j % na)])
    }
}

/// Sums each row exactly to one (after float normalization) by adjusting the largest entry.
fn normalize_rows(p: &mut DMatrix<f64>) {
    for mut row in p.row_iter_mut() {
        let err = row.sum() - 1.0;
        let imax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap();
        row[imax] -= err;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// `S x A`, rows are action distributions.
    pub probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self, TabularError> {
        for (s, row) in probs.row_iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (row.sum() - 1.0).abs() > ROW_TOLERANCE {
                return Err(TabularError::InvalidPolicy(format!("row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DMatrix::from_fn(n_states, n_actions, |_, _| rng.random::<f64>() + 1e-3);
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        normalize_rows(&mut p);
        Self { probs: p }
    }

    /// `uniform`, `random:<seed>`, or explicit rows `p,p;p,p` (one row per state).
    pub fn from_spec(spec: &str, n_states: usize, n_actions: usize) -> Result<Self, TabularError> {
        let spec = spec.trim();
        if spec == "uniform" {
            return Ok(Self::uniform(n_states, n_actions));
        }
        if let Some(seed) = spec.strip_prefix("random:") {
            let seed = seed.parse().map_err(|_| TabularError::InvalidPolicy(format!("bad seed in {spec:?}")))?;
            return Ok(Self::random(n_states, n_actions, seed));
        }
        let rows: Vec<&str> = spec.split(';').collect();
        if rows.len() != n_states {
            return Err(TabularError::InvalidPolicy(format!("{spec:?}: expected {n_states} rows")));
        }
        let mut probs = DMatrix::zeros(n_states, n_actions);
        for (s, row) in rows.iter().enumerate() {
            let vals: Vec<f64> = row
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TabularError::InvalidPolicy(format!("{spec:?}: {e}")))?;
            if vals.len() != n_actions {
                return Err(TabularError::InvalidPolicy(format!("row {s}: expected {n_actions} entries")));
            }
            for (a, v) in vals.into_iter().enumerate() {
                probs[(s, a)] = v;
            }
        }
        Self::new(probs)
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }
}

/// Built-in weight profiles `lambda(t, state, action)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LambdaProfile {
    Zero,
    One,
    Constant(f64),
    /// `exp(-JSD(pi(.|y), eta(.|y)))` in nats: state-dependent, in `[0.5, 1]`.
    PolicySimilarity,
    /// `min(1, pi(b|y) / eta(b|y))`.
    TruncatedRatio,
}

impl LambdaProfile {
    /// `zero`, `one`, `const:<c>`, `similarity`, `ratio`.
    pub fn parse(spec: &str) -> Result<Self, TabularError> {
        match spec.trim() {
            "zero" => Ok(LambdaProfile::Zero),
            "one" => Ok(LambdaProfile::One),
            "similarity" => Ok(LambdaProfile::PolicySimilarity),
            "ratio" => Ok(LambdaProfile::TruncatedRatio),
            s => {
                let c = s
                    .strip_prefix("const:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| TabularError::InvalidPolicy(format!("unknown lambda spec {spec:?}")))?;
                Ok(LambdaProfile::Constant(c))
            }
        }
    }

    /// Tabulates the profile as a time-independent `S x A` matrix.
    pub fn table(&self, pi: &TabularPolicy, eta: &TabularPolicy) -> DMatrix<f64> {
        let (ns, na) = (pi.n_states(), pi.n_actions());
        match self {
            LambdaProfile::Zero => DMatrix::zeros(ns, na),
            LambdaProfile::One => DMatrix::from_element(ns, na, 1.0),
            LambdaProfile::Constant(c) => DMatrix::from_element(ns, na, *c),
            LambdaProfile::PolicySimilarity => DMatrix::from_fn(ns, na, |y, _| {
                let p: Vec<f64> = pi.probs.row(y).iter().copied().collect();
                let q: Vec<f64> = eta.probs.row(y).iter().copied().collect();
                (-discrete_jsd(&p, &q)).exp()
            }),
            LambdaProfile::TruncatedRatio => DMatrix::from_fn(ns, na, |y, b| {
                let e = eta.probs[(y, b)];
                if e == 0.0 {
                    1.0
                } else {
                    (pi.probs[(y, b)] / e).min(1.0)
                }
            }),
        }
    }
}

/// Jensen-Shannon divergence between two discrete distributions, nats.
pub fn discrete_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            acc += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            acc += 0.5 * b * (b / m).ln();
        }
    }
    acc.clamp(0.0, std::f64::consts::LN_2)
}

fn check_policy(mdp: &FiniteMdp, policy: &TabularPolicy, name: &str) -> Result<(), TabularError> {
    if policy.probs.shape() != (mdp.n_states, mdp.n_actions) {
        return Err(TabularError::InvalidPolicy(format!("{name} has shape {:?}", policy.probs.shape())));
    }
    Ok(())
}

/// Solves `(I - gamma P^pi) Q = R` directly. Returns an `S x A` matrix.
pub fn exact_q(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<DMatrix<f64>, TabularError> {
    check_policy(mdp, pi, "pi")?;
    let n = mdp.n_states * mdp.n_actions;
    let system = DMatrix::identity(n, n) - mdp.pair_kernel(pi) * mdp.gamma;
    let q = system.lu().solve(&mdp.rewards).ok_or(TabularError::Singular)?;
    Ok(to_table(&q, mdp.n_states, mdp.n_actions))
}

/// Iterates `Q <- R + gamma P^pi Q` from zero.
pub fn value_iteration(mdp: &FiniteMdp, pi: &TabularPolicy, iterations: usize) -> Result<DMatrix<f64>, TabularError> {
    check_policy(mdp, pi, "pi")?;
    let kernel = mdp.pair_kernel(pi) * mdp.gamma;
    let mut q = DVector::zeros(mdp.rewards.len());
    for _ in 0..iterations {
        q = &mdp.rewards + &kernel * &q;
    }
    Ok(to_table(&q, mdp.n_states, mdp.n_actions))
}

fn to_table(v: &DVector<f64>, ns: usize, na: usize) -> DMatrix<f64> {
    DMatrix::from_fn(ns, na, |s, a| v[s * na + a])
}

fn to_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let (ns, na) = m.shape();
    DVector::from_fn(ns * na, |i, _| m[(i / na, i % na)])
}

/// Tabulated `lambda(t, y, b)` for `t = 0..=horizon`, range-checked.
fn lambda_tables(
    ns: usize,
    na: usize,
    horizon: usize,
    lambda_fn: &dyn Fn(usize, usize, usize) -> f64,
) -> Result<Vec<DVector<f64>>, TabularError> {
    (0..=horizon)
        .map(|t| {
            let mut v = DVector::zeros(ns * na);
            for s in 0..ns {
                for a in 0..na {
                    let value = lambda_fn(t, s, a);
                    if !(0.0..=1.0).contains(&value) {
                        return Err(TabularError::LambdaOutOfRange { t, s, a, value });
                    }
                    v[s * na + a] = value;
                }
            }
            Ok(v)
        })
        .collect()
}

/// Result of applying the truncated operator.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOutput {
    pub hq: DMatrix<f64>,
    /// `gamma^(T+1) max|TD| / (1 - gamma)`, bounding the omitted terms.
    pub tail_bound: f64,
}

struct Propagation {
    hq: DMatrix<f64>,
    tail_bound: f64,
    /// Per start pair `(s,a)`, the `S x A` coefficient table `w`.
    w: Option<Vec<DMatrix<f64>>>,
}

fn propagate(
    mdp: &FiniteMdp,
    pi: &TabularPolicy,
    eta: &TabularPolicy,
    q: &DMatrix<f64>,
    lambda_fn: &dyn Fn(usize, usize, usize) -> f64,
    horizon: usize,
    with_coefficients: bool,
) -> Result<Propagation, TabularError> {
    check_policy(mdp, pi, "pi")?;
    check_policy(mdp, eta, "eta")?;
    if horizon < 1 {
        return Err(TabularError::Horizon);
    }
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    if q.shape() != (ns, na) {
        return Err(TabularError::InvalidMdp(format!("q has shape {:?}", q.shape())));
    }
    let n = ns * na;
    let lambdas = lambda_tables(ns, na, horizon, lambda_fn)?;
    let qv = to_vector(q);
    // expected TD error of each pair under pi-bootstrapping
    let v_pi = DVector::from_fn(ns, |y, _| (0..na).map(|b| pi.probs[(y, b)] * q[(y, b)]).sum::<f64>());
    let td = &mdp.rewards + (&mdp.transitions * &v_pi) * g - &qv;
    let kernel = mdp.pair_kernel(eta);
    let mut dist = DMatrix::<f64>::identity(n, n);
    let mut acc = DVector::<f64>::zeros(n);
    let mut w = with_coefficients.then(|| vec![DMatrix::<f64>::zeros(ns, na); n]);
    let mut discount = 1.0;
    for (t, lam) in lambdas.iter().enumerate() {
        if t > 0 {
            dist = &dist * &kernel;
            discount *= g;
        }
        let weighted = lam.component_mul(&td);
        acc += (&dist * weighted) * discount;
        if let (Some(w), true) = (w.as_mut(), t >= 1) {
            for (start, table) in w.iter_mut().enumerate() {
                for y in 0..ns {
                    let marginal: f64 = (0..na).map(|c| dist[(start, y * na + c)]).sum();
                    if marginal == 0.0 {
                        continue;
                    }
                    for b in 0..na {
                        table[(y, b)] +=
                            discount * marginal * (pi.probs[(y, b)] - eta.probs[(y, b)] * lam[y * na + b]);
                    }
                }
            }
        }
    }
    let hq = DMatrix::from_fn(ns, na, |s, a| q[(s, a)] + acc[s * na + a]);
    let tail_bound = g.powi(horizon as i32 + 1) * td.amax() / (1.0 - g);
    Ok(Propagation { hq, tail_bound, w })
}

/// Applies the operator truncated after `horizon` steps.
pub fn apply_operator(
    mdp: &FiniteMdp,
    pi: &TabularPolicy,
    eta: &TabularPolicy,
    q: &DMatrix<f64>,
    lambda_fn: &dyn Fn(usize, usize, usize) -> f64,
    horizon: usize,
) -> Result<OperatorOutput, TabularError> {
    let p = propagate(mdp, pi, eta, q, lambda_fn, horizon, false)?;
    Ok(OperatorOutput { hq: p.hq, tail_bound: p.tail_bound })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub hq: DMatrix<f64>,
    pub q_pi: DMatrix<f64>,
    /// Indexed by start pair `s * A + a`; each entry is an `S x A` table over `(y, b)`.
    pub w: Vec<DMatrix<f64>>,
    pub xi: DMatrix<f64>,
    /// `true` where every `w_{y,b}(s,a) >= 0`.
    pub nonnegative: DMatrix<bool>,
    /// `||HQ - Q^pi|| / ||Q - Q^pi||` (sup norms); absent when `Q = Q^pi`.
    pub ratio: Option<f64>,
    pub q_error: f64,
    pub tail_bound: f64,
    /// Slack used by the per-cell check: operator tail, omitted coefficient tail and rounding.
    pub allowance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellCheck {
    pub state: usize,
    pub action: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub nonnegative: bool,
}

impl ContractionReport {
    /// Every cell's `|HQ - Q^pi|` against `xi * ||Q - Q^pi||`.
    pub fn cells(&self) -> Vec<CellCheck> {
        let (ns, na) = self.hq.shape();
        let mut out = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for a in 0..na {
                out.push(CellCheck {
                    state: s,
                    action: a,
                    lhs: (self.hq[(s, a)] - self.q_pi[(s, a)]).abs(),
                    rhs: self.xi[(s, a)] * self.q_error,
                    nonnegative: self.nonnegative[(s, a)],
                });
            }
        }
        out
    }

    /// Cells with all coefficients non-negative where the bound fails by more than the allowance.
    pub fn violations(&self) -> Vec<CellCheck> {
        self.cells()
            .into_iter()
            .filter(|c| c.nonnegative && c.lhs > c.rhs + self.allowance)
            .collect()
    }

    pub fn negative_cells(&self) -> usize {
        self.nonnegative.iter().filter(|f| !**f).count()
    }

    pub fn min_w(&self) -> f64 {
        self.w.iter().flat_map(|m| m.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    pub fn max_xi(&self) -> f64 {
        self.xi.max()
    }

    /// CSV with one row per `(s, a)`: state,action,xi,nonnegative,lhs,rhs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,action,xi,nonnegative,abs_error,bound\n");
        for c in self.cells() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.state, c.action, self.xi[(c.state, c.action)], c.nonnegative, c.lhs, c.rhs
            );
        }
        out
    }
}

/// Computes the operator, the exact fixed point and the measured coefficients.
pub fn contraction_audit(
    mdp: &FiniteMdp,
    pi: &TabularPolicy,
    eta: &TabularPolicy,
    q: &DMatrix<f64>,
    lambda_fn: &dyn Fn(usize, usize, usize) -> f64,
    horizon: usize,
) -> Result<ContractionReport, TabularError> {
    let prop = propagate(mdp, pi, eta, q, lambda_fn, horizon, true)?;
    let q_pi = exact_q(mdp, pi)?;
    let w = prop.w.expect("coefficients requested");
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let xi = DMatrix::from_fn(ns, na, |s, a| w[s * na + a].sum());
    let nonnegative = DMatrix::from_fn(ns, na, |s, a| w[s * na + a].iter().all(|v| *v >= 0.0));
    let q_error = (q - &q_pi).amax();
    let h_error = (&prop.hq - &q_pi).amax();
    let ratio = (q_error > 0.0).then(|| h_error / q_error);
    let g = mdp.gamma;
    // terms past the horizon: the operator's own tail, plus coefficients with
    // |pi - eta lambda| <= 1 summed over actions at most twice per step
    let coefficient_tail = 2.0 * g.powi(horizon as i32 + 1) / (1.0 - g) * q_error;
    let scale = q.amax().max(q_pi.amax()).max(1.0);
    let allowance = prop.tail_bound + coefficient_tail + 1e-9 * scale;
    Ok(ContractionReport {
        hq: prop.hq,
        q_pi,
        w,
        xi,
        nonnegative,
        ratio,
        q_error,
        tail_bound: prop.tail_bound,
        allowance,
    })
}

/// `gamma^(T+1) * 2 max|R| / (1 - gamma)^2`, the fixed-point truncation bound.
pub fn fixed_point_truncation_bound(mdp: &FiniteMdp, horizon: usize) -> f64 {
    let g = mdp.gamma;
    g.powi(horizon as i32 + 1) * 2.0 * mdp.max_abs_reward() / ((1.0 - g) * (1.0 - g))
}
