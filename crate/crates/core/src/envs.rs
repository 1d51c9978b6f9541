//! Small continuous-control environments with an episodic interface.
//!
//! * `lqr1d`: `x' = a x + b u`, reward `-(q x^2 + r u^2)`, `x0 ~ U[-1, 1]`, 200 steps.
//! * `pendulum`: swing-up of a uniform rod, angle 0 upright, observation
//!   `(cos, sin, angular velocity)`, reward `-(angle^2 + 0.1 vel^2 + 0.001 u^2)`,
//!   initial angle `U[-pi, pi]`, velocity `U[-1, 1]`, 200 steps.
//! * `pointmass2d`: double integrator driven toward a random goal, state
//!   `(x, y, vx, vy, gx, gy)`, reward `-|p - g| - 0.01 |u|^2`, 100 steps.
//!
//! All episodes end by truncation at the step limit; none has a terminal state.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
    #[error("{env}: unknown parameter {key:?}")]
    UnknownParam { env: String, key: String },
    #[error("{0}")]
    InvalidParam(String),
    #[error("action must have {expected} finite entries, got {got:?}")]
    InvalidAction { expected: usize, got: Vec<f64> },
    #[error("step called before reset or after the episode ended")]
    NotRunning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
    pub params: BTreeMap<String, f64>,
    pub reward: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Terminal state reached (bootstrap must be masked).
    pub done: bool,
    /// Episode cut by the step limit.
    pub truncated: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;

    /// Riccati solution, for environments that have one.
    fn analytic_optimum(&self) -> Option<LqrOptimum> {
        None
    }

    /// Optimal episode return from an initial state, when known.
    fn optimal_return(&self, _initial_state: &[f64]) -> Option<f64> {
        None
    }
}

/// Checks the action, clipping it into bounds (logging the first clip).
fn clip_action(spec: &EnvSpec, action: &[f64], warned: &mut bool) -> Result<Vec<f64>, EnvError> {
    if action.len() != spec.action_dim || action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::InvalidAction { expected: spec.action_dim, got: action.to_vec() });
    }
    let clipped: Vec<f64> = action
        .iter()
        .zip(spec.action_low.iter().zip(&spec.action_high))
        .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
        .collect();
    if !*warned && clipped != action {
        log::warn!("{}: action {:?} clipped to bounds", spec.name, action);
        *warned = true;
    }
    Ok(clipped)
}

fn resolve_params(
    env: &str,
    defaults: &[(&str, f64)],
    overrides: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, EnvError> {
    let mut params: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) => *slot = *v,
            None => return Err(EnvError::UnknownParam { env: env.into(), key: k.clone() }),
        }
    }
    if let Some((k, v)) = params.iter().find(|(_, v)| !v.is_finite()) {
        return Err(EnvError::InvalidParam(format!("{env}: {k} = {v} is not finite")));
    }
    Ok(params)
}

pub const ENV_NAMES: [&str; 3] = ["lqr1d", "pendulum", "pointmass2d"];

/// Builds an environment by name with parameter overrides.
pub fn make_env(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Box<dyn Environment>, EnvError> {
    Ok(match name {
        "lqr1d" => Box::new(Lqr1d::new(overrides)?),
        "pendulum" => Box::new(Pendulum::new(overrides)?),
        "pointmass2d" => Box::new(PointMass2d::new(overrides)?),
        other => return Err(EnvError::UnknownEnv(other.into())),
    })
}

/// Riccati solution for the scalar linear-quadratic regulator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqrOptimum {
    /// Stationary gain, `u = -gain * x`.
    pub gain: f64,
    /// Stationary value coefficient, cost-to-go `value * x^2`.
    pub value: f64,
    /// Finite-horizon cost-to-go coefficients `P_0..P_T` (`P_T = 0`).
    pub horizon_values: Vec<f64>,
    /// Finite-horizon gains `K_0..K_{T-1}`.
    pub horizon_gains: Vec<f64>,
}

impl LqrOptimum {
    /// Best achievable episode return from `x0`.
    pub fn optimal_return(&self, x0: f64) -> f64 {
        -self.horizon_values[0] * x0 * x0
    }
}

/// `P <- q + a^2 P - (a b P)^2 / (r + b^2 P)`.
fn riccati_step(p: f64, a: f64, b: f64, q: f64, r: f64) -> f64 {
    q + a * a * p - (a * b * p).powi(2) / (r + b * b * p)
}

pub fn lqr_optimum(a: f64, b: f64, q: f64, r: f64, horizon: usize) -> LqrOptimum {
    let mut p = q;
    for _ in 0..100_000 {
        let next = riccati_step(p, a, b, q, r);
        let done = (next - p).abs() <= 1e-15 * next.abs().max(1.0);
        p = next;
        if done {
            break;
        }
    }
    let gain = a * b * p / (r + b * b * p);
    let mut values = vec![0.0; horizon + 1];
    let mut gains = vec![0.0; horizon];
    for t in (0..horizon).rev() {
        let next = values[t + 1];
        gains[t] = a * b * next / (r + b * b * next);
        values[t] = riccati_step(next, a, b, q, r);
    }
    LqrOptimum { gain, value: p, horizon_values: values, horizon_gains: gains }
}

#[derive(Debug, Clone)]
pub struct Lqr1d {
    spec: EnvSpec,
    x: f64,
    t: usize,
    running: bool,
    warned: bool,
}

impl Lqr1d {
    const DEFAULTS: [(&'static str, f64); 6] =
        [("a_dyn", 1.0), ("b_dyn", 1.0), ("q", 1.0), ("r_cost", 1.0), ("action_bound", 1.0), ("max_steps", 200.0)];

    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self, EnvError> {
        let params = resolve_params("lqr1d", &Self::DEFAULTS, overrides)?;
        let bound = params["action_bound"];
        if bound <= 0.0 || params["q"] < 0.0 || params["r_cost"] <= 0.0 {
            return Err(EnvError::InvalidParam("lqr1d needs action_bound > 0, q >= 0, r_cost > 0".into()));
        }
        let spec = EnvSpec {
            name: "lqr1d".into(),
            state_dim: 1,
            action_dim: 1,
            action_low: vec![-bound],
            action_high: vec![bound],
            max_steps: max_steps(&params)?,
            params,
            reward: "-(q x^2 + r_cost u^2)".into(),
        };
        Ok(Self { spec, x: 0.0, t: 0, running: false, warned: false })
    }

    fn p(&self, k: &str) -> f64 {
        self.spec.params[k]
    }

    /// Places the system at `x` and starts a fresh episode.
    pub fn reset_to(&mut self, x: f64) -> Vec<f64> {
        self.x = x;
        self.t = 0;
        self.running = true;
        vec![x]
    }
}

fn max_steps(params: &BTreeMap<String, f64>) -> Result<usize, EnvError> {
    let m = params["max_steps"];
    if m < 1.0 || m.fract() != 0.0 {
        return Err(EnvError::InvalidParam(format!("max_steps must be a positive integer, got {m}")));
    }
    Ok(m as usize)
}

impl Environment for Lqr1d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn analytic_optimum(&self) -> Option<LqrOptimum> {
        Some(lqr_optimum(self.p("a_dyn"), self.p("b_dyn"), self.p("q"), self.p("r_cost"), self.spec.max_steps))
    }

    fn optimal_return(&self, initial_state: &[f64]) -> Option<f64> {
        self.analytic_optimum().map(|o| o.optimal_return(initial_state[0]))
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let x = ChaCha8Rng::seed_from_u64(seed).random_range(-1.0..=1.0);
        self.reset_to(x)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.running {
            return Err(EnvError::NotRunning);
        }
        let u = clip_action(&self.spec, action, &mut self.warned)?[0];
        let reward = -(self.p("q") * self.x * self.x + self.p("r_cost") * u * u);
        self.x = self.p("a_dyn") * self.x + self.p("b_dyn") * u;
        self.t += 1;
        let truncated = self.t >= self.spec.max_steps;
        self.running = !truncated;
        Ok(StepResult { next_state: vec![self.x], reward, done: false, truncated })
    }
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    t: usize,
    running: bool,
    warned: bool,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    const DEFAULTS: [(&'static str, f64); 8] = [
        ("gravity", 10.0),
        ("mass", 1.0),
        ("length", 1.0),
        ("damping", 0.0),
        ("max_torque", 2.0),
        ("dt", 0.05),
        ("substeps", 1000.0),
        ("max_steps", 200.0),
    ];

    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self, EnvError> {
        let params = resolve_params("pendulum", &Self::DEFAULTS, overrides)?;
        let positive = ["gravity", "mass", "length", "max_torque", "dt", "substeps"];
        if positive.iter().any(|k| params[*k] <= 0.0) || params["damping"] < 0.0 || params["substeps"].fract() != 0.0 {
            return Err(EnvError::InvalidParam("pendulum parameters must be positive (damping >= 0)".into()));
        }
        let tm = params["max_torque"];
        let spec = EnvSpec {
            name: "pendulum".into(),
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-tm],
            action_high: vec![tm],
            max_steps: max_steps(&params)?,
            params,
            reward: "-(angle^2 + 0.1 vel^2 + 0.001 u^2)".into(),
        };
        Ok(Self { spec, theta: 0.0, omega: 0.0, t: 0, running: false, warned: false })
    }

    fn p(&self, k: &str) -> f64 {
        self.spec.params[k]
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }

    /// `(angle, angular velocity)`; the angle is not wrapped.
    pub fn physical_state(&self) -> (f64, f64) {
        (self.theta, self.omega)
    }

    pub fn reset_to(&mut self, theta: f64, omega: f64) -> Vec<f64> {
        self.theta = theta;
        self.omega = omega;
        self.t = 0;
        self.running = true;
        self.observe()
    }

    /// Kinetic plus potential energy of the rod about its pivot.
    pub fn energy(&self) -> f64 {
        let (m, l, g) = (self.p("mass"), self.p("length"), self.p("gravity"));
        m * l * l / 6.0 * self.omega * self.omega + m * g * l / 2.0 * self.theta.cos()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = rng.random_range(-PI..=PI);
        let omega = rng.random_range(-1.0..=1.0);
        self.reset_to(theta, omega)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.running {
            return Err(EnvError::NotRunning);
        }
        let u = clip_action(&self.spec, action, &mut self.warned)?[0];
        let angle = normalize_angle(self.theta);
        let reward = -(angle * angle + 0.1 * self.omega * self.omega + 0.001 * u * u);
        let (m, l, g, c) = (self.p("mass"), self.p("length"), self.p("gravity"), self.p("damping"));
        let n = self.p("substeps") as usize;
        let h = self.p("dt") / n as f64;
        let k_grav = 3.0 * g / (2.0 * l);
        let k_torque = 3.0 / (m * l * l);
        for _ in 0..n {
            // semi-implicit Euler: velocity first, then position with the new velocity
            self.omega += h * (k_grav * self.theta.sin() + k_torque * (u - c * self.omega));
            self.theta += h * self.omega;
        }
        self.t += 1;
        let truncated = self.t >= self.spec.max_steps;
        self.running = !truncated;
        Ok(StepResult { next_state: self.observe(), reward, done: false, truncated })
    }
}

#[derive(Debug, Clone)]
pub struct PointMass2d {
    spec: EnvSpec,
    state: [f64; 6],
    t: usize,
    running: bool,
    warned: bool,
}

impl PointMass2d {
    const DEFAULTS: [(&'static str, f64); 4] = [("dt", 0.1), ("damping", 0.0), ("action_bound", 1.0), ("max_steps", 100.0)];

    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self, EnvError> {
        let params = resolve_params("pointmass2d", &Self::DEFAULTS, overrides)?;
        if params["dt"] <= 0.0 || params["action_bound"] <= 0.0 || params["damping"] < 0.0 {
            return Err(EnvError::InvalidParam("pointmass2d needs dt > 0, action_bound > 0, damping >= 0".into()));
        }
        let b = params["action_bound"];
        let spec = EnvSpec {
            name: "pointmass2d".into(),
            state_dim: 6,
            action_dim: 2,
            action_low: vec![-b; 2],
            action_high: vec![b; 2],
            max_steps: max_steps(&params)?,
            params,
            reward: "-|p - goal| - 0.01 |u|^2".into(),
        };
        Ok(Self { spec, state: [0.0; 6], t: 0, running: false, warned: false })
    }
}

impl Environment for PointMass2d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random_range(-1.0..=1.0);
        self.state = [u(), u(), 0.0, 0.0, u(), u()];
        self.t = 0;
        self.running = true;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.running {
            return Err(EnvError::NotRunning);
        }
        let a = clip_action(&self.spec, action, &mut self.warned)?;
        let (dt, c) = (self.spec.params["dt"], self.spec.params["damping"]);
        let s = &mut self.state;
        let dist = ((s[0] - s[4]).powi(2) + (s[1] - s[5]).powi(2)).sqrt();
        let reward = -dist - 0.01 * (a[0] * a[0] + a[1] * a[1]);
        for k in 0..2 {
            s[2 + k] += dt * (a[k] - c * s[2 + k]);
            s[k] += dt * s[2 + k];
        }
        self.t += 1;
        let truncated = self.t >= self.spec.max_steps;
        self.running = !truncated;
        Ok(StepResult { next_state: self.state.to_vec(), reward, done: false, truncated })
    }
}
