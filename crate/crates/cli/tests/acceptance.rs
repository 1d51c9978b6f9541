//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion (straight to stderr, so the lines survive output capture) and
//! fails if any criterion fails.
//!
//! The learning criterion trains 40 agents and dominates the runtime.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use offpoc::agents::{sample_coefficients, Agent, AgentConfig, AgentKind};
use offpoc::gaussian::{jsd, kl_divergence, JsdMethod, MultivariateGaussian};
use offpoc::nn::{Activation, Mlp, OutputHead};
use offpoc::offpoc::{
    deterministic_weight, stochastic_weights, DiagonalGaussianBatch, Divergence, JsdEstimator, OffPocConfig, WeightReport,
};
use offpoc::replay::{Batch, ReplayBuffer, SamplerKind, Transition};
use offpoc::stats::{mean, sample_variance};
use offpoc::tabular::{apply_operator, exact_q, fixed_point_truncation_bound, FiniteMdp, TabularPolicy};
use offpoc_cli::{cmd_train, cmd_weights, contract, ContractRequest, RunConfig, BUFFER_FILE, CHECKPOINT_FILE, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(msg: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{msg}");
    let _ = err.flush();
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// ---------------------------------------------------------------- criterion 1

fn normal_log_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // start from many panels so a narrow peak cannot slip between the first samples
    let panels = 400;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            recurse(f, lo, hi, fa, fm, fb, simpson(lo, hi, fa, fm, fb), tol / panels as f64, 40)
        })
        .sum()
}

/// Integration range holding all but a negligible tail of both densities.
fn support(p: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    let w = 14.0 * p.1.max(q.1);
    (p.0.min(q.0) - w, p.0.max(q.0) + w)
}

fn integrated_kl(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (a, b) = support(p, q);
    let f = |x: f64| {
        let (lp, lq) = (normal_log_pdf(x, p.0, p.1), normal_log_pdf(x, q.0, q.1));
        lp.exp() * (lp - lq)
    };
    adaptive_simpson(&f, a, b, 1e-12)
}

fn integrated_jsd(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (a, b) = support(p, q);
    let f = |x: f64| {
        let (lp, lq) = (normal_log_pdf(x, p.0, p.1), normal_log_pdf(x, q.0, q.1));
        let lm = (0.5 * lp.exp() + 0.5 * lq.exp()).ln();
        let mut v = 0.0;
        if lp.is_finite() && lp > -700.0 {
            v += 0.5 * lp.exp() * (lp - lm);
        }
        if lq.is_finite() && lq > -700.0 {
            v += 0.5 * lq.exp() * (lq - lm);
        }
        v
    };
    adaptive_simpson(&f, a, b, 1e-12)
}

/// Gaussian with exactly the given diagonal (no construction jitter), so the
/// closed forms and the integrals describe the same densities.
fn exact_diagonal(axes: &[(f64, f64)]) -> MultivariateGaussian {
    let mean = DVector::from_iterator(axes.len(), axes.iter().map(|a| a.0));
    let var = DVector::from_iterator(axes.len(), axes.iter().map(|a| a.1 * a.1));
    MultivariateGaussian::from_parts(mean, DMatrix::from_diagonal(&var), 0.0).unwrap()
}

fn criterion_divergences() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut axis = || (rng.random_range(-1.5..1.5), rng.random_range(0.3..2.0));
    let pairs = 24;
    let (mut kl_err, mut mc_err, mut mm_err, mut mm_within) = (0.0f64, 0.0f64, 0.0f64, 0);
    for k in 0..pairs {
        let (p, q) = (axis(), axis());
        let (gp, gq) = (exact_diagonal(&[p]), exact_diagonal(&[q]));
        kl_err = kl_err.max((kl_divergence(&gp, &gq).unwrap() - integrated_kl(p, q)).abs());
        let oracle = integrated_jsd(p, q);
        let mc = jsd(&gp, &gq, JsdMethod::MonteCarlo { sample_count: 100_000, seed: k }).unwrap();
        let mm = jsd(&gp, &gq, JsdMethod::MomentMatched).unwrap();
        mc_err = mc_err.max((mc - oracle).abs());
        mm_err = mm_err.max((mm - oracle).abs());
        mm_within += usize::from((mm - oracle).abs() <= 0.05);
    }
    // diagonal 2-D and 3-D pairs against the sum of per-axis integrals
    for k in 0..12 {
        let dim = 2 + k % 2;
        let p: Vec<(f64, f64)> = (0..dim).map(|_| axis()).collect();
        let q: Vec<(f64, f64)> = (0..dim).map(|_| axis()).collect();
        let oracle: f64 = p.iter().zip(&q).map(|(a, b)| integrated_kl(*a, *b)).sum();
        kl_err = kl_err.max((kl_divergence(&exact_diagonal(&p), &exact_diagonal(&q)).unwrap() - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: kl_err <= 1e-6 && mc_err <= 1e-2 && mm_err <= 0.05 && secs < 60.0,
        detail: format!(
            "{pairs} 1-D pairs + 12 diagonal pairs: KL max err {kl_err:.2e} (<= 1e-6); JSD Monte-Carlo max err {mc_err:.2e} (<= 1e-2); moment-matched max err {mm_err:.3} (<= 0.05), {mm_within}/{pairs} pairs within; {secs:.1}s"
        ),
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_weight_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut count, mut bad_range, mut bad_band, mut worst_exp) = (0usize, 0usize, 0usize, 0.0f64);
    let batches = 1000;
    for k in 0..batches {
        let divergence = if k % 4 == 3 { Divergence::Kl } else { Divergence::Jsd };
        let jsd_estimator = if k % 2 == 0 {
            JsdEstimator::MomentMatched
        } else {
            JsdEstimator::MonteCarlo { sample_count: 256 }
        };
        let cfg = OffPocConfig { exploration_std: rng.random_range(0.05..0.5), divergence, jsd_estimator };
        let b = rng.random_range(2..48);
        let n = rng.random_range(1..4);
        let report = if k % 2 == 0 {
            let scale = 10f64.powf(rng.random_range(-3.0..0.5));
            let bias = rng.random_range(-1.0..1.0) * scale;
            let current = Array2::from_shape_fn((b, n), |_| rng.random_range(-1.0..1.0));
            let stored = &current + &Array2::from_shape_fn((b, n), |_| bias + scale * rng.random_range(-1.0..1.0));
            deterministic_weight(current.view(), stored.view(), &cfg, k as u64).unwrap()
        } else {
            let mut params = || {
                let m = Array2::from_shape_fn((b, n), |_| rng.random_range(-2.0..2.0));
                let s = Array2::from_shape_fn((b, n), |_| 10f64.powf(rng.random_range(-1.5..0.5)));
                DiagonalGaussianBatch::new(m, s).unwrap()
            };
            let (cur, old) = (params(), params());
            stochastic_weights(&cur, &old, &cfg, k as u64).unwrap()
        };
        for (l, rho) in report.pairs() {
            count += 1;
            if !(l > 0.0 && l <= 1.0) {
                bad_range += 1;
            }
            if divergence == Divergence::Jsd && !(0.5..=1.0).contains(&l) {
                bad_band += 1;
            }
            worst_exp = worst_exp.max((l - (-rho).exp()).abs());
        }
    }
    Outcome {
        pass: bad_range == 0 && bad_band == 0 && worst_exp <= 1e-12,
        detail: format!(
            "{batches} batches, {count} weights: {bad_range} outside (0,1], {bad_band} JSD weights outside [0.5,1], max |lambda - exp(-rho)| = {worst_exp:.1e}"
        ),
    }
}

// ---------------------------------------------------------------- criterion 3

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn finite_difference(p: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..p.len())
        .map(|k| {
            let mut q = p.to_vec();
            q[k] += h;
            let up = f(&q);
            q[k] -= 2.0 * h;
            (up - f(&q)) / (2.0 * h)
        })
        .collect()
}

fn worst_rel(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic.iter().zip(fd).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max)
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, with_params: bool) -> Batch {
    let mut m = |r: usize, c: usize, lo: f64, hi: f64| Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi));
    let states = m(b, 3, -1.0, 1.0);
    let actions = m(b, 2, -0.9, 0.9);
    let next_states = m(b, 3, -1.0, 1.0);
    let rewards = m(b, 1, -1.0, 1.0).column(0).to_owned();
    let dones = ndarray::Array1::from_shape_fn(b, |i| f64::from(u8::from(i % 4 == 0)));
    let (policy_mean, policy_std) = if with_params { (Some(m(b, 2, -0.5, 0.5)), Some(m(b, 2, 0.2, 1.0))) } else { (None, None) };
    Batch { states, actions, rewards, next_states, dones, policy_mean, policy_std, birth_steps: (0..b as u64).collect() }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |name: &str, e: f64| {
        let w = worst.entry(name.to_string()).or_insert(0.0);
        *w = w.max(e);
    };

    // every head, both activations: parameters and inputs
    let heads = [
        ("identity", OutputHead::Identity, 2, 2),
        ("tanh-scaled", OutputHead::TanhScaled { low: vec![-2.0, 0.0], high: vec![1.0, 3.0] }, 2, 2),
        ("gaussian", OutputHead::gaussian(), 2, 4),
    ];
    // the gaussian head emits a mean and a log-std per action dimension
    for (name, head, dim, out) in heads {
        for act in [Activation::Relu, Activation::Tanh] {
            let net = Mlp::new(&[3, 12, 10, dim], act, head.clone(), 17).unwrap();
            let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
            let c = Array2::from_shape_fn((6, out), |_| rng.random_range(-1.0..1.0));
            let (_, cache) = net.forward(x.view()).unwrap();
            let (g, gin) = net.backward(&cache, c.view()).unwrap();
            let loss = |p: &[f64]| {
                let mut n = net.clone();
                n.set_flat_params(p).unwrap();
                (&n.predict(x.view()).unwrap() * &c).sum()
            };
            note(&format!("{name} head params"), worst_rel(&g.flatten(), &finite_difference(&net.flat_params(), &loss)));
            let xs: Vec<f64> = x.iter().copied().collect();
            let input_loss = |v: &[f64]| {
                let xi = Array2::from_shape_vec((6, 3), v.to_vec()).unwrap();
                (&net.predict(xi.view()).unwrap() * &c).sum()
            };
            note(&format!("{name} head inputs"), worst_rel(&gin.iter().copied().collect::<Vec<_>>(), &finite_difference(&xs, &input_loss)));
        }
    }

    // weighted critic and actor objectives for both agents
    let b = 8;
    for kind in [AgentKind::Deterministic, AgentKind::Stochastic] {
        let cfg = AgentConfig {
            hidden: vec![12, 12],
            batch_size: b,
            final_layer_scale: 1.0,
            entropy_bonus: if kind == AgentKind::Stochastic { 0.1 } else { 0.0 },
            ..Default::default()
        };
        let agent = Agent::new(kind, cfg, 3, &[-1.0, -1.0], &[1.0, 1.0], 23).unwrap();
        let batch = random_batch(&mut rng, b, true);
        let report = match kind {
            AgentKind::Deterministic => WeightReport::Deterministic { lambda: 0.73, rho: -(0.73f64).ln() },
            AgentKind::Stochastic => {
                let l: Vec<f64> = (0..b).map(|_| rng.random_range(0.5..1.0)).collect();
                WeightReport::Stochastic { rho: l.iter().map(|v| -v.ln()).collect(), lambda: l }
            }
        };
        let coefs = sample_coefficients(Some(&report), None, b).unwrap();
        let noise = Array2::from_shape_fn((b, 2), |_| rng.random_range(-1.5..1.5));
        let y = agent.td_targets(&batch, noise.view()).unwrap().to_vec();
        let (_, _, g) = agent.critic_loss_grad(0, &batch, &y, &coefs.critic).unwrap();
        let critic_loss = |p: &[f64]| {
            let mut a = agent.clone();
            let mut net = a.critics()[0].clone();
            net.set_flat_params(p).unwrap();
            a.set_critic(0, net).unwrap();
            a.critic_loss_grad(0, &batch, &y, &coefs.critic).unwrap().0
        };
        let fd = finite_difference(&agent.critics()[0].flat_params(), &critic_loss);
        note(&format!("{} weighted critic loss", kind.name()), worst_rel(&g.flatten(), &fd));
        let (_, g) = agent.actor_objective_grad(batch.states.view(), noise.view(), &coefs.policy).unwrap();
        let actor_loss = |p: &[f64]| {
            let mut a = agent.clone();
            let mut net = a.actor().clone();
            net.set_flat_params(p).unwrap();
            a.set_actor(net).unwrap();
            -a.actor_objective_grad(batch.states.view(), noise.view(), &coefs.policy).unwrap().0
        };
        let fd = finite_difference(&agent.actor().flat_params(), &actor_loss);
        note(&format!("{} weighted actor objective", kind.name()), worst_rel(&g.flatten(), &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let (name, _) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    Outcome {
        pass: max < 1e-4 && secs < 120.0,
        detail: format!("{} gradient checks, worst relative error {max:.1e} ({name}); {secs:.1}s", worst.len()),
    }
}

// ---------------------------------------------------------------- criteria 4, 5

struct Suite {
    mdps: Vec<(FiniteMdp, TabularPolicy, TabularPolicy, String, String)>,
}

fn mdp_suite() -> Suite {
    let mdps = (0..50u64)
        .map(|m| {
            let (s, a) = (2 + (m % 5) as usize, 2 + (m % 3) as usize);
            let mdp = FiniteMdp::random(s, a, 0.9, 1000 + m).unwrap();
            let (pi, eta) = (format!("random:{}", 2000 + m), format!("random:{}", 3000 + m));
            let p = TabularPolicy::from_spec(&pi, s, a).unwrap();
            let e = TabularPolicy::from_spec(&eta, s, a).unwrap();
            (mdp, p, e, pi, eta)
        })
        .collect();
    Suite { mdps }
}

fn criterion_fixed_point(suite: &Suite) -> Outcome {
    let start = Instant::now();
    let horizon = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut fixed_fail, mut zero_fail, mut onpolicy_fail) = (0, 0, 0);
    let (mut worst_fixed, mut worst_onpolicy) = (0.0f64, 0.0f64);
    let constant = |c: f64| move |_: usize, _: usize, _: usize| c;
    for (mdp, pi, eta, _, _) in &suite.mdps {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let q_pi = exact_q(mdp, pi).unwrap();
        let bound = fixed_point_truncation_bound(mdp, horizon);
        let sim = offpoc::tabular::LambdaProfile::PolicySimilarity.table(pi, eta);
        let sim_fn = move |_: usize, s: usize, a: usize| sim[(s, a)];
        let profiles: [&dyn Fn(usize, usize, usize) -> f64; 4] = [&constant(0.0), &constant(0.5), &constant(1.0), &sim_fn];
        for lambda in profiles {
            let out = apply_operator(mdp, pi, eta, &q_pi, lambda, horizon).unwrap();
            let err = (&out.hq - &q_pi).amax();
            worst_fixed = worst_fixed.max(err / bound);
            fixed_fail += usize::from(err > bound);
        }
        let scale = mdp.max_abs_reward() / (1.0 - mdp.gamma());
        for _ in 0..3 {
            let q = DMatrix::from_fn(ns, na, |_, _| rng.random_range(-2.0 * scale..=2.0 * scale));
            let zero = apply_operator(mdp, pi, eta, &q, &constant(0.0), horizon).unwrap();
            zero_fail += usize::from(zero.hq != q);
            let one = apply_operator(mdp, pi, pi, &q, &constant(1.0), horizon).unwrap();
            let err = (&one.hq - &q_pi).amax();
            worst_onpolicy = worst_onpolicy.max(err / bound);
            onpolicy_fail += usize::from(err > bound);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: fixed_fail == 0 && zero_fail == 0 && onpolicy_fail == 0 && secs < 120.0,
        detail: format!(
            "50 MDPs: fixed point {fixed_fail} failures (worst err/bound {worst_fixed:.1e}); lambda=0 identity {zero_fail} inexact; on-policy lambda=1 {onpolicy_fail} failures (worst err/bound {worst_onpolicy:.1e}); {secs:.1}s"
        ),
    }
}

fn criterion_audit(suite: &Suite) -> Outcome {
    let (mut violations, mut negative_cells, mut exceed, mut cells) = (0, 0, 0, 0);
    for (k, (mdp, _, _, pi, eta)) in suite.mdps.iter().enumerate() {
        for (lambda, eta) in [("similarity", eta), ("ratio", eta), ("const:0.5", eta), ("one", eta), ("one", pi)] {
            let out = contract(&ContractRequest {
                mdp: mdp.clone(),
                pi: pi.clone(),
                eta: eta.clone(),
                lambda: lambda.into(),
                horizon: 200,
                trials: 3,
                seed: k as u64,
            })
            .unwrap();
            violations += out.summary.violations;
            negative_cells += out.summary.negative_cells;
            exceed += out.summary.negative_cell_exceedances;
            cells += mdp.n_states() * mdp.n_actions();
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!(
            "{cells} audited cells x 3 Q draws: {violations} violations on all-nonnegative cells; {negative_cells} cells with negative coefficients (bound exceeded on {exceed} of those cell draws)"
        ),
    }
}

// ---------------------------------------------------------------- criteria 6, 7

struct Run {
    final_mean: f64,
    optimal: Option<f64>,
    dir: PathBuf,
}

fn train_run(config: &str, offpoc: bool, seed: u64, root: &Path) -> Run {
    let overrides = vec![("seed".to_string(), seed.to_string()), ("offpoc.enabled".to_string(), offpoc.to_string())];
    let cfg = RunConfig::load(&configs_dir().join(config), &overrides).unwrap();
    let dir = root.join(format!("{}-{}-{seed}", config.trim_end_matches(".toml"), if offpoc { "on" } else { "off" }));
    let outcome = cmd_train(&cfg, &dir).unwrap();
    let e = outcome.summary.final_evaluation.expect("final evaluation");
    Run { final_mean: e.mean, optimal: e.optimal_mean, dir }
}

fn criterion_learning(root: &Path) -> (Outcome, BTreeMap<String, PathBuf>) {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for config in ["lqr1d.toml", "lqr1d-stochastic.toml"] {
        for offpoc in [false, true] {
            let ratios: Vec<f64> = (0..5)
                .map(|s| {
                    let r = train_run(config, offpoc, s, root);
                    r.final_mean / r.optimal.expect("lqr optimum")
                })
                .collect();
            let ok = ratios.iter().all(|r| (r - 1.0).abs() <= 0.1);
            pass &= ok;
            let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
            lines.push(format!("{config} offpoc={offpoc}: return/optimum [{}]", shown.join(", ")));
        }
    }
    let mut saved = BTreeMap::new();
    for config in ["pendulum.toml", "pendulum-stochastic.toml"] {
        let mut means = BTreeMap::new();
        for offpoc in [false, true] {
            let finals: Vec<f64> = (0..5)
                .map(|s| {
                    let r = train_run(config, offpoc, s, root);
                    if offpoc && s == 0 {
                        saved.insert(config.to_string(), r.dir.clone());
                    }
                    r.final_mean
                })
                .collect();
            means.insert(offpoc, finals);
        }
        let (off, on) = (&means[&false], &means[&true]);
        let pooled = (0.5 * (sample_variance(off) + sample_variance(on))).sqrt();
        let ok = mean(on) >= mean(off) - pooled;
        pass &= ok;
        lines.push(format!(
            "{config}: offpoc mean {:.1} vs disabled {:.1} - pooled std {pooled:.1} = {:.1}",
            mean(on),
            mean(off),
            mean(off) - pooled
        ));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    pass &= mins < 30.0;
    (Outcome { pass, detail: format!("{}; {mins:.1} min", lines.join("; ")) }, saved)
}

fn criterion_weight_trace(saved: &BTreeMap<String, PathBuf>) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (config, dir) in saved {
        let out = dir.join("weights");
        let trace = cmd_weights(&dir.join(BUFFER_FILE), &dir.join(CHECKPOINT_FILE), 256, 1000, 0, &out).unwrap();
        let rho = trace.spearman.unwrap_or(f64::NAN);
        pass &= rho > 0.8;
        parts.push(format!("{config}: spearman {rho:.3} over {} windows", trace.rows.len()));
    }
    pass &= saved.len() == 2;
    Outcome { pass, detail: parts.join("; ") }
}

// ---------------------------------------------------------------- criterion 8

fn transition(t: u64) -> Transition {
    Transition {
        state: vec![t as f64],
        action: vec![0.0],
        reward: 0.0,
        next_state: vec![t as f64 + 1.0],
        done: false,
        policy_params: None,
        birth_step: t,
    }
}

fn criterion_samplers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    // CER: the newest transition is in every batch, while filling and once full
    let mut cer = ReplayBuffer::new(300, SamplerKind::Cer).unwrap();
    let mut cer_miss = 0;
    let mut cer_batches = 0;
    for t in 0..1000u64 {
        cer.push(transition(t)).unwrap();
        if cer.len() >= 32 {
            for _ in 0..3 {
                let idx = cer.sample(32, &mut rng).unwrap();
                let batch = cer.gather(&idx.indices).unwrap();
                cer_batches += 1;
                cer_miss += usize::from(!batch.birth_steps.contains(&t));
            }
        }
    }
    // PER with equal priorities: chi-square against uniform
    let n = 50;
    let mut per = ReplayBuffer::new(n, SamplerKind::per_default()).unwrap();
    for t in 0..n as u64 {
        per.push(transition(t)).unwrap();
    }
    let draws = 100_000;
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[per.sample(1, &mut rng).unwrap().indices[0]] += 1;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    // FIFO eviction
    let mut fifo = ReplayBuffer::new(100, SamplerKind::Uniform).unwrap();
    for t in 0..250u64 {
        fifo.push(transition(t)).unwrap();
    }
    let kept: Vec<u64> = fifo.iter().map(|t| t.birth_step).collect();
    let fifo_ok = kept == (150..250).collect::<Vec<_>>();
    Outcome {
        pass: cer_miss == 0 && p > 0.01 && fifo_ok,
        detail: format!(
            "CER newest missing from {cer_miss}/{cer_batches} batches; PER equal priorities chi2 {chi2:.1} (49 dof) p = {p:.3}; FIFO eviction exact: {fifo_ok}"
        ),
    }
}

// ---------------------------------------------------------------- criterion 9

fn criterion_determinism(root: &Path) -> Outcome {
    let cases: [(&str, &[(&str, &str)]); 4] = [
        ("lqr1d.toml", &[("offpoc.enabled", "true"), ("buffer.sampler", "per")]),
        ("lqr1d-stochastic.toml", &[("offpoc.enabled", "true"), ("offpoc.jsd_estimator", "monte-carlo")]),
        ("pendulum.toml", &[("offpoc.enabled", "true"), ("buffer.sampler", "cer"), ("offpoc.jsd_estimator", "monte-carlo")]),
        ("pendulum-stochastic.toml", &[("offpoc.enabled", "true"), ("learner.twin_critics", "true")]),
    ];
    let mut identical = 0;
    for (k, (config, extra)) in cases.iter().enumerate() {
        let mut overrides: Vec<(String, String)> =
            vec![("seed".into(), "11".into()), ("train.total_steps".into(), "4000".into()), ("train.eval_interval".into(), "1000".into())];
        overrides.extend(extra.iter().map(|(a, b)| (a.to_string(), b.to_string())));
        let cfg = RunConfig::load(&configs_dir().join(config), &overrides).unwrap();
        let bytes: Vec<Vec<u8>> = (0..2)
            .map(|r| {
                let dir = root.join(format!("det-{k}-{r}"));
                cmd_train(&cfg, &dir).unwrap();
                std::fs::read(dir.join(METRICS_FILE)).unwrap()
            })
            .collect();
        identical += usize::from(!bytes[0].is_empty() && bytes[0] == bytes[1]);
    }
    Outcome { pass: identical == cases.len(), detail: format!("{identical}/{} configs produced byte-identical metrics twice", cases.len()) }
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        line(&format!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((n, o.pass));
    };
    report(1, "divergence oracles", criterion_divergences());
    report(2, "weight bounds", criterion_weight_bounds());
    report(3, "gradient correctness", criterion_gradients());
    let suite = mdp_suite();
    report(4, "operator fixed point", criterion_fixed_point(&suite));
    report(5, "per-cell contraction audit", criterion_audit(&suite));
    let (learning, saved) = criterion_learning(tmp.path());
    report(6, "desk-scale learning", learning);
    report(7, "weight-trace monotonicity", criterion_weight_trace(&saved));
    report(8, "sampler properties", criterion_samplers());
    report(9, "determinism", criterion_determinism(tmp.path()));
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
