//! The four subcommands as library functions; `main` only parses arguments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use offpoc::agents::{evaluate, evaluation_seeds, train, Agent, AgentKind, EvaluationSummary, TrainSummary};
use offpoc::envs::make_env;
use offpoc::metrics::{to_json_line, JsonlSink, MetricsRecord};
use offpoc::nn::Checkpoint;
use offpoc::offpoc::{JsdEstimator, OffPocConfig, Variant};
use offpoc::replay::ReplayBuffer;
use offpoc::stats::{derive_seed, min_max_normalize, spearman};
use offpoc::tabular::{contraction_audit, FiniteMdp, LambdaProfile, TabularPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EnvSection, RunConfig};
use crate::CliError;

pub const LOCKFILE: &str = "config.lock.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BUFFER_FILE: &str = "buffer.bin";
pub const LOG_FILE: &str = "run.log";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Timestamped lines for the sidecar log; nothing else carries wall-clock time.
struct RunLog(File);

impl RunLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        File::create(path).map(RunLog).map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
    }

    fn line(&mut self, msg: &str) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let _ = writeln!(self.0, "[{}.{:03}] {msg}", now.as_secs(), now.subsec_millis());
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub summary: TrainSummary,
}

/// Trains per `cfg`, writing the lockfile, metrics, checkpoint, buffer
/// snapshot and log into `out_dir`. On a training fault the artifacts
/// reached so far are still written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    let mut locked = cfg.clone();
    locked.output_dir = Some(out_dir.to_path_buf());
    write_file(&out_dir.join(LOCKFILE), locked.to_toml().as_bytes())?;
    let mut log = RunLog::create(&out_dir.join(LOG_FILE))?;
    log.line(&format!("train start: agent {} env {} seed {}", cfg.agent.name(), cfg.env.name, cfg.seed));

    let mut env = make_env(&cfg.env.name, &cfg.env.params).map_err(runtime)?;
    let mut eval_env = make_env(&cfg.env.name, &cfg.env.params).map_err(runtime)?;
    let spec = env.spec().clone();
    let mut agent = Agent::new(cfg.agent, cfg.agent_config(), spec.state_dim, &spec.action_low, &spec.action_high, cfg.seed)
        .map_err(runtime)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer.capacity, cfg.buffer.sampler_kind()).map_err(runtime)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| CliError::Runtime(format!("creating {}: {e}", metrics_path.display())))?;
    let mut sink = JsonlSink::new(BufWriter::new(file));

    let result = train(&mut agent, env.as_mut(), eval_env.as_mut(), &mut buffer, &cfg.train, cfg.seed, &mut sink);
    sink.into_inner().flush().map_err(runtime)?;

    let extra = serde_json::json!({
        "env": { "name": cfg.env.name, "params": cfg.env.params },
        "seed": cfg.seed,
        "complete": result.is_ok(),
        "steps": result.as_ref().map(|s| s.steps).unwrap_or(0),
    });
    agent.to_checkpoint(extra).save(&out_dir.join(CHECKPOINT_FILE)).map_err(runtime)?;
    buffer.save(&out_dir.join(BUFFER_FILE)).map_err(runtime)?;
    match result {
        Ok(summary) => {
            log.line(&format!("train done: {} steps, {} updates, {} episodes", summary.steps, summary.updates, summary.episodes));
            Ok(TrainOutcome { dir: out_dir.to_path_buf(), summary })
        }
        Err(e) => {
            log.line(&format!("train failed: {e}"));
            Err(CliError::Runtime(format!("training failed: {e} (partial artifacts in {})", out_dir.display())))
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Agent, serde_json::Value), CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
    let agent = Agent::from_checkpoint(&ck).map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
    let extra = ck.metadata.get("extra").cloned().unwrap_or(serde_json::Value::Null);
    Ok((agent, extra))
}

pub fn load_buffer(path: &Path) -> Result<ReplayBuffer, CliError> {
    ReplayBuffer::load(path).map_err(|e| CliError::Validation(format!("buffer {}: {e}", path.display())))
}

/// The environment recorded in a checkpoint written by [`cmd_train`].
pub fn checkpoint_env(extra: &serde_json::Value) -> Option<EnvSection> {
    serde_json::from_value(extra.get("env")?.clone()).ok()
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// Defaults to the environment recorded in the checkpoint.
    pub env: Option<EnvSection>,
    pub episodes: usize,
    pub seed: u64,
}

/// Noise-free evaluation of a checkpoint; returns the summary and its record.
pub fn cmd_eval(req: &EvalRequest) -> Result<(EvaluationSummary, MetricsRecord), CliError> {
    if req.episodes == 0 {
        return Err(CliError::Validation("episodes must be positive".into()));
    }
    let (agent, extra) = load_checkpoint(&req.checkpoint)?;
    let env_cfg = match &req.env {
        Some(e) => e.clone(),
        None => checkpoint_env(&extra)
            .ok_or_else(|| CliError::Validation("checkpoint records no environment; pass --env".into()))?,
    };
    let mut env = make_env(&env_cfg.name, &env_cfg.params).map_err(|e| CliError::Validation(format!("env: {e}")))?;
    let spec = env.spec().clone();
    let (low, high) = agent.action_bounds();
    if spec.state_dim != agent.state_dim() || spec.action_dim != agent.action_dim() {
        return Err(CliError::Validation(format!(
            "checkpoint expects state/action dims {}/{}, {} has {}/{}",
            agent.state_dim(),
            agent.action_dim(),
            spec.name,
            spec.state_dim,
            spec.action_dim
        )));
    }
    if low != spec.action_low.as_slice() || high != spec.action_high.as_slice() {
        return Err(CliError::Validation(format!("checkpoint action bounds differ from {}", spec.name)));
    }
    let summary = evaluate(&agent, env.as_mut(), &evaluation_seeds(req.seed, req.episodes)).map_err(runtime)?;
    let record = MetricsRecord::Evaluation {
        step: extra.get("steps").and_then(|s| s.as_u64()).unwrap_or(0),
        episodes: summary.returns.len(),
        mean_return: summary.mean,
        std_return: summary.std,
        returns: summary.returns.clone(),
        optimal_mean_return: summary.optimal_mean,
    };
    Ok((summary, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightRow {
    pub center_step: u64,
    pub lambda: f64,
    pub normalized_step: f64,
    pub normalized_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrace {
    pub variant: Variant,
    pub rows: Vec<WeightRow>,
    /// Rank correlation between centre step and weight; absent when undefined.
    pub spearman: Option<f64>,
    /// Transitions left out because they carry no behavioral parameters.
    pub skipped: usize,
}

impl WeightTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("center_step,lambda,normalized_step,normalized_lambda\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.center_step, r.lambda, r.normalized_step, r.normalized_lambda);
        }
        out
    }

    pub fn records(&self) -> Vec<MetricsRecord> {
        self.rows
            .iter()
            .map(|r| MetricsRecord::WeightAnalysis {
                step: r.center_step,
                lambda: r.lambda,
                normalized_step: r.normalized_step,
                normalized_lambda: r.normalized_lambda,
            })
            .collect()
    }
}

/// Slides a window of `window` consecutive transitions (oldest first) over the
/// buffer with the given stride and scores each window against `agent`.
///
/// The deterministic agent gets one weight per window. The stochastic agent
/// gets one weight per transition; the row reports their mean. Transitions
/// without behavioral parameters (exploration data of an uncorrected
/// stochastic run) are skipped for the stochastic agent.
pub fn weight_trace(
    buffer: &ReplayBuffer,
    agent: &Agent,
    window: usize,
    stride: usize,
    seed: u64,
) -> Result<WeightTrace, CliError> {
    if window == 0 || stride == 0 {
        return Err(CliError::Validation("window and stride must be positive".into()));
    }
    let positions: Vec<usize> = match agent.kind() {
        AgentKind::Deterministic => (0..buffer.len()).collect(),
        AgentKind::Stochastic => {
            (0..buffer.len()).filter(|&i| buffer.get(i).is_some_and(|t| t.policy_params.is_some())).collect()
        }
    };
    let skipped = buffer.len() - positions.len();
    if window > positions.len() {
        return Err(CliError::Validation(format!("window {window} exceeds the {} usable transitions", positions.len())));
    }
    let cfg = agent.config().offpoc.unwrap_or(OffPocConfig {
        exploration_std: agent.config().exploration_std,
        jsd_estimator: JsdEstimator::MomentMatched,
        ..OffPocConfig::default()
    });
    let mut steps = Vec::new();
    let mut lambdas = Vec::new();
    let mut start = 0;
    let mut k = 0u64;
    while start + window <= positions.len() {
        let idx = &positions[start..start + window];
        let batch = buffer.gather(idx).map_err(runtime)?;
        let report = agent.weight_report(&batch, &cfg, derive_seed(seed, k)).map_err(runtime)?;
        let values: Vec<f64> = report.pairs().map(|(l, _)| l).collect();
        lambdas.push(values.iter().sum::<f64>() / values.len() as f64);
        steps.push(batch.birth_steps[window / 2]);
        start += stride;
        k += 1;
    }
    let step_f: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let ns = min_max_normalize(&step_f);
    let nl = min_max_normalize(&lambdas);
    let rows = (0..steps.len())
        .map(|i| WeightRow { center_step: steps[i], lambda: lambdas[i], normalized_step: ns[i], normalized_lambda: nl[i] })
        .collect();
    let rho = (steps.len() >= 2).then(|| spearman(&step_f, &lambdas)).filter(|r| r.is_finite());
    Ok(WeightTrace { variant: agent.kind().variant(), rows, spearman: rho, skipped })
}

/// Loads the snapshot and checkpoint, computes the trace, and writes
/// `weights.csv` and `weights.jsonl` into `out_dir`.
pub fn cmd_weights(
    buffer_path: &Path,
    checkpoint_path: &Path,
    window: usize,
    stride: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<WeightTrace, CliError> {
    let buffer = load_buffer(buffer_path)?;
    let (agent, _) = load_checkpoint(checkpoint_path)?;
    let trace = weight_trace(&buffer, &agent, window, stride, seed)?;
    std::fs::create_dir_all(out_dir).map_err(runtime)?;
    write_file(&out_dir.join("weights.csv"), trace.to_csv().as_bytes())?;
    let lines: String = trace.records().iter().map(|r| to_json_line(r) + "\n").collect();
    write_file(&out_dir.join("weights.jsonl"), lines.as_bytes())?;
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct ContractRequest {
    pub mdp: FiniteMdp,
    pub pi: String,
    pub eta: String,
    pub lambda: String,
    pub horizon: usize,
    /// Number of random Q matrices audited.
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractSummary {
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub trials: usize,
    pub lambda: String,
    /// Largest ratio `||HQ - Q^pi|| / ||Q - Q^pi||` over the trials.
    pub worst_ratio: Option<f64>,
    pub max_xi: f64,
    pub min_w: f64,
    /// Cells with some negative coefficient (the bound is not claimed there).
    pub negative_cells: usize,
    /// Failures of the per-cell bound on cells whose coefficients are all non-negative, summed over trials.
    pub violations: usize,
    /// Per-cell bound failures on negative-coefficient cells, reported separately.
    pub negative_cell_exceedances: usize,
    pub tail_bound: f64,
}

#[derive(Debug, Clone)]
pub struct ContractOutput {
    pub summary: ContractSummary,
    /// One `state,action,xi,nonnegative,min_w` row per cell.
    pub xi_csv: String,
    /// Per-trial, per-cell check rows.
    pub cells_csv: String,
    pub records: Vec<MetricsRecord>,
}

/// Audits the operator on `trials` random Q matrices drawn from the seed.
pub fn contract(req: &ContractRequest) -> Result<ContractOutput, CliError> {
    let bad = |e: offpoc::tabular::TabularError| CliError::Validation(e.to_string());
    let (ns, na) = (req.mdp.n_states(), req.mdp.n_actions());
    if req.horizon == 0 || req.trials == 0 {
        return Err(CliError::Validation("horizon and trials must be positive".into()));
    }
    let pi = TabularPolicy::from_spec(&req.pi, ns, na).map_err(bad)?;
    let eta = TabularPolicy::from_spec(&req.eta, ns, na).map_err(bad)?;
    let profile = LambdaProfile::parse(&req.lambda).map_err(bad)?;
    let table = profile.table(&pi, &eta);
    let lambda_fn = move |_t: usize, s: usize, a: usize| table[(s, a)];
    let scale = (req.mdp.max_abs_reward() / (1.0 - req.mdp.gamma())).max(1.0);

    let mut worst: Option<f64> = None;
    let mut violations = 0;
    let mut exceed = 0;
    let mut records = Vec::new();
    let mut cells_csv = String::from("trial,state,action,abs_error,bound,nonnegative\n");
    let mut first = None;
    for trial in 0..req.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, trial as u64));
        let q = DMatrix::from_fn(ns, na, |_, _| rng.random_range(-2.0 * scale..=2.0 * scale));
        let report = contraction_audit(&req.mdp, &pi, &eta, &q, &lambda_fn, req.horizon).map_err(bad)?;
        let v = report.violations().len();
        violations += v;
        exceed += report.cells().iter().filter(|c| !c.nonnegative && c.lhs > c.rhs + report.allowance).count();
        if let Some(r) = report.ratio {
            worst = Some(worst.map_or(r, |w: f64| w.max(r)));
        }
        for c in report.cells() {
            let _ = writeln!(cells_csv, "{trial},{},{},{},{},{}", c.state, c.action, c.lhs, c.rhs, c.nonnegative);
        }
        records.push(MetricsRecord::Contraction {
            step: trial as u64,
            mdp: 0,
            trial,
            ratio: report.ratio,
            max_xi: report.max_xi(),
            negative_cells: report.negative_cells(),
            violations: v,
        });
        first.get_or_insert(report);
    }
    let report = first.expect("at least one trial");
    let mut xi_csv = String::from("state,action,xi,nonnegative,min_w\n");
    for s in 0..ns {
        for a in 0..na {
            let min_w = report.w[s * na + a].min();
            let _ = writeln!(xi_csv, "{s},{a},{},{},{min_w}", report.xi[(s, a)], report.nonnegative[(s, a)]);
        }
    }
    let summary = ContractSummary {
        states: ns,
        actions: na,
        gamma: req.mdp.gamma(),
        horizon: req.horizon,
        trials: req.trials,
        lambda: req.lambda.clone(),
        worst_ratio: worst,
        max_xi: report.max_xi(),
        min_w: report.min_w(),
        negative_cells: report.negative_cells(),
        violations,
        negative_cell_exceedances: exceed,
        tail_bound: report.tail_bound,
    };
    Ok(ContractOutput { summary, xi_csv, cells_csv, records })
}

/// Runs [`contract`] on an MDP file and writes `xi.csv`, `cells.csv`,
/// `summary.json` and `contraction.jsonl` into `out_dir`.
pub fn cmd_contract(mdp_path: &Path, req: ContractRequestArgs, out_dir: &Path) -> Result<ContractOutput, CliError> {
    let text = std::fs::read_to_string(mdp_path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", mdp_path.display())))?;
    let mdp = FiniteMdp::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", mdp_path.display())))?;
    let out = contract(&ContractRequest {
        mdp,
        pi: req.pi,
        eta: req.eta,
        lambda: req.lambda,
        horizon: req.horizon,
        trials: req.trials,
        seed: req.seed,
    })?;
    std::fs::create_dir_all(out_dir).map_err(runtime)?;
    write_file(&out_dir.join("xi.csv"), out.xi_csv.as_bytes())?;
    write_file(&out_dir.join("cells.csv"), out.cells_csv.as_bytes())?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(runtime)? + "\n";
    write_file(&out_dir.join("summary.json"), summary.as_bytes())?;
    let lines: String = out.records.iter().map(|r| to_json_line(r) + "\n").collect();
    write_file(&out_dir.join("contraction.jsonl"), lines.as_bytes())?;
    Ok(out)
}

/// Everything [`ContractRequest`] needs besides the MDP itself.
#[derive(Debug, Clone)]
pub struct ContractRequestArgs {
    pub pi: String,
    pub eta: String,
    pub lambda: String,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Parses `k=v` environment parameter overrides.
pub fn parse_env_params(pairs: &[String]) -> Result<BTreeMap<String, f64>, CliError> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = crate::config::parse_assignment(p)?;
            let v: f64 = v.parse().map_err(|_| CliError::Validation(format!("env param {k}: {v:?} is not a number")))?;
            Ok((k, v))
        })
        .collect()
}
