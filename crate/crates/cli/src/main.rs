use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use offpoc::metrics::to_json_line;
use offpoc_cli::{
    cmd_contract, cmd_eval, cmd_train, parse_assignment, parse_env_params, CliError, ContractRequestArgs, EnvSection,
    EvalRequest, RunConfig,
};

/// Off-policy actor-critic experiments: training, evaluation, weight traces and operator audits.
#[derive(Parser)]
#[command(name = "offpoc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, e.g. `--set learner.gamma=0.9` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        agent: Option<String>,
        #[arg(long = "offpoc.variant")]
        offpoc_variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config and the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint without exploration noise.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment name; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        env: Option<String>,
        #[arg(long = "env-param", value_name = "KEY=VALUE")]
        env_params: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL file for the evaluation record (default: eval.jsonl next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace the correction weight across a buffer snapshot.
    Weights {
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        window: usize,
        /// Defaults to the window size.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: the snapshot's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit the tabular operator on an MDP file.
    Contract {
        #[arg(long)]
        mdp: PathBuf,
        /// `uniform`, `random:<seed>` or rows `p,p;p,p`.
        #[arg(long, default_value = "uniform")]
        pi: String,
        #[arg(long, default_value = "uniform")]
        eta: String,
        /// `zero`, `one`, `const:<c>`, `similarity` or `ratio`.
        #[arg(long, default_value = "similarity")]
        lambda: String,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os(offpoc_cli::OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, set, agent, offpoc_variant, seed, out } => {
            let mut overrides = set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
            if let Some(a) = agent {
                overrides.push(("agent".into(), a));
            }
            if let Some(v) = offpoc_variant {
                overrides.push(("offpoc.variant".into(), v));
            }
            if let Some(s) = seed {
                overrides.push(("seed".into(), s.to_string()));
            }
            let cfg = RunConfig::load(&config, &overrides)?;
            let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            let dir = out.unwrap_or_else(|| cfg.resolve_output_dir(&format!("{stem}-seed{}", cfg.seed)));
            let outcome = cmd_train(&cfg, &dir)?;
            let s = &outcome.summary;
            match &s.final_evaluation {
                Some(e) => println!("final evaluation: {:.4} ± {:.4} over {} episodes", e.mean, e.std, e.returns.len()),
                None => println!("no evaluation recorded"),
            }
            if let (Some(lo), Some(hi)) = (s.lambda_min, s.lambda_max) {
                println!("weights: {} values in [{lo:.4}, {hi:.4}]", s.lambda_count);
            }
            println!("artifacts in {}", outcome.dir.display());
        }
        Command::Eval { checkpoint, env, env_params, episodes, seed, out } => {
            let params = parse_env_params(&env_params)?;
            let env = match env {
                Some(name) => Some(EnvSection { name, params }),
                None if !params.is_empty() => {
                    return Err(CliError::Validation("--env-param needs --env".into()));
                }
                None => None,
            };
            let req = EvalRequest { checkpoint: checkpoint.clone(), env, episodes, seed };
            let (summary, record) = cmd_eval(&req)?;
            print!("mean return {:.4} ± {:.4} over {episodes} episodes", summary.mean, summary.std);
            match summary.optimal_mean {
                Some(o) => println!(" (optimal {o:.4})"),
                None => println!(),
            }
            let path = out.unwrap_or_else(|| checkpoint.with_file_name("eval.jsonl"));
            std::fs::write(&path, to_json_line(&record) + "\n")
                .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        }
        Command::Weights { buffer, checkpoint, window, stride, seed, out } => {
            let dir = out.unwrap_or_else(|| buffer.parent().map(PathBuf::from).unwrap_or_default());
            let trace = offpoc_cli::cmd_weights(&buffer, &checkpoint, window, stride.unwrap_or(window), seed, &dir)?;
            println!("{} windows", trace.rows.len());
            if trace.skipped > 0 {
                println!("skipped {} transitions without behavioral parameters", trace.skipped);
            }
            match trace.spearman {
                Some(r) => println!("spearman(center step, weight) = {r:.4}"),
                None => println!("spearman(center step, weight) undefined"),
            }
            println!("wrote {}", dir.join("weights.csv").display());
        }
        Command::Contract { mdp, pi, eta, lambda, horizon, trials, seed, out } => {
            let stem = mdp.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mdp".into());
            let dir = out.unwrap_or_else(|| output_root().join(format!("contract-{stem}")));
            let args = ContractRequestArgs { pi, eta, lambda, horizon, trials, seed };
            let result = cmd_contract(&mdp, args, &dir)?;
            let s = &result.summary;
            match s.worst_ratio {
                Some(r) => println!("worst ratio {r:.6}"),
                None => println!("worst ratio undefined (Q equals the fixed point)"),
            }
            println!(
                "max xi {:.6}, min w {:.3e}, negative cells {}, violations {} (negative-cell exceedances {})",
                s.max_xi, s.min_w, s.negative_cells, s.violations, s.negative_cell_exceedances
            );
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
