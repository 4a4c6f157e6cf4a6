use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahrs_core::envs::{self, env_spec};
use ahrs_core::estimation::{BranchStats, StatsHistory};
use ahrs_core::harness::{self, ClientSource, RunStatus, SummaryTable};
use ahrs_core::rules;
use ahrs_core::scheduler::{self, SelectionContext};
use ahrs_core::trainer::{Algo, SelectorChoice, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ahrs", version, about = "Hybrid-reward PPO with scheduled branch weighting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed and write metrics under --out.
    Train(TrainArgs),
    /// Inspect the built-in environments.
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
    /// Inspect the rule repository.
    Rules {
        #[command(subcommand)]
        command: RulesCommand,
    },
    /// Print a prompt for inspection.
    Prompt(PromptArgs),
    /// Check recorded transcripts.
    Replay {
        #[command(subcommand)]
        command: ReplayCommand,
    },
    /// Aggregate completed runs into a table (also written as summary.csv).
    Summarize {
        #[arg(long)]
        runs: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Configuration file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algo>,
    /// Disable the auxiliary reward branch.
    #[arg(long)]
    no_aux: bool,
    /// Auxiliary reward expression; see `env describe` for its variables.
    #[arg(long)]
    aux_expr: Option<String>,
    #[arg(long, value_parser = parse_selector)]
    selector: Option<SelectorChoice>,
    /// Rule for the fixed selector and the hd-ppo variants.
    #[arg(long)]
    rule: Option<u8>,
    /// Rule sequence for the scripted selector, e.g. 1,2,3.
    #[arg(long, value_delimiter = ',')]
    script: Option<Vec<u8>>,
    /// Transcript file (or a previous --out directory) for the replay selector.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// One or more seeds, e.g. 1,2,3 (default 1,2,3,4,5).
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EnvCommand {
    /// Print the spec, reward components and expression variables of an environment.
    Describe { name: String },
}

#[derive(Subcommand, Debug)]
enum RulesCommand {
    List,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PromptKind {
    Repo,
    Selection,
    Aux,
}

#[derive(Args, Debug)]
struct PromptArgs {
    kind: PromptKind,
    #[arg(long, default_value = envs::PointMassNav::NAME)]
    env: String,
}

#[derive(Subcommand, Debug)]
enum ReplayCommand {
    /// Re-run a configuration against a transcript and check every prompt hash.
    Verify {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's algo (ahrs or ahrs-d).
        #[arg(long, value_parser = parse_algo)]
        algo: Option<Algo>,
        #[arg(long)]
        no_aux: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_algo(s: &str) -> Result<Algo, String> {
    s.parse()
}

fn parse_selector(s: &str) -> Result<SelectorChoice, String> {
    s.parse()
}

fn resolve_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => harness::load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(args.config.as_deref())?;
    if let Some(a) = args.algo {
        cfg.algo = a;
    }
    if args.no_aux {
        cfg.aux.enabled = false;
    }
    if let Some(e) = args.aux_expr {
        cfg.aux.expr = e;
    }
    if let Some(s) = args.selector {
        cfg.selector = s;
    }
    if let Some(r) = args.rule {
        cfg.rule = r;
    }
    if let Some(s) = args.script {
        cfg.script = s;
    }
    harness::validate_config(&cfg)?;
    let clients = match args.transcript {
        Some(p) => ClientSource::Replay(p),
        None => ClientSource::Live,
    };
    let seeds = args.seed.unwrap_or_else(|| harness::DEFAULT_SEEDS.to_vec());
    let result = harness::run_experiment(&cfg, &seeds, &args.out, &clients)?;
    let mut failed = 0;
    for r in &result.records {
        match &r.status {
            RunStatus::Completed => println!(
                "{}: completed, final-window return {:.4} ({})",
                r.run_id,
                r.final_return.unwrap_or(f64::NAN),
                r.metrics_path.display()
            ),
            RunStatus::Failed { error } => {
                failed += 1;
                println!("{}: failed: {error}", r.run_id);
            }
        }
    }
    if let Some(row) = result.row {
        print!("{}", SummaryTable { rows: vec![row] }.render_text());
    }
    if failed > 0 {
        bail!("{failed} of {} run(s) failed", result.records.len());
    }
    Ok(())
}

fn cmd_env_describe(name: &str) -> Result<()> {
    let spec = env_spec(name)?;
    println!("name: {}", spec.name);
    println!("obs_dim: {}", spec.obs_dim);
    println!("act_dim: {} (each clipped to [-{b}, {b}])", spec.act_dim, b = spec.action_bound);
    println!("horizon: {}", spec.horizon);
    println!("dt: {}", envs::DT);
    println!("observation fields: {}", spec.obs_names.join(", "));
    println!("reward components (K = {}): {}", spec.k(), spec.reward_names.join(", "));
    println!("{}", spec.reward_desc.trim_end());
    println!("expression variables: {}", spec.dsl_variables().join(", "));
    println!("default auxiliary expression: {}", spec.default_aux_expr);
    Ok(())
}

fn cmd_prompt(kind: PromptKind, env: &str) -> Result<()> {
    let spec = env_spec(env)?;
    let text = match kind {
        PromptKind::Repo => scheduler::build_repo_prompt(spec.task_desc, spec.env_desc, spec.reward_desc),
        PromptKind::Aux => {
            scheduler::build_aux_prompt(spec.task_desc, spec.env_desc, spec.reward_desc, &spec.dsl_variables())
        }
        PromptKind::Selection => {
            // first tick of a run: zero statistics, no history
            let k = spec.k();
            let ctx = SelectionContext {
                task_desc: spec.task_desc.to_string(),
                env_desc: spec.env_desc.to_string(),
                reward_desc: spec.reward_desc.to_string(),
                rules_block: rules::rules_prompt_block(),
                stats: BranchStats {
                    means: vec![0.0; k],
                    vars: vec![0.0; k],
                    epoch: 1,
                },
                history: StatsHistory::new(),
                prev_rule: None,
                prev_weights: None,
            };
            scheduler::build_selection_prompt(&ctx)
        }
    };
    print!("{text}");
    Ok(())
}

fn cmd_replay_verify(
    transcript: &Path,
    config: &Path,
    algo: Option<Algo>,
    no_aux: bool,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = harness::load_config(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(a) = algo {
        cfg.algo = a;
    }
    if no_aux {
        cfg.aux.enabled = false;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ticks = harness::verify_replay(&cfg, transcript)?;
    println!("ok: {ticks} tick(s) replayed with matching prompt hashes");
    Ok(())
}

fn cmd_summarize(runs: &Path) -> Result<()> {
    let table = harness::summarize(runs)?;
    let csv = runs.join("summary.csv");
    std::fs::write(&csv, table.render_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{}", table.render_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Env {
            command: EnvCommand::Describe { name },
        } => cmd_env_describe(&name),
        Command::Rules {
            command: RulesCommand::List,
        } => {
            print!("{}", rules::catalog_text());
            Ok(())
        }
        Command::Prompt(p) => cmd_prompt(p.kind, &p.env),
        Command::Replay {
            command:
                ReplayCommand::Verify {
                    transcript,
                    config,
                    algo,
                    no_aux,
                    seed,
                },
        } => cmd_replay_verify(&transcript, &config, algo, no_aux, seed),
        Command::Summarize { runs } => cmd_summarize(&runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
