use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prism_core::dqa::{MergeStrategy, PerceptionMode};
use prism_core::env::household::TaskFamily;
use prism_core::eval::AblationSuite;
use prism_core::run::{execute, Command, RunConfig, RunError};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "prism", version, about = "Interactive-perception agents on household and navigation tasks")]
struct Cli {
    /// TOML experiment config. PRISM_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for episode batches; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run directory [default: runs/<command>-seed<seed>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run episodes and log trajectories and transcripts.
    RunEpisode(EpisodeArgs),
    /// Collect expert demonstrations.
    CollectDemos(EpisodeArgs),
    /// Behavioural cloning on demonstrations.
    TrainBc(EpisodeArgs),
    /// PPO fine-tuning from a BC checkpoint.
    TrainPpo(EpisodeArgs),
    /// Success rates, or NE/SR/OSR/SPL on navigation.
    Evaluate(EpisodeArgs),
    /// Run one ablation suite.
    Ablate(EpisodeArgs),
}

#[derive(Args, Debug, Default)]
struct EpisodeArgs {
    /// household or nav
    #[arg(long, value_parser = ["household", "nav"])]
    env: Option<String>,
    #[arg(long, value_parser = |s: &str| s.parse::<PerceptionMode>())]
    perception_mode: Option<PerceptionMode>,
    #[arg(long, value_parser = |s: &str| s.parse::<MergeStrategy>())]
    merge: Option<MergeStrategy>,
    /// Maximum questions per view.
    #[arg(long)]
    question_budget: Option<usize>,
    /// Household family to run; repeatable.
    #[arg(long = "family", value_parser = parse_family)]
    families: Vec<TaskFamily>,
    /// Episodes per family (household) or in total (nav).
    #[arg(long)]
    episodes: Option<u64>,
    /// Compact-policy checkpoint; selects the compact policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Demonstrations for train-bc.
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long, value_parser = |s: &str| s.parse::<AblationSuite>())]
    suite: Option<AblationSuite>,
    /// Navigation graph fixture (JSON).
    #[arg(long)]
    nav_fixture: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<TaskFamily, String> {
    TaskFamily::parse(s).ok_or_else(|| {
        let names: Vec<&str> = TaskFamily::ALL.iter().map(|f| f.as_str()).collect();
        format!("unknown family `{s}`; expected one of: {}", names.join(", "))
    })
}

fn path(p: &std::path::Path) -> Value {
    json!(p.to_string_lossy())
}

impl Cli {
    fn split(self) -> (Command, Vec<(&'static str, Value)>, Option<PathBuf>, bool) {
        let (cmd, a) = match self.command {
            Cmd::RunEpisode(a) => (Command::RunEpisode, a),
            Cmd::CollectDemos(a) => (Command::CollectDemos, a),
            Cmd::TrainBc(a) => (Command::TrainBc, a),
            Cmd::TrainPpo(a) => (Command::TrainPpo, a),
            Cmd::Evaluate(a) => (Command::Evaluate, a),
            Cmd::Ablate(a) => (Command::Ablate, a),
        };
        let mut o: Vec<(&'static str, Value)> = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed", json!(s)));
        }
        if let Some(j) = self.jobs {
            o.push(("jobs", json!(j)));
        }
        if let Some(p) = &self.out {
            o.push(("out", path(p)));
        }
        if let Some(e) = a.env {
            o.push(("env", json!(e)));
        }
        if let Some(m) = a.perception_mode {
            o.push(("agent.dqa.perception_mode", json!(m.as_str())));
        }
        if let Some(m) = a.merge {
            o.push(("agent.dqa.merge_strategy", json!(m.as_str())));
        }
        if let Some(b) = a.question_budget {
            o.push(("agent.dqa.question_budget", json!(b)));
        }
        if !a.families.is_empty() {
            let names: Vec<&str> = a.families.iter().map(|f| f.as_str()).collect();
            o.push(("household.families", json!(names)));
        }
        if let Some(n) = a.episodes {
            let key = if cmd == Command::CollectDemos || cmd == Command::TrainBc {
                "episodes.demos_per_family"
            } else {
                "episodes.per_family"
            };
            o.push((key, json!(n)));
        }
        if let Some(c) = &a.checkpoint {
            o.push(("policy.kind", json!("compact")));
            o.push(("policy.checkpoint", path(c)));
        }
        if let Some(d) = &a.demos {
            o.push(("demos.path", path(d)));
        }
        if let Some(s) = a.suite {
            o.push(("ablation.suite", json!(s.as_str())));
        }
        if let Some(f) = &a.nav_fixture {
            o.push(("nav.fixture", path(f)));
        }
        (cmd, o, self.config, self.force)
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    let (cmd, overrides, config, force) = cli.split();
    let cfg = RunConfig::load(config.as_deref(), &overrides)?;
    let out = execute(cmd, &cfg, force)?;
    print!("{}", out.summary);
    println!("run directory: {}", out.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("PRISM_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
