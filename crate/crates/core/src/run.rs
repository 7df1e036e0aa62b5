//! Experiment configuration, run directories and the top-level commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};

use crate::agent::{run_batch, Actor, Agent, AgentConfig, AgentError, EpisodeLog};
use crate::backends::{
    BackendError, MockBackend, OraclePerception, PerceptionModel, ReasoningModel, RemoteClient,
    RemoteConfig, RemotePerception, RemoteReasoner, RemoteScorer, ScoringModel,
    ScriptedOracleConfig, ScriptedReasoner, MOCK_HALF_LOGPROB,
};
use crate::dqa::DqaError;
use crate::env::household::{
    standard_action_space, standard_vocabulary, task_batch, HouseholdConfig, HouseholdEnv, Split,
    TaskFamily, TaskSpec,
};
use crate::env::nav::{generate_world, landmark_vocabulary, GraphFixture, NavConfig, NavEnv, NavTask, LANDMARKS};
use crate::eval::{
    call_accounting, mean_nav_metrics, nav_metrics, run_ablation, AblationSetup, AblationSuite,
    CallSummary, EvalError, NavMetrics, OracleQuestions,
};
use crate::exec::{with_jobs, Exec};
use crate::policy::{CompactPolicyParams, PolicyError, DEFAULT_FEATURE_DIM};
use crate::templates::{PromptTemplates, TemplateError};
use crate::training::{
    bc_examples, collect_demos, greedy_success_rate, train_bc, train_ppo, BcConfig, DemoDataset,
    PpoConfig, TrainError,
};
use crate::types::{Environment, NavTrace};
use crate::util::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ENV_PREFIX: &str = "PRISM_";

/// Variables read by the remote client itself rather than the config tree.
const RESERVED_ENV: [&str; 5] = ["api_base", "api_key", "model_vlm", "model_llm", "log"];

/// Task seed indices for `--seed s` start at `s << SEED_SHIFT`.
const SEED_SHIFT: u32 = 20;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("run directory {0} already exists; pass --force to replace it")]
    RunDirExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl RunError {
    fn backend(&self) -> Option<&BackendError> {
        match self {
            RunError::Backend(e) => Some(e),
            RunError::Eval(e) => e.backend(),
            _ => self.agent().and_then(AgentError::backend),
        }
    }

    fn agent(&self) -> Option<&AgentError> {
        match self {
            RunError::Agent(e) | RunError::Train(TrainError::Agent(e)) | RunError::Eval(EvalError::Agent(e)) => Some(e),
            _ => None,
        }
    }

    /// 1 usage or configuration, 2 backend failure, 3 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self.backend() {
            Some(BackendError::Config(_)) => return 1,
            Some(_) => return 2,
            None => {}
        }
        // Output a backend produced but the pipeline could not use.
        if let Some(AgentError::Perception { source, .. }) = self.agent() {
            if matches!(source, DqaError::QuestionParse { .. } | DqaError::EmptyOutput(_)) {
                return 2;
            }
        }
        match self {
            RunError::Config(_)
            | RunError::Missing(_)
            | RunError::RunDirExists(_)
            | RunError::Io { .. }
            | RunError::Template(_)
            | RunError::Policy(PolicyError::Checkpoint(_) | PolicyError::Io(_))
            | RunError::Eval(EvalError::UnknownSuite(_) | EvalError::Fixture(_)) => 1,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Household,
    Nav,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionKind {
    #[default]
    Oracle,
    Mock,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionSection {
    pub kind: PerceptionKind,
    pub oracle: ScriptedOracleConfig,
    /// Replies for the mock backend, cycled.
    pub script: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningKind {
    #[default]
    Scripted,
    Mock,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasoningSection {
    pub kind: ReasoningKind,
    pub script: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Hashed linear policy loaded from `checkpoint`.
    Compact,
    /// The simulator's privileged demonstrator.
    #[default]
    Expert,
    /// Language-model scoring with a constant per-token log-probability.
    Mock,
    /// Language-model scoring through the remote client.
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HouseholdSection {
    pub families: Vec<TaskFamily>,
    #[serde(flatten)]
    pub env: HouseholdConfig,
}

impl Default for HouseholdSection {
    fn default() -> Self {
        Self {
            families: TaskFamily::ALL.to_vec(),
            env: HouseholdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavSection {
    /// Graph fixture (JSON). Without one a world is generated.
    pub fixture: Option<PathBuf>,
    pub world_seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub step_cap: usize,
}

impl Default for NavSection {
    fn default() -> Self {
        Self {
            fixture: None,
            world_seed: 0,
            rows: 5,
            cols: 5,
            step_cap: NavConfig::default().step_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeCounts {
    /// Evaluation episodes per household family, or navigation episodes.
    pub per_family: u64,
    /// Demonstration episodes per family.
    pub demos_per_family: u64,
    /// PPO probe episodes per family.
    pub probe_per_family: u64,
}

impl Default for EpisodeCounts {
    fn default() -> Self {
        Self {
            per_family: 20,
            demos_per_family: 100,
            probe_per_family: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub failure_rate: f64,
    /// Existing demonstrations for `train-bc`; collected in-run otherwise.
    pub path: Option<PathBuf>,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            failure_rate: 0.0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub suite: Option<AblationSuite>,
    pub bootstrap_seed: u64,
}

/// Everything a run depends on. Serialized verbatim into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub household: HouseholdSection,
    pub nav: NavSection,
    pub episodes: EpisodeCounts,
    pub agent: AgentConfig,
    pub perception: PerceptionSection,
    pub reasoning: ReasoningSection,
    pub policy: PolicySection,
    pub remote: RemoteConfig,
    pub demos: DemoSection,
    pub bc: BcConfig,
    pub ppo: PpoConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Household,
            seed: 0,
            jobs: None,
            out: None,
            templates_dir: None,
            household: HouseholdSection::default(),
            nav: NavSection::default(),
            episodes: EpisodeCounts::default(),
            agent: AgentConfig::default(),
            perception: PerceptionSection::default(),
            reasoning: ReasoningSection::default(),
            policy: PolicySection::default(),
            remote: RemoteConfig::default(),
            demos: DemoSection::default(),
            bc: BcConfig::default(),
            ppo: PpoConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the TOML file, then `PRISM_*` variables (`__` separates
    /// nesting levels, as in `PRISM_AGENT__DQA__PERCEPTION_MODE=raw`), then
    /// `overrides` given as dotted keys.
    pub fn load(file: Option<&Path>, overrides: &[(&str, serde_json::Value)]) -> Result<Self, RunError> {
        let mut fig = Figment::from(Serialized::defaults(RunConfig::default()));
        if let Some(path) = file {
            if !path.is_file() {
                return Err(RunError::Config(format!("config file {} not found", path.display())));
            }
            fig = fig.merge(Toml::file(path));
        }
        fig = fig.merge(
            Env::prefixed(ENV_PREFIX)
                .split("__")
                .filter(|k| !RESERVED_ENV.iter().any(|r| k == *r)),
        );
        for (k, v) in overrides {
            fig = fig.merge(Serialized::default(k, v));
        }
        let cfg: RunConfig = fig.extract().map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        self.perception
            .oracle
            .validate()
            .map_err(|e| RunError::Config(format!("perception.oracle: {e}")))?;
        self.agent
            .dqa
            .validate()
            .map_err(|e| RunError::Config(format!("agent.dqa: {e}")))?;
        self.ppo.validate().map_err(|e| RunError::Config(format!("ppo: {e}")))?;
        if !(0.0..=1.0).contains(&self.demos.failure_rate) {
            return bad(format!("demos.failure_rate must lie in [0, 1], got {}", self.demos.failure_rate));
        }
        if self.bc.epochs == 0 || self.bc.batch_size == 0 || !(self.bc.learning_rate.is_finite() && self.bc.learning_rate > 0.0) {
            return bad("bc.epochs, bc.batch_size and bc.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bc.momentum) {
            return bad(format!("bc.momentum must lie in [0, 1), got {}", self.bc.momentum));
        }
        if self.household.families.is_empty() {
            return bad("household.families must name at least one family".into());
        }
        if self.household.env.step_cap == 0 || self.nav.step_cap == 0 {
            return bad("step caps must be positive".into());
        }
        if self.nav.fixture.is_none() && (self.nav.rows < 2 || self.nav.cols < 2) {
            return bad("nav.rows and nav.cols must be at least 2".into());
        }
        if self.agent.history_len == 0 {
            return bad("agent.history_len must be at least 1".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        if self.episodes.per_family == 0 {
            return bad("episodes.per_family must be at least 1".into());
        }
        if self.perception.kind == PerceptionKind::Mock && self.perception.script.is_empty() {
            return bad("perception.kind = \"mock\" needs a non-empty perception.script".into());
        }
        if self.reasoning.kind == ReasoningKind::Mock && self.reasoning.script.is_empty() {
            return bad("reasoning.kind = \"mock\" needs a non-empty reasoning.script".into());
        }
        Ok(())
    }

    fn exec(&self) -> Exec {
        if self.jobs == Some(1) {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn first_task(&self) -> u64 {
        self.seed << SEED_SHIFT
    }

    pub fn household_tasks(&self, split: Split, per_family: u64) -> Vec<(TaskSpec, u64)> {
        task_batch(&self.household.families, per_family, split, self.first_task())
    }

    pub fn nav_tasks(&self) -> Result<Vec<(NavTask, u64)>, RunError> {
        let fixture = match &self.nav.fixture {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                serde_json::from_str::<GraphFixture>(&text)
                    .map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?
            }
            None => generate_world(self.nav.world_seed, self.nav.rows, self.nav.cols, self.episodes.per_family as usize),
        };
        let tasks = NavTask::from_fixture(&fixture).map_err(|e| RunError::Config(e.to_string()))?;
        Ok(tasks
            .into_iter()
            .take(self.episodes.per_family as usize)
            .enumerate()
            .map(|(i, t)| (t, self.first_task() + i as u64))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Started,
    Complete,
}

/// Provenance record written before anything else and finalised last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub status: RunStatus,
    pub config: RunConfig,
    /// `(task, seed)` seeds in run order.
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, Artifact>,
    /// Files in the run directory, by relative path.
    pub outputs: BTreeMap<String, String>,
}

/// Sole writer for one run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `root` and writes the config and the initial manifest. An
    /// existing directory is only replaced with `force`, and only if it is
    /// empty or holds a previous run's manifest.
    pub fn create(root: &Path, force: bool, manifest: Manifest) -> Result<Self, RunError> {
        if root.exists() {
            let empty = fs::read_dir(root).map_err(io_err(root))?.next().is_none();
            if !empty {
                if !force {
                    return Err(RunError::RunDirExists(root.to_path_buf()));
                }
                if !root.join(MANIFEST_FILE).is_file() {
                    return Err(RunError::Config(format!(
                        "refusing to replace {}: it is not a run directory",
                        root.display()
                    )));
                }
                fs::remove_dir_all(root).map_err(io_err(root))?;
            }
        }
        fs::create_dir_all(root).map_err(io_err(root))?;
        let mut dir = Self {
            root: root.to_path_buf(),
            manifest,
        };
        let cfg = dir.manifest.config.to_toml();
        dir.write(CONFIG_FILE, cfg.as_bytes())?;
        dir.flush_manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn flush_manifest(&self) -> Result<(), RunError> {
        let path = self.root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    pub fn finish(mut self) -> Result<Manifest, RunError> {
        self.manifest.status = RunStatus::Complete;
        self.flush_manifest()?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, RunError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

fn input(path: &Path) -> Result<(Vec<u8>, Artifact), RunError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RunError::Missing(format!("{} does not exist", path.display())),
        _ => RunError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let art = Artifact {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, art))
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Backends instantiated from a config.
pub struct Backends {
    pub perception: Box<dyn PerceptionModel>,
    pub reasoning: Box<dyn ReasoningModel>,
    pub scorer: Option<Box<dyn ScoringModel>>,
    pub templates: PromptTemplates,
}

impl Backends {
    pub fn build(cfg: &RunConfig, vocabulary: Vec<String>) -> Result<Self, RunError> {
        let templates = match &cfg.templates_dir {
            Some(d) => PromptTemplates::load_dir(d)?,
            None => PromptTemplates::default(),
        };
        let needs_remote = cfg.perception.kind == PerceptionKind::Remote
            || cfg.reasoning.kind == ReasoningKind::Remote
            || cfg.policy.kind == PolicyKind::Remote;
        let client = if needs_remote {
            Some(Arc::new(RemoteClient::new(cfg.remote.clone().with_env())?))
        } else {
            None
        };
        let remote = || client.clone().expect("client built for remote roles");
        let perception: Box<dyn PerceptionModel> = match cfg.perception.kind {
            PerceptionKind::Oracle => {
                Box::new(OraclePerception::new(cfg.perception.oracle)?.with_templates(templates.clone()))
            }
            PerceptionKind::Mock => Box::new(MockBackend::new(cfg.perception.script.clone()).repeating()),
            PerceptionKind::Remote => Box::new(RemotePerception::new(remote(), templates.clone())),
        };
        let reasoning: Box<dyn ReasoningModel> = match cfg.reasoning.kind {
            ReasoningKind::Scripted => Box::new(ScriptedReasoner::new(vocabulary).with_templates(templates.clone())),
            ReasoningKind::Mock => Box::new(MockBackend::new(cfg.reasoning.script.clone()).repeating()),
            ReasoningKind::Remote => Box::new(RemoteReasoner::new(remote())),
        };
        let scorer: Option<Box<dyn ScoringModel>> = match cfg.policy.kind {
            PolicyKind::Mock => Some(Box::new(MockBackend::scorer(MOCK_HALF_LOGPROB))),
            PolicyKind::Remote => Some(Box::new(RemoteScorer::new(remote()))),
            PolicyKind::Compact | PolicyKind::Expert => None,
        };
        Ok(Self {
            perception,
            reasoning,
            scorer,
            templates,
        })
    }

    pub fn agent(&self, cfg: AgentConfig) -> Agent<'_> {
        Agent::new(self.perception.as_ref(), self.reasoning.as_ref(), &self.templates, cfg)
    }
}

fn nav_vocabulary(tasks: &[(NavTask, u64)]) -> Vec<String> {
    let mut v: Vec<String> = LANDMARKS.iter().map(|s| s.to_string()).collect();
    for (t, _) in tasks {
        v.extend(landmark_vocabulary(&t.graph));
    }
    v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    v.dedup();
    v
}

/// The policy's parameters, when it has any.
fn load_policy(cfg: &RunConfig, inputs: &mut BTreeMap<String, Artifact>) -> Result<Option<CompactPolicyParams>, RunError> {
    if cfg.policy.kind != PolicyKind::Compact {
        return Ok(None);
    }
    let path = cfg
        .policy
        .checkpoint
        .as_ref()
        .ok_or_else(|| RunError::Missing("policy.kind = \"compact\" needs policy.checkpoint".into()))?;
    let (bytes, art) = input(path)?;
    let text = String::from_utf8(bytes).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let params = CompactPolicyParams::from_checkpoint_json(&text)?;
    inputs.insert("policy_checkpoint".into(), art);
    Ok(Some(params))
}

fn actor<'a>(kind: PolicyKind, params: Option<&'a CompactPolicyParams>, backends: &'a Backends) -> Actor<'a> {
    match (kind, params, &backends.scorer) {
        (PolicyKind::Compact, Some(p), _) => Actor::Compact(p),
        (PolicyKind::Mock | PolicyKind::Remote, _, Some(s)) => Actor::Scorer(s.as_ref()),
        _ => Actor::Expert,
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    RunEpisode,
    CollectDemos,
    TrainBc,
    TrainPpo,
    Evaluate,
    Ablate,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::RunEpisode => "run-episode",
            Command::CollectDemos => "collect-demos",
            Command::TrainBc => "train-bc",
            Command::TrainPpo => "train-ppo",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
        }
    }
}

/// What a finished command reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

pub fn default_out(cmd: Command, cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-seed{}", cmd.as_str(), cfg.seed))
}

/// Runs `cmd` into its run directory.
pub fn execute(cmd: Command, cfg: &RunConfig, force: bool) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    with_jobs(cfg.jobs, || match cfg.env {
        EnvKind::Household => {
            let hc = cfg.household.env;
            let ctx = Ctx {
                cfg,
                cmd,
                force,
                vocabulary: standard_vocabulary(),
                tasks: cfg.household_tasks(Split::Test, cfg.episodes.per_family),
                train_tasks: cfg.household_tasks(Split::Train, cfg.episodes.demos_per_family),
                probe_tasks: cfg.household_tasks(Split::Test, cfg.episodes.probe_per_family),
                ppo_tasks: ppo_household_tasks(cfg),
                family_of: |t: &TaskSpec| t.family.as_str().to_string(),
            };
            ctx.run(move || HouseholdEnv::new(hc))
        }
        EnvKind::Nav => {
            let nc = NavConfig {
                step_cap: cfg.nav.step_cap,
            };
            let tasks = cfg.nav_tasks()?;
            let ctx = Ctx {
                cfg,
                cmd,
                force,
                vocabulary: nav_vocabulary(&tasks),
                train_tasks: tasks.clone(),
                probe_tasks: tasks.clone(),
                ppo_tasks: tasks.clone(),
                tasks,
                family_of: |_: &NavTask| "nav".to_string(),
            };
            ctx.run(move || NavEnv::new(nc))
        }
    })
}

/// PPO rollouts cycle through the families on training seeds disjoint from
/// the demonstrations.
fn ppo_household_tasks(cfg: &RunConfig) -> Vec<(TaskSpec, u64)> {
    let fams = &cfg.household.families;
    let offset = cfg.first_task() + cfg.episodes.demos_per_family;
    (0..cfg.ppo.total_episodes.max(1) as u64)
        .map(|i| {
            let f = fams[(i % fams.len() as u64) as usize];
            let seed = Split::Train.seed(offset + i);
            (TaskSpec::sample(f, seed), seed)
        })
        .collect()
}

struct Ctx<'c, T> {
    cfg: &'c RunConfig,
    cmd: Command,
    force: bool,
    vocabulary: Vec<String>,
    tasks: Vec<(T, u64)>,
    train_tasks: Vec<(T, u64)>,
    probe_tasks: Vec<(T, u64)>,
    ppo_tasks: Vec<(T, u64)>,
    family_of: fn(&T) -> String,
}

#[derive(Serialize)]
struct EpisodeSummary<'a> {
    episode_id: &'a str,
    family: &'a str,
    seed: u64,
    success: bool,
    steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    nav: Option<&'a NavTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<NavMetrics>,
}

fn episode_lines(logs: &[EpisodeLog]) -> String {
    let mut out = String::new();
    for l in logs {
        let t = &l.trajectory;
        let s = EpisodeSummary {
            episode_id: &t.episode_id,
            family: &t.family,
            seed: t.seed,
            success: t.success,
            steps: t.transitions.len(),
            nav: t.nav.as_ref(),
            metrics: t.nav.as_ref().map(nav_metrics),
        };
        out.push_str(&serde_json::to_string(&s).expect("summary serializes"));
        out.push('\n');
    }
    out
}

fn jsonl(logs: &[EpisodeLog]) -> (String, String) {
    let mut traj = String::new();
    let mut trans = String::new();
    for l in logs {
        traj.push_str(&l.trajectory.to_jsonl());
        trans.push_str(&l.transcripts_jsonl());
    }
    (traj, trans)
}

/// Success rate per family in first-seen order, then the pooled rate.
fn success_table(logs: &[EpisodeLog]) -> (Vec<(String, usize, f64)>, f64) {
    let mut fams: Vec<(String, usize, usize)> = Vec::new();
    for l in logs {
        let f = &l.trajectory.family;
        let i = match fams.iter().position(|(n, _, _)| n == f) {
            Some(i) => i,
            None => {
                fams.push((f.clone(), 0, 0));
                fams.len() - 1
            }
        };
        fams[i].1 += 1;
        fams[i].2 += usize::from(l.trajectory.success);
    }
    let total = logs.iter().filter(|l| l.trajectory.success).count() as f64 / logs.len().max(1) as f64;
    (
        fams.into_iter().map(|(f, n, s)| (f, n, s as f64 / n as f64)).collect(),
        total,
    )
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes") + "\n"
}

impl<T: Clone + Send + Sync> Ctx<'_, T> {
    fn open(&self, inputs: BTreeMap<String, Artifact>, seeds: Vec<u64>) -> Result<RunDir, RunError> {
        let out = self.cfg.out.clone().unwrap_or_else(|| default_out(self.cmd, self.cfg));
        RunDir::create(
            &out,
            self.force,
            Manifest {
                tool: "prism".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: self.cmd.as_str().into(),
                status: RunStatus::Started,
                config: self.cfg.clone(),
                seeds,
                inputs,
                outputs: BTreeMap::new(),
            },
        )
    }

    fn seeds(tasks: &[(T, u64)]) -> Vec<u64> {
        tasks.iter().map(|(_, s)| *s).collect()
    }

    fn run<E, F>(&self, make_env: F) -> Result<RunOutcome, RunError>
    where
        E: Environment<Task = T>,
        F: Fn() -> E + Sync,
    {
        match self.cmd {
            Command::RunEpisode | Command::Evaluate => self.episodes(make_env),
            Command::CollectDemos => self.collect(make_env),
            Command::TrainBc => self.train_bc(make_env),
            Command::TrainPpo => self.train_ppo(make_env),
            Command::Ablate => self.ablate(make_env),
        }
    }

    fn episodes<E, F>(&self, make_env: F) -> Result<RunOutcome, RunError>
    where
        E: Environment<Task = T>,
        F: Fn() -> E + Sync,
    {
        let cfg = self.cfg;
        let mut inputs = BTreeMap::new();
        let params = load_policy(cfg, &mut inputs)?;
        let backends = Backends::build(cfg, self.vocabulary.clone())?;
        let mut dir = self.open(inputs, Self::seeds(&self.tasks))?;
        let agent = backends.agent(cfg.agent);
        let actor = actor(cfg.policy.kind, params.as_ref(), &backends);
        let logs = run_batch(agent, &make_env, &self.tasks, &actor, cfg.exec())
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let calls = call_accounting(&logs)?;
        if let Some(bad) = logs.iter().find(|l| !l.trajectory.done_flag_consistent()) {
            return Err(RunError::Invariant(format!("{}: done flag not on the last step only", bad.trajectory.episode_id)));
        }
        let (traj, trans) = jsonl(&logs);
        dir.write("trajectories.jsonl", traj.as_bytes())?;
        dir.write("transcripts.jsonl", trans.as_bytes())?;
        dir.write("episodes.jsonl", episode_lines(&logs).as_bytes())?;

        let (fams, sr) = success_table(&logs);
        let navs: Vec<NavMetrics> = logs.iter().filter_map(|l| l.trajectory.nav.as_ref().map(nav_metrics)).collect();
        let nav = mean_nav_metrics(&navs);
        let summary = EvalSummary {
            episodes: logs.len(),
            sr,
            per_family: fams.iter().map(|(f, n, s)| (f.clone(), FamilySr { episodes: *n, sr: *s })).collect(),
            nav,
            calls,
        };
        let table = summary.markdown();
        dir.write("summary.json", json_pretty(&summary).as_bytes())?;
        dir.write("summary.md", table.as_bytes())?;
        let root = dir.root().to_path_buf();
        Ok(RunOutcome {
            dir: root,
            manifest: dir.finish()?,
            summary: table,
        })
    }

    fn collect<E, F>(&self, make_env: F) -> Result<RunOutcome, RunError>
    where
        E: Environment<Task = T>,
        F: Fn() -> E + Sync,
    {
        let cfg = self.cfg;
        let backends = Backends::build(cfg, self.vocabulary.clone())?;
        let mut dir = self.open(BTreeMap::new(), Self::seeds(&self.train_tasks))?;
        let ds = collect_demos(
            backends.agent(cfg.agent),
            &make_env,
            &self.train_tasks,
            cfg.demos.failure_rate,
            "train",
            cfg.exec(),
        )?;
        dir.write("demos.jsonl", ds.to_jsonl().as_bytes())?;
        let summary = serde_json::json!({
            "episodes_kept": ds.episodes_kept,
            "episodes_dropped": ds.episodes_dropped,
            "records": ds.records.len(),
            "sha256": ds.hash(),
        });
        dir.write("summary.json", json_pretty(&summary).as_bytes())?;
        let text = format!(
            "collected {} demonstration steps from {} episodes ({} dropped)\n",
            ds.records.len(),
            ds.episodes_kept,
            ds.episodes_dropped
        );
        let root = dir.root().to_path_buf();
        Ok(RunOutcome {
            dir: root,
            manifest: dir.finish()?,
            summary: text,
        })
    }

    fn train_bc<E, F>(&self, make_env: F) -> Result<RunOutcome, RunError>
    where
        E: Environment<Task = T>,
        F: Fn() -> E + Sync,
    {
        let cfg = self.cfg;
        let backends = Backends::build(cfg, self.vocabulary.clone())?;
        let mut inputs = BTreeMap::new();
        let loaded = match &cfg.demos.path {
            Some(p) => {
                let (bytes, art) = input(p)?;
                inputs.insert("demos".into(), art);
                let text = String::from_utf8(bytes).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
                Some(DemoDataset::from_jsonl("train", &text).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let mut dir = self.open(inputs, Self::seeds(&self.train_tasks))?;
        let ds = match loaded {
            Some(ds) => ds,
            None => {
                let ds = collect_demos(
                    backends.agent(cfg.agent),
                    &make_env,
                    &self.train_tasks,
                    cfg.demos.failure_rate,
                    "train",
                    cfg.exec(),
                )?;
                dir.write("demos.jsonl", ds.to_jsonl().as_bytes())?;
                ds
            }
        };
        let vocab = match cfg.env {
            EnvKind::Household => standard_action_space(),
            EnvKind::Nav => make_env().action_space(),
        };
        let init = CompactPolicyParams::zeros(vocab, DEFAULT_FEATURE_DIM, cfg.bc.seed);
        let examples = bc_examples(&init, &ds.records, cfg.exec())?;
        let out = train_bc(init, &examples, &cfg.bc, None, cfg.exec())?;
        dir.write("checkpoint.json", out.params.to_checkpoint_json()?.as_bytes())?;
        let log: String = out
            .log
            .iter()
            .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
            .collect();
        dir.write("bc_log.jsonl", log.as_bytes())?;
        let last = out.log.last().map(|m| m.loss).unwrap_or(f64::NAN);
        let text = format!(
            "trained BC on {} steps for {} epochs; final loss {last:.4}\n",
            examples.len(),
            cfg.bc.epochs
        );
        let root = dir.root().to_path_buf();
        Ok(RunOutcome {
            dir: root,
            manifest: dir.finish()?,
            summary: text,
        })
    }

    fn train_ppo<E, F>(&self, make_env: F) -> Result<RunOutcome, RunError>
    where
        E: Environment<Task = T>,
        F: Fn() -> E + Sync,
    {
        let cfg = self.cfg;
        let path = cfg
            .policy
            .checkpoint
            .as_ref()
            .ok_or_else(|| RunError::Missing("train-ppo needs a BC checkpoint in policy.checkpoint".into()))?;
        let (bytes, art) = input(path)?;
        let text = String::from_utf8(bytes).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let params = CompactPolicyParams::from_checkpoint_json(&text)?;
        let backends = Backends::build(cfg, self.vocabulary.clone())?;
        let mut dir = self.open(BTreeMap::from([("bc_checkpoint".to_string(), art)]), Self::seeds(&self.ppo_tasks))?;
        let agent = backends.agent(cfg.agent);
        let mut groups: Vec<(String, Vec<(T, u64)>)> = Vec::new();
        for t in &self.probe_tasks {
            let f = (self.family_of)(&t.0);
            match groups.iter_mut().find(|(g, _)| *g == f) {
                Some((_, v)) => v.push(t.clone()),
                None => groups.push((f, vec![t.clone()])),
            }
        }
        let exec = cfg.exec();
        let probe = |p: &CompactPolicyParams| -> Result<Vec<(String, f64)>, TrainError> {
            groups
                .iter()
                .map(|(f, ts)| Ok((f.clone(), greedy_success_rate(p, agent, &make_env, ts, exec)?)))
                .collect()
        };
        let out = train_ppo(params, true, agent, &make_env, &self.ppo_tasks, &probe, &cfg.ppo, exec)?;
        dir.write("checkpoint.json", out.params.to_checkpoint_json()?.as_bytes())?;
        let log: String = out
            .log
            .iter()
            .map(|m| serde_json::to_string(m).expect("iteration serializes") + "\n")
            .collect();
        dir.write("ppo_log.jsonl", log.as_bytes())?;
        let summary = serde_json::json!({
            "initial_probe": out.initial_probe,
            "best_probe": out.best_probe,
            "best_iteration": out.best_iteration,
        });
        dir.write("summary.json", json_pretty(&summary).as_bytes())?;
        let mut text = String::from("| family | before PPO | after PPO |\n|---|---|---|\n");
        for ((f, a), (_, b)) in out.initial_probe.iter().zip(&out.best_probe) {
            let _ = writeln!(text, "| {f} | {:.1}% | {:.1}% |", 100.0 * a, 100.0 * b);
        }
        let root = dir.root().to_path_buf();
        Ok(RunOutcome {
            dir: root,
            manifest: dir.finish()?,
            summary: text,
        })
    }

    fn ablate<E, F>(&self, make_env: F) -> Result<RunOutcome, RunError>
    where
        E: Environment<Task = T>,
        F: Fn() -> E + Sync,
    {
        let cfg = self.cfg;
        let suite = cfg
            .ablation
            .suite
            .ok_or_else(|| RunError::Config("ablate needs a suite (--suite or ablation.suite)".into()))?;
        let mut inputs = BTreeMap::new();
        let params = load_policy(cfg, &mut inputs)?;
        let backends = Backends::build(cfg, self.vocabulary.clone())?;
        let mut dir = self.open(inputs, Self::seeds(&self.tasks))?;
        let oq = OracleQuestions::default();
        let setup = AblationSetup {
            perception: backends.perception.as_ref(),
            reasoning: backends.reasoning.as_ref(),
            templates: &backends.templates,
            oracle_questions: &oq,
            agent: cfg.agent,
            bootstrap_seed: cfg.ablation.bootstrap_seed,
            exec: cfg.exec(),
        };
        let actor = actor(cfg.policy.kind, params.as_ref(), &backends);
        let report = run_ablation(suite, &setup, &make_env, &self.tasks, &actor)?;
        for (arm, logs) in &report.logs {
            call_accounting(logs)?;
            let (traj, trans) = jsonl(logs);
            dir.write(&format!("arms/{arm}/trajectories.jsonl"), traj.as_bytes())?;
            dir.write(&format!("arms/{arm}/transcripts.jsonl"), trans.as_bytes())?;
        }
        dir.write("ablation.csv", report.to_csv()?.as_bytes())?;
        let md = report.to_markdown();
        dir.write("ablation.md", md.as_bytes())?;
        let root = dir.root().to_path_buf();
        Ok(RunOutcome {
            dir: root,
            manifest: dir.finish()?,
            summary: md,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
struct FamilySr {
    episodes: usize,
    sr: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvalSummary {
    episodes: usize,
    sr: f64,
    per_family: Vec<(String, FamilySr)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nav: Option<NavMetrics>,
    calls: CallSummary,
}

impl EvalSummary {
    fn markdown(&self) -> String {
        let mut s = String::new();
        if let Some(m) = &self.nav {
            s.push_str("| Episodes | NE (m) | OSR | SR | SPL |\n|---|---|---|---|---|\n");
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.1}% | {:.1}% | {:.1}% |",
                self.episodes,
                m.ne,
                100.0 * m.osr,
                100.0 * m.sr,
                100.0 * m.spl
            );
        } else {
            s.push_str("| Family | Episodes | SR |\n|---|---|---|\n");
            for (f, r) in &self.per_family {
                let _ = writeln!(s, "| {f} | {} | {:.1}% |", r.episodes, 100.0 * r.sr);
            }
            let _ = writeln!(s, "| avg | {} | {:.1}% |", self.episodes, 100.0 * self.sr);
        }
        let _ = writeln!(
            s,
            "\nperception calls {}, reasoning calls {}, steps {}, questions per view {:.2}",
            self.calls.perception_calls, self.calls.reasoning_calls, self.calls.steps, self.calls.mean_questions
        );
        s
    }
}
