//! The agent loop: perceive every view, build the policy prompt, act, update
//! the history.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, PerceptionModel, ReasoningModel, ScoringModel};
use crate::dqa::{perceive, DqaConfig, DqaError, StepTranscript};
use crate::env::EnvError;
use crate::exec::Exec;
use crate::policy::{compact_select, select_action, CompactPolicyParams, PolicyError, PolicyPrompt};
use crate::templates::PromptTemplates;
use crate::types::{
    ActionText, CallCounts, Description, DescriptionKind, Environment, HistoryWindow, StepOutcome,
    Trajectory, Transition, DEFAULT_HISTORY_LEN,
};

/// Hard stop for environments that never signal `done`.
const RUNAWAY_STEPS: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("episode {episode} step {step}: perception failed: {source}")]
    Perception {
        episode: String,
        step: usize,
        #[source]
        source: DqaError,
    },
    #[error("episode {episode} step {step}: {source}")]
    Policy {
        episode: String,
        step: usize,
        #[source]
        source: PolicyError,
    },
    #[error("episode {episode} step {step}: {source}")]
    Env {
        episode: String,
        step: usize,
        #[source]
        source: EnvError,
    },
    #[error("episode {0} exceeded {RUNAWAY_STEPS} steps without finishing")]
    Runaway(String),
    #[error("episode {episode}: inconsistent call accounting at step {step}")]
    Accounting { episode: String, step: usize },
}

impl AgentError {
    pub fn backend(&self) -> Option<&BackendError> {
        match self {
            AgentError::Perception { source, .. } => source.backend(),
            AgentError::Policy {
                source: PolicyError::Scoring { source, .. },
                ..
            } => Some(source),
            _ => None,
        }
    }
}

/// Which action set the policy chooses from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    /// The static vocabulary; reveals nothing about hidden state.
    #[default]
    ActionSpace,
    /// The simulator's admissible actions at the current state.
    Admissible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub dqa: DqaConfig,
    pub history_len: usize,
    pub candidates: CandidateSet,
    /// Fan-out for per-question answering and candidate scoring within a step.
    pub fan_out: Exec,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            dqa: DqaConfig::default(),
            history_len: DEFAULT_HISTORY_LEN,
            candidates: CandidateSet::default(),
            fan_out: Exec::Sequential,
        }
    }
}

/// Perception and reasoning backends plus the prompts they use.
#[derive(Clone, Copy)]
pub struct Agent<'a> {
    pub perception: &'a dyn PerceptionModel,
    pub reasoning: &'a dyn ReasoningModel,
    pub templates: &'a PromptTemplates,
    pub cfg: AgentConfig,
}

/// Per-step perception record: one transcript per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode_id: String,
    pub step: usize,
    pub views: Vec<StepTranscript>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub trajectory: Trajectory,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn transcripts_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("transcript serializes"));
            out.push('\n');
        }
        out
    }
}

/// Joins per-view final descriptions into one multi-view description.
pub fn assemble_views(views: &[(Option<String>, Description)]) -> Description {
    if let [(None, d)] = views {
        return d.clone();
    }
    let text = views
        .iter()
        .map(|(label, d)| match label {
            Some(l) => format!("{l}: {}", d.text),
            None => d.text.clone(),
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let source = views.first().map_or("", |v| v.1.source.as_str());
    Description::new(text, DescriptionKind::Final, source).expect("views are non-empty")
}

impl<'a> Agent<'a> {
    pub fn new(
        perception: &'a dyn PerceptionModel,
        reasoning: &'a dyn ReasoningModel,
        templates: &'a PromptTemplates,
        cfg: AgentConfig,
    ) -> Self {
        Self {
            perception,
            reasoning,
            templates,
            cfg,
        }
    }

    /// Runs the perception phase on every current view of `env`.
    pub fn perceive_env<E: Environment>(&self, env: &E) -> Result<(Description, StepRecord, CallCounts), DqaError> {
        let mut per_view = Vec::new();
        let mut transcripts = Vec::new();
        let mut calls = CallCounts::default();
        for v in env.views() {
            let (d_f, mut t) = perceive(
                self.perception,
                self.reasoning,
                self.templates,
                &v.observation,
                env.goal(),
                &self.cfg.dqa,
                self.cfg.fan_out,
            )?;
            t.view = v.label.clone();
            calls.perception_calls += t.perception_calls;
            calls.reasoning_calls += t.reasoning_calls;
            calls.questions += t.questions.len();
            per_view.push((v.label, d_f));
            transcripts.push(t);
        }
        let record = StepRecord {
            episode_id: env.episode_id().to_string(),
            step: env.steps_taken(),
            views: transcripts,
        };
        Ok((assemble_views(&per_view), record, calls))
    }
}

/// Step-by-step driver for one episode. [`run_episode`] wraps it; training
/// uses it directly to record extra per-step data.
pub struct EpisodeRunner<'a, E: Environment> {
    agent: Agent<'a>,
    env: E,
    seed: u64,
    history: HistoryWindow,
    transitions: Vec<Transition>,
    steps: Vec<StepRecord>,
    pending: Option<(PolicyPrompt, CallCounts)>,
    success: bool,
    done: bool,
}

impl<'a, E: Environment> EpisodeRunner<'a, E> {
    pub fn start(agent: Agent<'a>, mut env: E, task: &E::Task, seed: u64) -> Self {
        env.reset(task, seed);
        Self {
            history: HistoryWindow::new(agent.cfg.history_len.max(1)),
            agent,
            env,
            seed,
            transitions: Vec::new(),
            steps: Vec::new(),
            pending: None,
            success: false,
            done: false,
        }
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn ctx(&self) -> (String, usize) {
        (self.env.episode_id().to_string(), self.env.steps_taken())
    }

    /// Perceives the current state and returns the policy prompt.
    pub fn observe(&mut self) -> Result<PolicyPrompt, AgentError> {
        let (d_f, record, calls) = self.agent.perceive_env(&self.env).map_err(|source| {
            let (episode, step) = self.ctx();
            AgentError::Perception { episode, step, source }
        })?;
        if !record.views.iter().all(|t| t.calls_consistent()) {
            let (episode, step) = self.ctx();
            return Err(AgentError::Accounting { episode, step });
        }
        self.steps.push(record);
        let prompt = PolicyPrompt::new(self.env.goal().clone(), &self.history, d_f);
        self.pending = Some((prompt.clone(), calls));
        Ok(prompt)
    }

    pub fn candidates(&self) -> Vec<ActionText> {
        match self.agent.cfg.candidates {
            CandidateSet::ActionSpace => self.env.action_space(),
            CandidateSet::Admissible => self.env.admissible_actions(),
        }
    }

    /// Executes `action` for the last observed prompt.
    ///
    /// # Panics
    /// If called without a preceding [`observe`](Self::observe).
    pub fn act(&mut self, action: ActionText) -> Result<StepOutcome, AgentError> {
        let (prompt, calls) = self.pending.take().expect("observe before act");
        let step = self.env.steps_taken();
        let outcome = self.env.step(&action).map_err(|source| AgentError::Env {
            episode: self.env.episode_id().to_string(),
            step,
            source,
        })?;
        self.transitions.push(Transition {
            step,
            d_f: prompt.d_f.text.clone(),
            history_render: prompt.history_render.clone(),
            action: action.clone(),
            reward: outcome.reward,
            done: outcome.done,
            calls,
        });
        self.history = self.history.push(&prompt.d_f, &action);
        self.success = outcome.success;
        self.done = outcome.done;
        Ok(outcome)
    }

    pub fn finish(self) -> EpisodeLog {
        let nav = self.env.nav_trace();
        EpisodeLog {
            trajectory: Trajectory {
                episode_id: self.env.episode_id().to_string(),
                goal: self.env.goal().clone(),
                family: self.env.family(),
                seed: self.seed,
                transitions: self.transitions,
                success: self.success,
                expert_path_length: nav.as_ref().map(|t| t.shortest_path_length),
                agent_path_length: nav.as_ref().map(|t| t.walked_length),
                nav,
            },
            steps: self.steps,
        }
    }
}

/// How the next action is chosen.
pub enum Actor<'a> {
    /// Sum of per-token log-probabilities from a scoring model.
    Scorer(&'a dyn ScoringModel),
    /// Greedy compact policy.
    Compact(&'a CompactPolicyParams),
    /// The environment's privileged demonstrator.
    Expert,
}

impl Actor<'_> {
    fn choose<E: Environment>(
        &self,
        prompt: &PolicyPrompt,
        candidates: &[ActionText],
        env: &E,
        fan_out: Exec,
    ) -> Result<ActionText, PolicyError> {
        match self {
            Actor::Scorer(lm) => Ok(select_action(*lm, prompt, candidates, fan_out)?.action),
            Actor::Compact(p) => Ok(compact_select(p, prompt, Some(candidates))?.action),
            Actor::Expert => env.expert_action().ok_or(PolicyError::EmptyCandidates),
        }
    }
}

/// Runs one episode to completion.
pub fn run_episode<E: Environment>(
    agent: Agent<'_>,
    env: E,
    task: &E::Task,
    seed: u64,
    actor: &Actor<'_>,
) -> Result<EpisodeLog, AgentError> {
    let mut run = EpisodeRunner::start(agent, env, task, seed);
    while !run.is_done() {
        if run.transitions.len() >= RUNAWAY_STEPS {
            return Err(AgentError::Runaway(run.env.episode_id().to_string()));
        }
        let prompt = run.observe()?;
        let candidates = run.candidates();
        let action = actor
            .choose(&prompt, &candidates, run.env(), agent.cfg.fan_out)
            .map_err(|source| {
                let (episode, step) = run.ctx();
                AgentError::Policy { episode, step, source }
            })?;
        run.act(action)?;
    }
    Ok(run.finish())
}

/// Runs `tasks` (task, seed) in input order, each in a fresh environment.
pub fn run_batch<E, F>(
    agent: Agent<'_>,
    make_env: F,
    tasks: &[(E::Task, u64)],
    actor: &Actor<'_>,
    exec: Exec,
) -> Vec<Result<EpisodeLog, AgentError>>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    exec.map(tasks, |(task, seed)| run_episode(agent, make_env(), task, *seed, actor))
}
