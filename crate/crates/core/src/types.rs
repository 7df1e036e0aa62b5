//! Shared domain types flowing through the perception/decision loop.
//!
//! Everything here is an immutable value once built. The ground-truth scene
//! carried by an [`Observation`] is crate-private: only environments, the
//! scripted oracle backends and the evaluators can read it. Policies and the
//! question-answering pipeline only ever see rendered text.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::household::LocalScene;
use crate::env::nav::NavView;

/// Default number of (description, action) pairs kept in the history window.
pub const DEFAULT_HISTORY_LEN: usize = 5;

// ---------------------------------------------------------------------------
// Text values
// ---------------------------------------------------------------------------

/// A natural-language instruction. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Goal(String);

impl Goal {
    pub fn new(text: impl Into<String>) -> Result<Self, EmptyText> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmptyText("goal"));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Goal {
    type Error = EmptyText;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Goal::new(value)
    }
}

impl From<Goal> for String {
    fn from(g: Goal) -> String {
        g.0
    }
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{0} text must not be empty")]
pub struct EmptyText(pub &'static str);

/// An action string in the environment's textual grammar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionText(pub String);

impl ActionText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ActionText {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionKind {
    Initial,
    Final,
    GoalAware,
    Raw,
}

/// A textual scene description produced by a backend or a merge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub kind: DescriptionKind,
    pub source: String,
}

impl Description {
    pub fn new(
        text: impl Into<String>,
        kind: DescriptionKind,
        source: impl Into<String>,
    ) -> Result<Self, EmptyText> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmptyText("description"));
        }
        Ok(Self {
            text,
            kind,
            source: source.into(),
        })
    }

    /// Same text, relabelled as a final description.
    pub(crate) fn into_final(self, source: impl Into<String>) -> Self {
        Self {
            text: self.text,
            kind: DescriptionKind::Final,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    /// Ordinal label, `question1`, `question2`, ...
    pub key: String,
    pub text: String,
}

impl Question {
    pub fn new(key: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            text: text.into(),
        }
    }
}

pub type QuestionSet = Vec<Question>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Question,
    pub answer: String,
}

impl QaPair {
    pub fn new(question: Question, answer: impl Into<String>) -> Self {
        Self {
            question,
            answer: answer.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// Environment-private ground truth attached to an observation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Symbolic {
    Household(LocalScene),
    Nav(NavView),
}

/// What the agent receives at a step. `raw_view` is an opaque handle that
/// only perception backends interpret (an image URL for remote models, say).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub episode_id: String,
    pub step: usize,
    pub raw_view: Option<String>,
    pub(crate) symbolic: Symbolic,
}

impl Observation {
    pub(crate) fn new(episode_id: impl Into<String>, step: usize, symbolic: Symbolic) -> Self {
        Self {
            episode_id: episode_id.into(),
            step,
            raw_view: None,
            symbolic,
        }
    }

    pub fn with_raw_view(mut self, handle: impl Into<String>) -> Self {
        self.raw_view = Some(handle.into());
        self
    }

    /// Ground-truth rendering used by description-quality metrics.
    pub(crate) fn ground_truth_text(&self) -> String {
        match &self.symbolic {
            Symbolic::Household(scene) => scene.render_full(),
            Symbolic::Nav(view) => view.render_full(),
        }
    }
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

/// Bounded FIFO of (final description, action) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    entries: VecDeque<(String, ActionText)>,
    max_len: usize,
}

impl Default for HistoryWindow {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN)
    }
}

impl HistoryWindow {
    /// # Panics
    /// If `max_len` is zero.
    pub fn new(max_len: usize) -> Self {
        assert!(max_len > 0, "history window needs max_len >= 1");
        Self {
            entries: VecDeque::with_capacity(max_len),
            max_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &ActionText)> {
        self.entries.iter().map(|(d, a)| (d.as_str(), a))
    }

    /// Returns a new window with `(d_final, action)` as the newest entry.
    pub fn push(&self, d_final: &Description, action: &ActionText) -> HistoryWindow {
        debug_assert_eq!(d_final.kind, DescriptionKind::Final);
        let mut next = self.clone();
        if next.entries.len() == next.max_len {
            next.entries.pop_front();
        }
        next.entries
            .push_back((d_final.text.clone(), action.clone()));
        next
    }

    /// `Observation: <d>\nAction: <a>` per entry, oldest first, newline separated.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(d, a)| format!("Observation: {d}\nAction: {a}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

// ---------------------------------------------------------------------------
// Environment contract
// ---------------------------------------------------------------------------

/// Result of executing one action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// A labelled view of the current state. Household environments have a
/// single unlabelled view; navigation has front/left/right.
#[derive(Debug, Clone)]
pub struct View {
    pub label: Option<String>,
    pub observation: Observation,
}

/// Goal-conditioned POMDP interface every simulator implements.
pub trait Environment: Send {
    type Task: Clone + Send + Sync;

    /// Deterministic in `(task, seed)`.
    fn reset(&mut self, task: &Self::Task, seed: u64) -> Observation;
    fn step(&mut self, action: &ActionText) -> Result<StepOutcome, crate::env::EnvError>;
    /// State-dependent admissible actions.
    fn admissible_actions(&self) -> Vec<ActionText>;
    /// The static action vocabulary a policy chooses from. It does not depend
    /// on hidden state.
    fn action_space(&self) -> Vec<ActionText>;
    fn goal(&self) -> &Goal;
    /// Views observed at the current step; one perception pass per view.
    fn views(&self) -> Vec<View>;
    fn episode_id(&self) -> &str;
    fn steps_taken(&self) -> usize;
    /// Task family label used to group results.
    fn family(&self) -> String;
    /// Next action of the privileged demonstrator, if one applies.
    fn expert_action(&self) -> Option<ActionText> {
        None
    }
    /// Visited positions and path lengths for navigation episodes.
    fn nav_trace(&self) -> Option<NavTrace> {
        None
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Per-step backend call counts, summed over views.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub perception_calls: usize,
    pub reasoning_calls: usize,
    pub questions: usize,
}

/// One logged step. `goal` lives on the trajectory; the JSONL writer
/// flattens it back in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub step: usize,
    pub d_f: String,
    pub history_render: String,
    pub action: ActionText,
    pub reward: f64,
    pub done: bool,
    pub calls: CallCounts,
}

/// Raw navigation log: enough to recompute every navigation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavTrace {
    /// Visited node ids in order, start included.
    pub nodes: Vec<String>,
    pub positions: Vec<[f64; 3]>,
    pub goal: [f64; 3],
    pub shortest_path_length: f64,
    pub walked_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub goal: Goal,
    pub family: String,
    pub seed: u64,
    pub transitions: Vec<Transition>,
    pub success: bool,
    /// Navigation only: exact shortest-path length and walked length.
    pub expert_path_length: Option<f64>,
    pub agent_path_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nav: Option<NavTrace>,
}

/// One JSONL line of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode_id: String,
    pub step: usize,
    pub goal: String,
    pub d_f: String,
    pub history_render: String,
    pub action: String,
    pub reward: f64,
    pub done: bool,
    pub calls: CallCounts,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = TransitionRecord> + '_ {
        self.transitions.iter().map(|t| TransitionRecord {
            episode_id: self.episode_id.clone(),
            step: t.step,
            goal: self.goal.to_string(),
            d_f: t.d_f.clone(),
            history_render: t.history_render.clone(),
            action: t.action.to_string(),
            reward: t.reward,
            done: t.done,
            calls: t.calls,
        })
    }

    /// JSONL, one transition per line, trailing newline.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.records() {
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// `done` is set exactly once, on the last transition.
    pub fn done_flag_consistent(&self) -> bool {
        let n = self.transitions.len();
        n > 0
            && self
                .transitions
                .iter()
                .enumerate()
                .all(|(i, t)| t.done == (i + 1 == n))
    }
}
