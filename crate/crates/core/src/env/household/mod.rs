//! Desk-scale household simulator: receptacles, stateful objects, six task
//! families and a rule-based demonstrator.

mod action;
mod expert;
mod generate;
mod scene;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use action::{ActionParseError, EntityRef, HouseholdAction};
pub use expert::{expert_action, search_order, ExpertError, HouseholdExpert};
pub use generate::{
    expert_solves, generate_scene, standard_layout, Difficulty, Split, DEFAULT_STEP_CAP,
    task_batch, MAX_INSTANCE_ID, OBJECT_KINDS,
};
pub(crate) use scene::render_list;
#[cfg(test)]
pub(crate) use scene::toilet_scene;
pub use scene::{
    HouseObject, LocalScene, Location, Receptacle, ReceptacleKind, SceneState, TaskFamily,
    TaskSpec,
};

use super::EnvError;
use crate::types::{ActionText, Environment, Goal, Observation, StepOutcome, Symbolic, View};

const SUBGOAL_BONUS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HouseholdConfig {
    pub difficulty: Difficulty,
    pub step_cap: usize,
    /// +0.2 per newly completed subgoal. Off by default.
    pub subgoal_shaping: bool,
}

impl Default for HouseholdConfig {
    fn default() -> Self {
        Self {
            difficulty: Difficulty::default(),
            step_cap: DEFAULT_STEP_CAP,
            subgoal_shaping: false,
        }
    }
}

/// Static action vocabulary for a room: every grammatical action over its
/// receptacles and the known object kinds, independent of hidden state.
pub fn action_space_for(receptacles: &[Receptacle], object_kinds: &[String]) -> Vec<ActionText> {
    use HouseholdAction::*;
    let mut out = Vec::new();
    let objs: Vec<EntityRef> = object_kinds
        .iter()
        .flat_map(|k| (1..=MAX_INSTANCE_ID).map(move |id| EntityRef::new(k.clone(), id)))
        .collect();
    for r in receptacles {
        let e = r.entity();
        out.push(GoTo(e.clone()));
        if r.openable {
            out.push(Open(e.clone()));
            out.push(Close(e.clone()));
        }
        match r.kind {
            ReceptacleKind::Desklamp => out.push(Use(e.clone())),
            ReceptacleKind::Sink => {
                out.extend(objs.iter().map(|o| Clean { object: o.clone(), with: e.clone() }))
            }
            ReceptacleKind::Microwave => {
                out.extend(objs.iter().map(|o| Heat { object: o.clone(), with: e.clone() }))
            }
            ReceptacleKind::Fridge => {
                out.extend(objs.iter().map(|o| Cool { object: o.clone(), with: e.clone() }))
            }
            _ => {}
        }
        if r.kind != ReceptacleKind::Desklamp {
            for o in &objs {
                out.push(Take { object: o.clone(), from: e.clone() });
                out.push(Put { object: o.clone(), on: e.clone() });
            }
        }
    }
    out.extend(objs.iter().cloned().map(Examine));
    let mut v: Vec<ActionText> = out.into_iter().map(|a| ActionText(a.to_string())).collect();
    v.sort();
    v
}

/// Action vocabulary of the standard generated room.
pub fn standard_action_space() -> Vec<ActionText> {
    let kinds: Vec<String> = OBJECT_KINDS.iter().map(|s| s.to_string()).collect();
    action_space_for(&standard_layout(), &kinds)
}

/// Names the perception side can ground questions against.
pub fn standard_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = OBJECT_KINDS.iter().map(|s| s.to_string()).collect();
    v.extend(standard_layout().into_iter().map(|r| r.name));
    v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    v.dedup();
    v
}

/// One household episode.
#[derive(Debug, Clone)]
pub struct HouseholdEnv {
    cfg: HouseholdConfig,
    task: TaskSpec,
    goal: Goal,
    state: SceneState,
    vocabulary: Arc<Vec<String>>,
    episode_id: String,
    steps: usize,
    done: bool,
    subgoals: u8,
}

impl HouseholdEnv {
    pub fn new(cfg: HouseholdConfig) -> Self {
        let task = TaskSpec::sample(TaskFamily::Pick, 0);
        let state = generate_scene(0, &task, cfg.difficulty);
        Self::from_state(cfg, task, state, "household")
    }

    /// Starts an episode from an explicit scene (fixtures, tests).
    pub fn from_state(
        cfg: HouseholdConfig,
        task: TaskSpec,
        state: SceneState,
        episode_id: impl Into<String>,
    ) -> Self {
        let goal = Goal::new(task.goal_text()).expect("goal text is never empty");
        let vocabulary = Arc::new(state.vocabulary());
        Self {
            cfg,
            task,
            goal,
            state,
            vocabulary,
            episode_id: episode_id.into(),
            steps: 0,
            done: false,
            subgoals: 0,
        }
    }

    pub fn state(&self) -> &SceneState {
        &self.state
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn observation(&self) -> Observation {
        Observation::new(
            self.episode_id.clone(),
            self.steps,
            Symbolic::Household(self.state.local_scene(self.vocabulary.clone())),
        )
    }

    fn shaping(&mut self) -> f64 {
        let held_target = self
            .state
            .held()
            .is_some_and(|h| h.name == self.task.object_name);
        let processed = self.state.objects.iter().any(|o| {
            o.name == self.task.object_name && self.task.family.appliance().is_some() && self.task.processed(o)
        });
        let lit = self.task.family == TaskFamily::Look && self.state.lamp_on;
        let mut bonus = 0.0;
        for (bit, hit) in [(1u8, held_target), (2, processed), (4, lit)] {
            if hit && self.subgoals & bit == 0 {
                self.subgoals |= bit;
                bonus += SUBGOAL_BONUS;
            }
        }
        bonus
    }
}

impl Environment for HouseholdEnv {
    type Task = TaskSpec;

    fn reset(&mut self, task: &TaskSpec, seed: u64) -> Observation {
        let state = generate_scene(seed, task, self.cfg.difficulty);
        let id = format!("household-{}-{}", task.family, seed);
        *self = Self::from_state(self.cfg, task.clone(), state, id);
        self.observation()
    }

    fn step(&mut self, action: &ActionText) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let parsed: HouseholdAction = action.as_str().parse()?;
        self.state.apply(&parsed);
        self.steps += 1;
        let success = self.state.satisfies(&self.task);
        let mut reward = if success { 1.0 } else { 0.0 };
        if self.cfg.subgoal_shaping {
            reward += self.shaping();
        }
        self.done = success || self.steps >= self.cfg.step_cap;
        Ok(StepOutcome {
            reward,
            done: self.done,
            success,
        })
    }

    fn admissible_actions(&self) -> Vec<ActionText> {
        self.state
            .admissible()
            .into_iter()
            .map(|a| ActionText(a.to_string()))
            .collect()
    }

    fn action_space(&self) -> Vec<ActionText> {
        action_space_for(&self.state.receptacles, &self.state.known_objects_or_present())
    }

    fn goal(&self) -> &Goal {
        &self.goal
    }

    fn views(&self) -> Vec<View> {
        vec![View {
            label: None,
            observation: self.observation(),
        }]
    }

    fn episode_id(&self) -> &str {
        &self.episode_id
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn family(&self) -> String {
        self.task.family.as_str().to_string()
    }

    fn expert_action(&self) -> Option<ActionText> {
        expert_action(&self.state, &self.task)
            .ok()
            .map(|a| ActionText(a.to_string()))
    }
}

impl SceneState {
    fn known_objects_or_present(&self) -> Vec<String> {
        let mut v: Vec<String> = self.known_objects.clone();
        for o in &self.objects {
            if !v.contains(&o.name) {
                v.push(o.name.clone());
            }
        }
        v.sort();
        v
    }
}
