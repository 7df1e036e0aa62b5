//! Procedural episode generator over a fixed room layout.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::action::EntityRef;
use super::expert::expert_action;
use super::scene::{HouseObject, Receptacle, ReceptacleKind, SceneState, TaskFamily, TaskSpec};
use crate::util::keyed_rng;

/// Object kinds the generator places.
pub const OBJECT_KINDS: [&str; 10] = [
    "apple", "book", "bread", "cd", "egg", "mug", "pen", "plate", "potato", "tomato",
];

/// Highest instance id used for any object kind.
pub const MAX_INSTANCE_ID: u32 = 2;

pub const DEFAULT_STEP_CAP: usize = 30;

/// Receptacles of the standard room, in search order (desklamp excluded from
/// search).
pub fn standard_layout() -> Vec<Receptacle> {
    use ReceptacleKind::*;
    vec![
        Receptacle::new("cabinet", 1, Container, true),
        Receptacle::new("countertop", 1, Surface, false),
        Receptacle::new("desklamp", 1, Desklamp, false),
        Receptacle::new("diningtable", 1, Surface, false),
        Receptacle::new("drawer", 1, Container, true),
        Receptacle::new("fridge", 1, Fridge, true),
        Receptacle::new("garbagecan", 1, Garbage, false),
        Receptacle::new("microwave", 1, Microwave, true),
        Receptacle::new("shelf", 1, Surface, false),
        Receptacle::new("sinkbasin", 1, Sink, false),
    ]
}

fn family_objects(f: TaskFamily) -> &'static [&'static str] {
    match f {
        TaskFamily::Pick => &OBJECT_KINDS,
        TaskFamily::Look => &["book", "cd", "mug", "pen"],
        TaskFamily::Clean => &["apple", "mug", "plate", "potato", "tomato"],
        TaskFamily::Heat => &["apple", "bread", "egg", "mug", "potato", "tomato"],
        TaskFamily::Cool => &["apple", "bread", "egg", "mug", "plate", "potato", "tomato"],
        TaskFamily::Pick2 => &["apple", "book", "cd", "egg", "mug", "pen", "plate", "potato", "tomato"],
    }
}

fn family_targets(f: TaskFamily) -> &'static [&'static str] {
    match f {
        TaskFamily::Pick | TaskFamily::Pick2 => {
            &["cabinet", "countertop", "diningtable", "drawer", "garbagecan", "shelf"]
        }
        TaskFamily::Look => &["desklamp"],
        _ => &["cabinet", "countertop", "diningtable", "shelf"],
    }
}

/// Disjoint seed ranges for training and held-out evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const STRIDE: u64 = 1 << 32;

    pub fn seed(self, index: u64) -> u64 {
        match self {
            Split::Train => index % Self::STRIDE,
            Split::Test => Self::STRIDE + index % Self::STRIDE,
        }
    }

    pub fn of(seed: u64) -> Split {
        if seed < Self::STRIDE {
            Split::Train
        } else {
            Split::Test
        }
    }
}

/// `per_family` matched-seed tasks for each family, family-major, using
/// seed indices `first..first + per_family` of `split`.
pub fn task_batch(families: &[TaskFamily], per_family: u64, split: Split, first: u64) -> Vec<(TaskSpec, u64)> {
    families
        .iter()
        .flat_map(|&f| {
            (0..per_family).map(move |i| {
                let seed = split.seed(first + i);
                (TaskSpec::sample(f, seed), seed)
            })
        })
        .collect()
}

impl TaskSpec {
    /// Deterministic task draw for `(family, seed)`.
    pub fn sample(family: TaskFamily, seed: u64) -> TaskSpec {
        let mut rng = keyed_rng(seed, &["task", family.as_str()]);
        TaskSpec {
            family,
            object_name: family_objects(family).choose(&mut rng).expect("non-empty").to_string(),
            target_receptacle: family_targets(family)
                .choose(&mut rng)
                .expect("non-empty")
                .to_string(),
        }
    }
}

/// Difficulty scales the number of distractors and the occlusion rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty(pub u8);

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty(1)
    }
}

impl Difficulty {
    fn distractors(self) -> usize {
        2 + 2 * self.0.min(2) as usize
    }

    fn occlusion_rate(self) -> f64 {
        [0.05, 0.15, 0.25][self.0.min(2) as usize]
    }
}

/// Runs the expert from `state`; `Some(steps)` if it succeeds within `cap`.
pub fn expert_solves(state: &SceneState, task: &TaskSpec, cap: usize) -> Option<usize> {
    let mut s = state.clone();
    for step in 0..cap {
        if s.satisfies(task) {
            return Some(step);
        }
        let a = expert_action(&s, task).ok()?;
        s.apply(&a);
    }
    s.satisfies(task).then_some(cap)
}

fn sample_scene(seed: u64, attempt: u32, task: &TaskSpec, difficulty: Difficulty) -> SceneState {
    let mut rng = keyed_rng(
        seed,
        &["scene", task.family.as_str(), &task.object_name, &task.target_receptacle, &attempt.to_string()],
    );
    let receptacles = standard_layout();
    let holders: Vec<EntityRef> = receptacles
        .iter()
        .filter(|r| r.kind != ReceptacleKind::Desklamp)
        .map(|r| r.entity())
        .collect();
    let placeable: Vec<EntityRef> = holders
        .iter()
        .filter(|r| r.name != task.target_receptacle)
        .cloned()
        .collect();

    let mut objects = Vec::new();
    for id in 1..=task.count() as u32 {
        let at = placeable.choose(&mut rng).expect("placeable receptacles").clone();
        objects.push(HouseObject::new(&task.object_name, id, at));
    }
    let others: Vec<&str> = OBJECT_KINDS
        .iter()
        .copied()
        .filter(|k| *k != task.object_name)
        .collect();
    for _ in 0..difficulty.distractors() {
        let kind = *others.choose(&mut rng).expect("distractor kinds");
        let id = objects.iter().filter(|o: &&HouseObject| o.name == kind).count() as u32 + 1;
        if id > MAX_INSTANCE_ID {
            continue;
        }
        let at = holders.choose(&mut rng).expect("holders").clone();
        objects.push(HouseObject::new(kind, id, at));
    }
    let occ = difficulty.occlusion_rate();
    for o in &mut objects {
        o.occluded = rng.gen_bool(occ);
    }
    let agent_at = holders.choose(&mut rng).expect("holders").clone();
    SceneState {
        receptacles,
        objects,
        agent_at,
        lamp_on: false,
        examined_under_lamp: Default::default(),
        known_objects: OBJECT_KINDS.iter().map(|s| s.to_string()).collect(),
    }
}

/// Seeded scene for `task`. Rejection-samples until the expert solves the
/// episode within the step cap, so every generated episode is solvable.
pub fn generate_scene(seed: u64, task: &TaskSpec, difficulty: Difficulty) -> SceneState {
    let mut attempt = 0;
    loop {
        let s = sample_scene(seed, attempt, task, difficulty);
        if expert_solves(&s, task, DEFAULT_STEP_CAP - 2).is_some() || attempt >= 1000 {
            return s;
        }
        attempt += 1;
    }
}
