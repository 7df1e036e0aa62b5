//! Rule-based demonstrator.
//!
//! The bot knows where objects are but still searches receptacles in a fixed
//! cyclic order and opens every closed container it visits, so its
//! behaviour can be imitated from observations alone.

use super::action::{EntityRef, HouseholdAction};
use super::scene::{HouseObject, Location, ReceptacleKind, SceneState, TaskFamily, TaskSpec};
use crate::util::keyed_unit;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExpertError {
    #[error("no receptacle named `{0}` in the scene")]
    MissingReceptacle(String),
    #[error("no `{0}` left to deliver")]
    NoCandidate(String),
}

/// Receptacles searched, in order. The desklamp holds nothing.
pub fn search_order(state: &SceneState) -> Vec<EntityRef> {
    state
        .receptacles
        .iter()
        .filter(|r| r.kind != ReceptacleKind::Desklamp)
        .map(|r| r.entity())
        .collect()
}

fn find_kind(state: &SceneState, kind: ReceptacleKind) -> Result<EntityRef, ExpertError> {
    state
        .receptacles
        .iter()
        .find(|r| r.kind == kind)
        .map(|r| r.entity())
        .ok_or_else(|| ExpertError::MissingReceptacle(format!("{kind:?}").to_lowercase()))
}

fn find_named(state: &SceneState, name: &str) -> Result<EntityRef, ExpertError> {
    state
        .receptacles
        .iter()
        .find(|r| r.name == name)
        .map(|r| r.entity())
        .ok_or_else(|| ExpertError::MissingReceptacle(name.into()))
}

fn is_candidate(task: &TaskSpec, o: &HouseObject) -> bool {
    o.name == task.object_name
        && match &o.location {
            Location::Receptacle(r) => {
                task.family != TaskFamily::Pick2 || r.name != task.target_receptacle
            }
            Location::Carried => true,
        }
}

/// Next action of the rule pipeline:
/// locate, take, process, deliver (or light and examine for `look`).
pub fn expert_action(state: &SceneState, task: &TaskSpec) -> Result<HouseholdAction, ExpertError> {
    use HouseholdAction::*;
    let here = state.current();
    let at = state.agent_at.clone();

    if let Some(held) = state.held() {
        let obj = held.entity();
        if held.name != task.object_name {
            // Not ours: set it down where we stand.
            if !here.accessible() {
                return Ok(Open(at));
            }
            return Ok(Put { object: obj, on: at });
        }
        if let Some(kind) = task.family.appliance() {
            if !task.processed(held) {
                let app = find_kind(state, kind)?;
                if at != app {
                    return Ok(GoTo(app));
                }
                return Ok(match kind {
                    ReceptacleKind::Sink => Clean { object: obj, with: app },
                    ReceptacleKind::Microwave => Heat { object: obj, with: app },
                    _ => Cool { object: obj, with: app },
                });
            }
        }
        if task.family == TaskFamily::Look {
            let lamp = find_kind(state, ReceptacleKind::Desklamp)?;
            if at != lamp {
                return Ok(GoTo(lamp));
            }
            if !state.lamp_on {
                return Ok(Use(lamp));
            }
            return Ok(Examine(obj));
        }
        let target = find_named(state, &task.target_receptacle)?;
        if at != target {
            return Ok(GoTo(target));
        }
        if !here.accessible() {
            return Ok(Open(at));
        }
        return Ok(Put { object: obj, on: at });
    }

    if !state.objects.iter().any(|o| is_candidate(task, o)) {
        return Err(ExpertError::NoCandidate(task.object_name.clone()));
    }
    if !here.accessible() {
        return Ok(Open(at));
    }
    if let Some(o) = state
        .objects_at(&at)
        .filter(|o| is_candidate(task, o))
        .min_by_key(|o| o.id)
    {
        return Ok(Take {
            object: o.entity(),
            from: at,
        });
    }
    let order = search_order(state);
    let next = match order.iter().position(|r| *r == at) {
        Some(i) => order[(i + 1) % order.len()].clone(),
        None => order[0].clone(),
    };
    Ok(GoTo(next))
}

/// The demonstrator with an optional abandonment rate. An abandoned episode
/// stops producing actions partway through and never succeeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HouseholdExpert {
    pub failure_rate: f64,
}

impl Default for HouseholdExpert {
    fn default() -> Self {
        Self { failure_rate: 0.0 }
    }
}

impl HouseholdExpert {
    pub fn new(failure_rate: f64) -> Self {
        Self { failure_rate }
    }

    /// Step at which the bot gives up on episode `seed`, if it does.
    pub fn abandon_step(&self, seed: u64) -> Option<usize> {
        let s = seed.to_string();
        if keyed_unit(seed, &["expert-abandon", &s]) < self.failure_rate {
            let frac = keyed_unit(seed, &["expert-abandon-step", &s]);
            Some((frac * 8.0) as usize)
        } else {
            None
        }
    }
}
