//! Scene state, transition rules and renderings.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::action::{EntityRef, HouseholdAction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptacleKind {
    Surface,
    Container,
    Sink,
    Microwave,
    Fridge,
    Garbage,
    Desklamp,
}

impl ReceptacleKind {
    pub(crate) fn preposition(self) -> &'static str {
        match self {
            ReceptacleKind::Surface | ReceptacleKind::Desklamp => "On",
            _ => "In",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receptacle {
    pub name: String,
    pub id: u32,
    pub kind: ReceptacleKind,
    pub openable: bool,
    pub open: bool,
}

impl Receptacle {
    pub fn new(name: &str, id: u32, kind: ReceptacleKind, openable: bool) -> Self {
        Self {
            name: name.into(),
            id,
            kind,
            openable,
            open: !openable,
        }
    }

    pub fn entity(&self) -> EntityRef {
        EntityRef::new(self.name.clone(), self.id)
    }

    /// Contents can be seen and reached.
    pub fn accessible(&self) -> bool {
        !self.openable || self.open
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "at")]
pub enum Location {
    Receptacle(EntityRef),
    Carried,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HouseObject {
    pub name: String,
    pub id: u32,
    pub location: Location,
    #[serde(default)]
    pub clean: bool,
    #[serde(default)]
    pub hot: bool,
    #[serde(default)]
    pub cold: bool,
    #[serde(default)]
    pub occluded: bool,
}

impl HouseObject {
    pub fn new(name: &str, id: u32, at: EntityRef) -> Self {
        Self {
            name: name.into(),
            id,
            location: Location::Receptacle(at),
            clean: false,
            hot: false,
            cold: false,
            occluded: false,
        }
    }

    pub fn entity(&self) -> EntityRef {
        EntityRef::new(self.name.clone(), self.id)
    }

    fn state_suffix(&self) -> String {
        let mut s = Vec::new();
        if self.clean {
            s.push("clean");
        }
        if self.hot {
            s.push("hot");
        }
        if self.cold {
            s.push("cold");
        }
        if s.is_empty() {
            String::new()
        } else {
            format!(" ({})", s.join(", "))
        }
    }

    fn is_at(&self, r: &EntityRef) -> bool {
        matches!(&self.location, Location::Receptacle(at) if at == r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Pick,
    Look,
    Clean,
    Heat,
    Cool,
    Pick2,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::Pick,
        TaskFamily::Look,
        TaskFamily::Clean,
        TaskFamily::Heat,
        TaskFamily::Cool,
        TaskFamily::Pick2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Pick => "pick",
            TaskFamily::Look => "look",
            TaskFamily::Clean => "clean",
            TaskFamily::Heat => "heat",
            TaskFamily::Cool => "cool",
            TaskFamily::Pick2 => "pick2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s.to_ascii_lowercase())
    }

    /// Receptacle kind an object must be processed at, if any.
    pub fn appliance(self) -> Option<ReceptacleKind> {
        match self {
            TaskFamily::Clean => Some(ReceptacleKind::Sink),
            TaskFamily::Heat => Some(ReceptacleKind::Microwave),
            TaskFamily::Cool => Some(ReceptacleKind::Fridge),
            _ => None,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub object_name: String,
    /// Receptacle name (any id) the object must end up in. For `look` this is
    /// the desklamp.
    pub target_receptacle: String,
}

impl TaskSpec {
    pub fn count(&self) -> usize {
        if self.family == TaskFamily::Pick2 {
            2
        } else {
            1
        }
    }

    pub fn goal_text(&self) -> String {
        let (o, t) = (&self.object_name, &self.target_receptacle);
        match self.family {
            TaskFamily::Pick => format!("put some {o} in {t}"),
            TaskFamily::Look => format!("look at {o} under the {t}"),
            TaskFamily::Clean => format!("clean some {o} and put it in {t}"),
            TaskFamily::Heat => format!("heat some {o} and put it in {t}"),
            TaskFamily::Cool => format!("cool some {o} and put it in {t}"),
            TaskFamily::Pick2 => format!("find two {o} and put them in {t}"),
        }
    }

    /// Inverse of [`TaskSpec::goal_text`].
    pub fn from_goal(goal: &str) -> Option<TaskSpec> {
        let g = goal.trim();
        let two = |rest: &str, mid: &str| -> Option<(String, String)> {
            let (o, t) = rest.split_once(mid)?;
            (!o.is_empty() && !t.is_empty() && !t.contains(' ')).then(|| (o.to_string(), t.to_string()))
        };
        let (family, (object_name, target_receptacle)) = if let Some(r) = g.strip_prefix("put some ") {
            (TaskFamily::Pick, two(r, " in ")?)
        } else if let Some(r) = g.strip_prefix("look at ") {
            (TaskFamily::Look, two(r, " under the ")?)
        } else if let Some(r) = g.strip_prefix("find two ") {
            (TaskFamily::Pick2, two(r, " and put them in ")?)
        } else {
            let (verb, r) = g.split_once(" some ")?;
            let family = match verb {
                "clean" => TaskFamily::Clean,
                "heat" => TaskFamily::Heat,
                "cool" => TaskFamily::Cool,
                _ => return None,
            };
            (family, two(r, " and put it in ")?)
        };
        Some(TaskSpec {
            family,
            object_name,
            target_receptacle,
        })
    }

    /// Whether `obj` satisfies the family's processing requirement.
    pub fn processed(&self, obj: &HouseObject) -> bool {
        match self.family {
            TaskFamily::Clean => obj.clean,
            TaskFamily::Heat => obj.hot,
            TaskFamily::Cool => obj.cold,
            _ => true,
        }
    }
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub receptacles: Vec<Receptacle>,
    pub objects: Vec<HouseObject>,
    pub agent_at: EntityRef,
    #[serde(default)]
    pub lamp_on: bool,
    /// Objects examined while held under a lit desklamp.
    #[serde(default)]
    pub examined_under_lamp: BTreeSet<EntityRef>,
    /// Object kinds the perception vocabulary knows about beyond those present.
    #[serde(default)]
    pub known_objects: Vec<String>,
}

/// Ground truth visible from the agent's current position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalScene {
    pub location: Receptacle,
    /// Everything at the location, including occluded objects and the
    /// contents of closed containers.
    pub objects: Vec<HouseObject>,
    pub held: Option<HouseObject>,
    pub lamp_on: bool,
    /// Object and receptacle names, longest first.
    pub vocabulary: Arc<Vec<String>>,
}

/// `a apple 1, a egg 2, and a mug 1`
pub(crate) fn render_list(items: &[String]) -> String {
    match items.len() {
        0 => "nothing".into(),
        1 => items[0].clone(),
        n => format!("{}, and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

impl LocalScene {
    pub fn label(&self) -> String {
        self.location.entity().to_string()
    }

    /// Objects whose presence can be confirmed by looking (occluded ones
    /// included).
    pub fn visible_objects(&self) -> impl Iterator<Item = &HouseObject> {
        let accessible = self.location.accessible();
        self.objects.iter().filter(move |_| accessible)
    }

    /// Key identifying what the camera sees, for keyed noise.
    pub fn view_key(&self) -> String {
        let mut k = format!("{}|{}", self.label(), self.location.open);
        if let Some(h) = &self.held {
            k.push_str(&format!("|h:{}", h.entity()));
        }
        for o in self.visible_objects() {
            k.push_str(&format!("|{}", o.entity()));
        }
        k
    }

    fn opening(&self) -> String {
        let mut s = format!("You are at {}.", self.label());
        if self.location.openable {
            let st = if self.location.open { "open" } else { "closed" };
            s.push_str(&format!(" The {} is {st}.", self.label()));
        }
        s
    }

    /// Full-truth rendering with ids and object states, occluded objects and
    /// closed-container contents included.
    pub fn render_full(&self) -> String {
        let items: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("a {}{}", o.entity(), o.state_suffix()))
            .collect();
        let mut s = format!(
            "{} {} the {}, you see {}.",
            self.opening(),
            self.location.kind.preposition(),
            self.label(),
            render_list(&items)
        );
        if let Some(h) = &self.held {
            s.push_str(&format!(" Your hand holds a {}{}.", h.entity(), h.state_suffix()));
        }
        if self.location.kind == ReceptacleKind::Desklamp {
            s.push_str(if self.lamp_on {
                " The desklamp is on."
            } else {
                " The desklamp is off."
            });
        }
        s
    }

    /// Camera-level rendering without object states. `keep` decides which
    /// visible objects are mentioned; `extra` items are appended verbatim.
    pub(crate) fn render_view(
        &self,
        mut keep: impl FnMut(&HouseObject) -> bool,
        extra: &[String],
    ) -> String {
        let mut s = self.opening();
        if self.location.accessible() {
            let mut items: Vec<String> = self
                .visible_objects()
                .filter(|o| !o.occluded && keep(o))
                .map(|o| format!("a {}", o.entity()))
                .collect();
            items.extend(extra.iter().cloned());
            s.push_str(&format!(
                " {} the {}, you see {}.",
                self.location.kind.preposition(),
                self.label(),
                render_list(&items)
            ));
        }
        if let Some(h) = &self.held {
            s.push_str(&format!(" Your hand holds a {}.", h.entity()));
        }
        s
    }
}

impl SceneState {
    pub fn receptacle(&self, r: &EntityRef) -> Option<&Receptacle> {
        self.receptacles.iter().find(|x| x.name == r.name && x.id == r.id)
    }

    fn receptacle_mut(&mut self, r: &EntityRef) -> Option<&mut Receptacle> {
        self.receptacles
            .iter_mut()
            .find(|x| x.name == r.name && x.id == r.id)
    }

    pub fn current(&self) -> &Receptacle {
        self.receptacle(&self.agent_at)
            .expect("agent is always at an existing receptacle")
    }

    pub fn held(&self) -> Option<&HouseObject> {
        self.objects.iter().find(|o| o.location == Location::Carried)
    }

    pub fn object(&self, e: &EntityRef) -> Option<&HouseObject> {
        self.objects.iter().find(|o| o.name == e.name && o.id == e.id)
    }

    fn object_mut(&mut self, e: &EntityRef) -> Option<&mut HouseObject> {
        self.objects
            .iter_mut()
            .find(|o| o.name == e.name && o.id == e.id)
    }

    pub fn objects_at<'a>(&'a self, r: &'a EntityRef) -> impl Iterator<Item = &'a HouseObject> {
        self.objects.iter().filter(move |o| o.is_at(r))
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut names: BTreeSet<String> = self.known_objects.iter().cloned().collect();
        names.extend(self.objects.iter().map(|o| o.name.clone()));
        names.extend(self.receptacles.iter().map(|r| r.name.clone()));
        let mut v: Vec<String> = names.into_iter().collect();
        v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        v
    }

    pub fn local_scene(&self, vocabulary: Arc<Vec<String>>) -> LocalScene {
        LocalScene {
            location: self.current().clone(),
            objects: self.objects_at(&self.agent_at).cloned().collect(),
            held: self.held().cloned(),
            lamp_on: self.lamp_on,
            vocabulary,
        }
    }

    /// Full-truth rendering of the agent's surroundings.
    pub fn render_symbolic(&self) -> String {
        self.local_scene(Arc::new(self.vocabulary())).render_full()
    }

    /// Applies `action`. Returns whether it had an effect; inadmissible
    /// actions leave the state untouched.
    pub fn apply(&mut self, action: &HouseholdAction) -> bool {
        use HouseholdAction::*;
        if !self.is_admissible(action) {
            return false;
        }
        match action {
            GoTo(r) => self.agent_at = r.clone(),
            Open(r) => self.receptacle_mut(r).expect("checked").open = true,
            Close(r) => self.receptacle_mut(r).expect("checked").open = false,
            Take { object, .. } => {
                self.object_mut(object).expect("checked").location = Location::Carried
            }
            Put { object, on } => {
                self.object_mut(object).expect("checked").location =
                    Location::Receptacle(on.clone())
            }
            Clean { object, .. } => self.object_mut(object).expect("checked").clean = true,
            Heat { object, .. } => {
                let o = self.object_mut(object).expect("checked");
                o.hot = true;
                o.cold = false;
            }
            Cool { object, .. } => {
                let o = self.object_mut(object).expect("checked");
                o.cold = true;
                o.hot = false;
            }
            Use(_) => self.lamp_on = true,
            Examine(o) => {
                let held = self.held().map(|h| h.entity());
                if self.lamp_on
                    && self.current().kind == ReceptacleKind::Desklamp
                    && held.as_ref() == Some(o)
                {
                    self.examined_under_lamp.insert(o.clone());
                }
            }
        }
        true
    }

    pub fn is_admissible(&self, action: &HouseholdAction) -> bool {
        use HouseholdAction::*;
        let here = self.current();
        let at = |r: &EntityRef| *r == self.agent_at;
        let held = self.held().map(|h| h.entity());
        let holding = |o: &EntityRef| held.as_ref() == Some(o);
        let processing_at = |with: &EntityRef, kind: ReceptacleKind| {
            at(with) && here.kind == kind
        };
        match action {
            GoTo(r) => self.receptacle(r).is_some() && !at(r),
            Open(r) => at(r) && here.openable && !here.open,
            Close(r) => at(r) && here.openable && here.open,
            Take { object, from } => {
                at(from)
                    && held.is_none()
                    && here.accessible()
                    && self.object(object).is_some_and(|o| o.is_at(from))
            }
            Put { object, on } => at(on) && holding(object) && here.accessible(),
            Clean { object, with } => holding(object) && processing_at(with, ReceptacleKind::Sink),
            Heat { object, with } => {
                holding(object) && processing_at(with, ReceptacleKind::Microwave)
            }
            Cool { object, with } => holding(object) && processing_at(with, ReceptacleKind::Fridge),
            Use(r) => at(r) && here.kind == ReceptacleKind::Desklamp,
            Examine(o) => {
                holding(o)
                    || (here.accessible() && self.object(o).is_some_and(|x| x.is_at(&self.agent_at)))
            }
        }
    }

    /// Every currently admissible action.
    pub fn admissible(&self) -> Vec<HouseholdAction> {
        use HouseholdAction::*;
        let mut out = Vec::new();
        let here = self.agent_at.clone();
        for r in &self.receptacles {
            out.push(GoTo(r.entity()));
        }
        out.push(Open(here.clone()));
        out.push(Close(here.clone()));
        out.push(Use(here.clone()));
        for o in &self.objects {
            let e = o.entity();
            out.push(Take { object: e.clone(), from: here.clone() });
            out.push(Put { object: e.clone(), on: here.clone() });
            out.push(Clean { object: e.clone(), with: here.clone() });
            out.push(Heat { object: e.clone(), with: here.clone() });
            out.push(Cool { object: e.clone(), with: here.clone() });
            out.push(Examine(e));
        }
        out.retain(|a| self.is_admissible(a));
        out
    }

    /// Success predicate for `task`.
    pub fn satisfies(&self, task: &TaskSpec) -> bool {
        if task.family == TaskFamily::Look {
            return self
                .examined_under_lamp
                .iter()
                .any(|e| e.name == task.object_name);
        }
        let delivered = self
            .objects
            .iter()
            .filter(|o| o.name == task.object_name && task.processed(o))
            .filter(|o| {
                matches!(&o.location, Location::Receptacle(r) if r.name == task.target_receptacle)
            })
            .count();
        delivered >= task.count()
    }

    /// Conservation check: the object multiset, by identity.
    pub fn object_ids(&self) -> BTreeSet<EntityRef> {
        self.objects.iter().map(|o| o.entity()).collect()
    }
}

/// Test fixture: a toilet with a spraybottle and an occluded toiletpaper.
#[cfg(test)]
pub(crate) fn toilet_scene() -> SceneState {
    let toilet = Receptacle::new("toilet", 1, ReceptacleKind::Surface, false);
    let mut tp = HouseObject::new("toiletpaper", 1, toilet.entity());
    tp.occluded = true;
    SceneState {
        agent_at: toilet.entity(),
        objects: vec![HouseObject::new("spraybottle", 1, toilet.entity()), tp],
        receptacles: vec![toilet],
        lamp_on: false,
        examined_under_lamp: Default::default(),
        known_objects: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_text_round_trips() {
        for f in TaskFamily::ALL {
            for seed in 0..20 {
                let t = TaskSpec::sample(f, seed);
                assert_eq!(TaskSpec::from_goal(&t.goal_text()), Some(t));
            }
        }
        assert_eq!(TaskSpec::from_goal("go to the moon"), None);
    }

    #[test]
    fn full_render_includes_occluded() {
        assert_eq!(
            toilet_scene().render_symbolic(),
            "You are at toilet 1. On the toilet 1, you see a spraybottle 1, and a toiletpaper 1."
        );
    }

    #[test]
    fn empty_receptacle_renders_nothing() {
        let mut s = toilet_scene();
        s.objects.clear();
        assert!(s.render_symbolic().ends_with("you see nothing."));
    }

    #[test]
    fn heat_then_cool_leaves_cold() {
        let mw = Receptacle::new("microwave", 1, ReceptacleKind::Microwave, true);
        let fr = Receptacle::new("fridge", 1, ReceptacleKind::Fridge, true);
        let mut egg = HouseObject::new("egg", 1, mw.entity());
        egg.location = Location::Carried;
        let mut s = SceneState {
            agent_at: mw.entity(),
            receptacles: vec![mw, fr],
            objects: vec![egg],
            lamp_on: false,
            examined_under_lamp: Default::default(),
            known_objects: vec![],
        };
        assert!(s.apply(&"heat egg 1 with microwave 1".parse().unwrap()));
        assert!(s.objects[0].hot);
        assert!(s.apply(&"go to fridge 1".parse().unwrap()));
        assert!(s.apply(&"cool egg 1 with fridge 1".parse().unwrap()));
        assert!(s.objects[0].cold && !s.objects[0].hot);
    }
}
