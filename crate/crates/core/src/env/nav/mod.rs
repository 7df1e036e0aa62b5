//! Desk-scale room-to-room navigation over a spatial graph with four
//! cardinal headings.

mod generate;
mod graph;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use generate::{generate_world, LANDMARKS};
pub use graph::{
    distance, EpisodeSpec, GraphError, GraphFixture, NavGraph, NavNode, ViewAnnotations,
};

use super::EnvError;
use crate::types::{ActionText, Environment, Goal, NavTrace, Observation, StepOutcome, Symbolic, View};
use crate::util::article;

/// Stopping within this many meters of the goal counts as success.
pub const SUCCESS_RADIUS: f64 = 3.0;
pub const DEFAULT_NAV_STEP_CAP: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    /// Planar angle, x axis = east, y axis = north.
    pub fn angle(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Heading::East => 0.0,
            Heading::North => FRAC_PI_2,
            Heading::West => PI,
            Heading::South => -FRAC_PI_2,
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn right(self) -> Heading {
        match self {
            Heading::North => Heading::East,
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Heading::North => "north",
            Heading::East => "east",
            Heading::South => "south",
            Heading::West => "west",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NavAction {
    TurnLeft,
    TurnRight,
    Forward,
    Stop,
}

impl NavAction {
    pub const ALL: [NavAction; 4] = [
        NavAction::Forward,
        NavAction::Stop,
        NavAction::TurnLeft,
        NavAction::TurnRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NavAction::TurnLeft => "turn left",
            NavAction::TurnRight => "turn right",
            NavAction::Forward => "move forward",
            NavAction::Stop => "stop",
        }
    }
}

impl fmt::Display for NavAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NavAction {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_lowercase();
        NavAction::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| EnvError::UnknownAction(s.to_string()))
    }
}

/// Which of the three camera views an observation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewLabel {
    Front,
    Left,
    Right,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 3] = [ViewLabel::Front, ViewLabel::Left, ViewLabel::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::Front => "Front",
            ViewLabel::Left => "Left",
            ViewLabel::Right => "Right",
        }
    }

    pub fn absolute(self, heading: Heading) -> Heading {
        match self {
            ViewLabel::Front => heading,
            ViewLabel::Left => heading.left(),
            ViewLabel::Right => heading.right(),
        }
    }
}

/// Ground truth of one camera view.
#[derive(Debug, Clone, PartialEq)]
pub struct NavView {
    pub node: String,
    pub direction: Heading,
    pub label: ViewLabel,
    pub landmarks: Vec<String>,
    /// Landmark names, longest first.
    pub vocabulary: Arc<Vec<String>>,
}

pub(crate) fn with_article(name: &str) -> String {
    format!("{} {name}", article(name))
}

impl NavView {
    pub fn view_key(&self) -> String {
        format!("{}|{}", self.node, self.direction.as_str())
    }

    pub fn render_full(&self) -> String {
        self.render_view(|_| true, &[])
    }

    pub(crate) fn render_view(&self, mut keep: impl FnMut(&str) -> bool, extra: &[String]) -> String {
        let mut items: Vec<String> = self
            .landmarks
            .iter()
            .filter(|l| keep(l))
            .map(|l| with_article(l))
            .collect();
        items.extend(extra.iter().cloned());
        format!("You see {}.", crate::env::household::render_list(&items))
    }
}

/// A loaded episode with its exact shortest-path length.
#[derive(Debug, Clone, PartialEq)]
pub struct NavEpisode {
    pub start: usize,
    pub heading: Heading,
    pub goal: usize,
    pub goal_pos: [f64; 3],
    pub instruction: Goal,
    pub shortest_path_length: f64,
}

impl NavEpisode {
    pub fn load(graph: &NavGraph, spec: &EpisodeSpec) -> Result<Self, GraphError> {
        let start = graph
            .index_of(&spec.start)
            .ok_or_else(|| GraphError::UnknownNode(spec.start.clone()))?;
        let goal = graph
            .index_of(&spec.goal)
            .ok_or_else(|| GraphError::UnknownNode(spec.goal.clone()))?;
        let (_, len) = graph.shortest_path(start, goal).ok_or_else(|| GraphError::Unreachable {
            start: spec.start.clone(),
            goal: spec.goal.clone(),
        })?;
        let instruction = Goal::new(spec.instruction.clone())
            .map_err(|_| GraphError::UnknownNode("<empty instruction>".into()))?;
        Ok(Self {
            start,
            heading: spec.heading,
            goal,
            goal_pos: graph.nodes[goal].pos,
            instruction,
            shortest_path_length: len,
        })
    }
}

/// Graph plus episode; the environment's task type.
#[derive(Debug, Clone)]
pub struct NavTask {
    pub graph: Arc<NavGraph>,
    pub episode: NavEpisode,
}

impl NavTask {
    pub fn from_fixture(fixture: &GraphFixture) -> Result<Vec<NavTask>, GraphError> {
        let graph = Arc::new(NavGraph::from_fixture(fixture)?);
        fixture
            .episodes
            .iter()
            .map(|e| {
                Ok(NavTask {
                    graph: graph.clone(),
                    episode: NavEpisode::load(&graph, e)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub node: usize,
    pub heading: Heading,
    pub steps: usize,
    pub stopped: bool,
    pub path: Vec<usize>,
}

/// Applies one action. Turns rotate by 90 degrees; a forward move with no
/// edge within 45 degrees of the heading leaves the agent in place.
pub fn nav_step(graph: &NavGraph, state: &NavState, action: NavAction) -> Result<NavState, EnvError> {
    if state.stopped {
        return Err(EnvError::EpisodeOver);
    }
    let mut next = state.clone();
    next.steps += 1;
    match action {
        NavAction::TurnLeft => next.heading = state.heading.left(),
        NavAction::TurnRight => next.heading = state.heading.right(),
        NavAction::Forward => {
            if let Some(j) = graph.forward_neighbour(state.node, state.heading) {
                next.node = j;
                next.path.push(j);
            }
        }
        NavAction::Stop => next.stopped = true,
    }
    Ok(next)
}

/// Shortest node path compiled into turn / forward / stop actions.
pub fn dijkstra_expert(graph: &NavGraph, episode: &NavEpisode) -> Result<Vec<NavAction>, GraphError> {
    let mut actions = route_actions(graph, episode.start, episode.heading, episode.goal)?;
    actions.push(NavAction::Stop);
    Ok(actions)
}

fn turns_between(from: Heading, to: Heading) -> Vec<NavAction> {
    if from == to {
        vec![]
    } else if from.right() == to {
        vec![NavAction::TurnRight]
    } else if from.left() == to {
        vec![NavAction::TurnLeft]
    } else {
        vec![NavAction::TurnRight, NavAction::TurnRight]
    }
}

fn route_actions(
    graph: &NavGraph,
    start: usize,
    heading: Heading,
    goal: usize,
) -> Result<Vec<NavAction>, GraphError> {
    let unreachable = || GraphError::Unreachable {
        start: graph.nodes[start].id.clone(),
        goal: graph.nodes[goal].id.clone(),
    };
    let (path, _) = graph.shortest_path(start, goal).ok_or_else(unreachable)?;
    let mut h = heading;
    let mut out = Vec::new();
    for w in path.windows(2) {
        let want = graph.heading_towards(w[0], w[1]).ok_or_else(unreachable)?;
        out.extend(turns_between(h, want));
        out.push(NavAction::Forward);
        h = want;
    }
    Ok(out)
}

/// Expert action from an arbitrary state, for relabelling and rollouts.
pub fn expert_next(graph: &NavGraph, state: &NavState, goal: usize) -> Result<NavAction, GraphError> {
    Ok(route_actions(graph, state.node, state.heading, goal)?
        .into_iter()
        .next()
        .unwrap_or(NavAction::Stop))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavConfig {
    pub step_cap: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            step_cap: DEFAULT_NAV_STEP_CAP,
        }
    }
}

/// One navigation episode.
#[derive(Debug, Clone)]
pub struct NavEnv {
    cfg: NavConfig,
    task: Option<NavTask>,
    state: NavState,
    goal: Goal,
    vocabulary: Arc<Vec<String>>,
    episode_id: String,
    done: bool,
}

impl NavEnv {
    pub fn new(cfg: NavConfig) -> Self {
        Self {
            cfg,
            task: None,
            state: NavState {
                node: 0,
                heading: Heading::North,
                steps: 0,
                stopped: false,
                path: vec![0],
            },
            goal: Goal::new("stop").expect("non-empty"),
            vocabulary: Arc::new(Vec::new()),
            episode_id: "nav".into(),
            done: false,
        }
    }

    fn task(&self) -> &NavTask {
        self.task.as_ref().expect("reset before use")
    }

    pub fn graph(&self) -> &NavGraph {
        &self.task().graph
    }

    pub fn episode(&self) -> &NavEpisode {
        &self.task().episode
    }

    pub fn state(&self) -> &NavState {
        &self.state
    }

    /// Sum of traversed edge lengths.
    pub fn walked_length(&self) -> f64 {
        let g = self.graph();
        self.state
            .path
            .windows(2)
            .map(|w| g.edge_length(w[0], w[1]).unwrap_or(0.0))
            .sum()
    }

    pub fn distance_to_goal(&self) -> f64 {
        distance(&self.graph().nodes[self.state.node].pos, &self.episode().goal_pos)
    }

    /// Positions of the visited nodes, in order.
    pub fn visited_positions(&self) -> Vec<[f64; 3]> {
        let g = self.graph();
        self.state.path.iter().map(|&i| g.nodes[i].pos).collect()
    }

    pub fn expert_next(&self) -> Result<NavAction, GraphError> {
        expert_next(self.graph(), &self.state, self.episode().goal)
    }

    pub fn view(&self, label: ViewLabel) -> NavView {
        let node = &self.graph().nodes[self.state.node];
        let direction = label.absolute(self.state.heading);
        NavView {
            node: node.id.clone(),
            direction,
            label,
            landmarks: node.views.absolute(direction).to_vec(),
            vocabulary: self.vocabulary.clone(),
        }
    }
}

/// Every landmark name the reasoner may ask about in `graph`, longest first.
pub fn landmark_vocabulary(graph: &NavGraph) -> Vec<String> {
    let mut v: Vec<String> = LANDMARKS.iter().map(|s| s.to_string()).collect();
    for n in &graph.nodes {
        for h in Heading::ALL {
            v.extend(n.views.absolute(h).iter().cloned());
        }
    }
    v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    v.dedup();
    v
}

impl Environment for NavEnv {
    type Task = NavTask;

    fn reset(&mut self, task: &NavTask, seed: u64) -> Observation {
        let ep = &task.episode;
        self.vocabulary = Arc::new(landmark_vocabulary(&task.graph));
        self.goal = ep.instruction.clone();
        self.state = NavState {
            node: ep.start,
            heading: ep.heading,
            steps: 0,
            stopped: false,
            path: vec![ep.start],
        };
        self.episode_id = format!("nav-{}-{}", task.graph.nodes[ep.start].id, seed);
        self.task = Some(task.clone());
        self.done = false;
        Observation::new(
            self.episode_id.clone(),
            0,
            Symbolic::Nav(self.view(ViewLabel::Front)),
        )
    }

    fn step(&mut self, action: &ActionText) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let a: NavAction = action.as_str().parse()?;
        self.state = nav_step(self.graph(), &self.state, a)?;
        let capped = self.state.steps >= self.cfg.step_cap;
        self.done = self.state.stopped || capped;
        let success = self.state.stopped && self.distance_to_goal() <= SUCCESS_RADIUS;
        Ok(StepOutcome {
            reward: if success { 1.0 } else { 0.0 },
            done: self.done,
            success,
        })
    }

    fn admissible_actions(&self) -> Vec<ActionText> {
        self.action_space()
    }

    fn action_space(&self) -> Vec<ActionText> {
        NavAction::ALL
            .into_iter()
            .map(|a| ActionText::new(a.as_str()))
            .collect()
    }

    fn goal(&self) -> &Goal {
        &self.goal
    }

    fn views(&self) -> Vec<View> {
        ViewLabel::ALL
            .into_iter()
            .map(|l| View {
                label: Some(l.as_str().to_string()),
                observation: Observation::new(
                    self.episode_id.clone(),
                    self.state.steps,
                    Symbolic::Nav(self.view(l)),
                ),
            })
            .collect()
    }

    fn episode_id(&self) -> &str {
        &self.episode_id
    }

    fn steps_taken(&self) -> usize {
        self.state.steps
    }

    fn family(&self) -> String {
        "nav".into()
    }

    fn expert_action(&self) -> Option<ActionText> {
        self.expert_next().ok().map(|a| ActionText::new(a.as_str()))
    }

    fn nav_trace(&self) -> Option<NavTrace> {
        let g = self.graph();
        Some(NavTrace {
            nodes: self.state.path.iter().map(|&i| g.nodes[i].id.clone()).collect(),
            positions: self.visited_positions(),
            goal: self.episode().goal_pos,
            shortest_path_length: self.episode().shortest_path_length,
            walked_length: self.walked_length(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(id: &str, x: f64, y: f64) -> NavNode {
        NavNode {
            id: id.into(),
            pos: [x, y, 0.0],
            views: ViewAnnotations::default(),
        }
    }

    fn line() -> NavGraph {
        NavGraph::new(
            vec![node("a", 0.0, 0.0), node("b", 0.0, 2.5), node("c", 0.0, 5.0)],
            &[["a".into(), "b".into()], ["b".into(), "c".into()]],
        )
        .unwrap()
    }

    fn task_on(graph: NavGraph, start: &str, heading: Heading, goal: &str) -> NavTask {
        let spec = EpisodeSpec {
            start: start.into(),
            heading,
            goal: goal.into(),
            instruction: "Go to the sofa and stop there.".into(),
        };
        let ep = NavEpisode::load(&graph, &spec).unwrap();
        NavTask {
            graph: Arc::new(graph),
            episode: ep,
        }
    }

    #[test]
    fn straight_line_expert() {
        let t = task_on(line(), "a", Heading::North, "c");
        assert_eq!(
            dijkstra_expert(&t.graph, &t.episode).unwrap(),
            vec![NavAction::Forward, NavAction::Forward, NavAction::Stop]
        );
        assert!((t.episode.shortest_path_length - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stop_within_radius_succeeds() {
        let g = NavGraph::new(
            vec![node("a", 0.0, 0.0), node("g", 0.0, 2.5), node("far", 0.0, -3.5)],
            &[["a".into(), "g".into()], ["a".into(), "far".into()]],
        )
        .unwrap();
        let t = task_on(g, "a", Heading::North, "g");
        let mut env = NavEnv::new(NavConfig::default());
        env.reset(&t, 0);
        let out = env.step(&ActionText::new("stop")).unwrap();
        assert!(out.done && out.success && out.reward == 1.0);
        assert!((env.distance_to_goal() - 2.5).abs() < 1e-12);
        assert!(matches!(env.step(&ActionText::new("stop")), Err(EnvError::EpisodeOver)));

        let mut env = NavEnv::new(NavConfig::default());
        let far = task_on(
            NavGraph::new(
                vec![node("a", 0.0, 0.0), node("g", 0.0, 3.5)],
                &[["a".into(), "g".into()]],
            )
            .unwrap(),
            "a",
            Heading::North,
            "g",
        );
        env.reset(&far, 0);
        let out = env.step(&ActionText::new("stop")).unwrap();
        assert!(out.done && !out.success && out.reward == 0.0);
    }

    #[test]
    fn forward_without_aligned_edge_is_noop() {
        let t = task_on(line(), "a", Heading::East, "c");
        let mut env = NavEnv::new(NavConfig::default());
        env.reset(&t, 0);
        env.step(&ActionText::new("move forward")).unwrap();
        assert_eq!(env.state().node, 0);
        assert_eq!(env.walked_length(), 0.0);
    }

    #[test]
    fn turning_remaps_views() {
        let mut g = line();
        g.nodes[0].views = ViewAnnotations {
            front: vec!["staircase".into()],
            left: vec!["sofa".into()],
            right: vec!["window".into()],
            back: vec!["door".into()],
        };
        let t = task_on(g, "a", Heading::North, "c");
        let mut env = NavEnv::new(NavConfig::default());
        env.reset(&t, 0);
        assert_eq!(env.view(ViewLabel::Front).landmarks, vec!["staircase"]);
        assert_eq!(env.views().len(), 3);
        env.step(&ActionText::new("turn left")).unwrap();
        assert_eq!(env.view(ViewLabel::Front).landmarks, vec!["sofa"]);
        assert_eq!(env.view(ViewLabel::Right).landmarks, vec!["staircase"]);
        assert_eq!(env.view(ViewLabel::Left).landmarks, vec!["door"]);
        assert_eq!(env.view(ViewLabel::Front).render_full(), "You see a sofa.");
    }

    #[test]
    fn unknown_action_is_rejected() {
        assert!("fly".parse::<NavAction>().is_err());
        assert_eq!("Move Forward".parse::<NavAction>().unwrap(), NavAction::Forward);
    }

    fn floyd_warshall(g: &NavGraph) -> Vec<Vec<f64>> {
        let n = g.len();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for i in 0..n {
            d[i][i] = 0.0;
            for &(j, w) in g.neighbours(i) {
                d[i][j] = w;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn expert_matches_all_pairs_oracle_on_random_graphs() {
        for seed in 0..20 {
            let fixture = generate_world(seed, 5, 6, 4);
            let g = NavGraph::from_fixture(&fixture).unwrap();
            assert_eq!(g.len(), 30);
            let fw = floyd_warshall(&g);
            for spec in &fixture.episodes {
                let ep = NavEpisode::load(&g, spec).unwrap();
                assert!((ep.shortest_path_length - fw[ep.start][ep.goal]).abs() < 1e-9);
                let mut s = NavState {
                    node: ep.start,
                    heading: ep.heading,
                    steps: 0,
                    stopped: false,
                    path: vec![ep.start],
                };
                let actions = dijkstra_expert(&g, &ep).unwrap();
                assert_eq!(actions.last(), Some(&NavAction::Stop));
                for a in actions {
                    s = nav_step(&g, &s, a).unwrap();
                }
                assert_eq!(s.node, ep.goal);
                let walked: f64 = s.path.windows(2).map(|w| g.edge_length(w[0], w[1]).unwrap()).sum();
                assert!((walked - ep.shortest_path_length).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn turns_compose(h in 0usize..4) {
            let h = Heading::ALL[h];
            prop_assert_eq!(h.left().right(), h);
            prop_assert_eq!(h.right().right().right().right(), h);
            prop_assert_eq!(h.left().left().left().left(), h);
        }

        #[test]
        fn walked_length_is_additive(seed in 0u64..50, moves in proptest::collection::vec(0usize..3, 0..30)) {
            let fixture = generate_world(seed, 4, 4, 1);
            let tasks = NavTask::from_fixture(&fixture).unwrap();
            let mut env = NavEnv::new(NavConfig { step_cap: 100 });
            env.reset(&tasks[0], seed);
            let mut last = 0.0;
            for m in moves {
                let a = [NavAction::Forward, NavAction::TurnLeft, NavAction::TurnRight][m];
                env.step(&ActionText::new(a.as_str())).unwrap();
                let l = env.walked_length();
                prop_assert!(l >= last);
                last = l;
            }
        }
    }
}
