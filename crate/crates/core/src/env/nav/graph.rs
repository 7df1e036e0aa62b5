//! Spatial navigation graph, fixture format and shortest paths.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::Heading;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewAnnotations {
    #[serde(default)]
    pub front: Vec<String>,
    #[serde(default)]
    pub left: Vec<String>,
    #[serde(default)]
    pub right: Vec<String>,
    #[serde(default)]
    pub back: Vec<String>,
}

impl ViewAnnotations {
    /// Annotations are authored facing north: front = north, left = west,
    /// right = east, back = south.
    pub fn absolute(&self, h: Heading) -> &[String] {
        match h {
            Heading::North => &self.front,
            Heading::West => &self.left,
            Heading::East => &self.right,
            Heading::South => &self.back,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavNode {
    pub id: String,
    pub pos: [f64; 3],
    #[serde(default)]
    pub views: ViewAnnotations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub start: String,
    pub heading: Heading,
    pub goal: String,
    pub instruction: String,
}

/// On-disk fixture: `{nodes, edges, episodes}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFixture {
    pub nodes: Vec<NavNode>,
    pub edges: Vec<[String; 2]>,
    #[serde(default)]
    pub episodes: Vec<EpisodeSpec>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("graph is not connected")]
    Disconnected,
    #[error("goal `{goal}` unreachable from `{start}`")]
    Unreachable { start: String, goal: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavGraph {
    pub nodes: Vec<NavNode>,
    index: BTreeMap<String, usize>,
    /// Adjacency: (neighbour, edge length).
    adj: Vec<Vec<(usize, f64)>>,
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d.sqrt()
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl NavGraph {
    pub fn new(nodes: Vec<NavNode>, edges: &[[String; 2]]) -> Result<Self, GraphError> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        let mut adj = vec![Vec::new(); nodes.len()];
        for [a, b] in edges {
            let ia = *index.get(a).ok_or_else(|| GraphError::UnknownNode(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| GraphError::UnknownNode(b.clone()))?;
            let len = distance(&nodes[ia].pos, &nodes[ib].pos);
            if !adj[ia].iter().any(|(j, _)| *j == ib) {
                adj[ia].push((ib, len));
                adj[ib].push((ia, len));
            }
        }
        let g = Self { nodes, index, adj };
        if !g.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(g)
    }

    pub fn from_fixture(f: &GraphFixture) -> Result<Self, GraphError> {
        Self::new(f.nodes.clone(), &f.edges)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbours(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.adj[a].iter().find(|(j, _)| *j == b).map(|(_, l)| *l)
    }

    pub fn edges(&self) -> Vec<[String; 2]> {
        let mut out = Vec::new();
        for (i, nb) in self.adj.iter().enumerate() {
            for (j, _) in nb {
                if i < *j {
                    out.push([self.nodes[i].id.clone(), self.nodes[*j].id.clone()]);
                }
            }
        }
        out
    }

    fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (j, _) in &self.adj[i] {
                if !seen[*j] {
                    seen[*j] = true;
                    stack.push(*j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Dijkstra. Returns the node path (inclusive) and its length.
    pub fn shortest_path(&self, start: usize, goal: usize) -> Option<(Vec<usize>, f64)> {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        dist[start] = 0.0;
        heap.push(Frontier(0.0, start));
        while let Some(Frontier(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if u == goal {
                break;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                    heap.push(Frontier(nd, v));
                }
            }
        }
        if !dist[goal].is_finite() {
            return None;
        }
        let mut path = vec![goal];
        let mut cur = goal;
        while cur != start {
            cur = prev[cur];
            path.push(cur);
        }
        path.reverse();
        Some((path, dist[goal]))
    }

    /// Neighbour reached by moving forward from `node` facing `heading`:
    /// the edge whose planar direction is closest to the heading, if within
    /// 45 degrees.
    pub fn forward_neighbour(&self, node: usize, heading: Heading) -> Option<usize> {
        let p = self.nodes[node].pos;
        let want = heading.angle();
        self.adj[node]
            .iter()
            .filter_map(|&(j, _)| {
                let q = self.nodes[j].pos;
                let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                if dx == 0.0 && dy == 0.0 {
                    return None;
                }
                let ang = dy.atan2(dx);
                let mut diff = (ang - want).abs() % std::f64::consts::TAU;
                if diff > std::f64::consts::PI {
                    diff = std::f64::consts::TAU - diff;
                }
                (diff <= std::f64::consts::FRAC_PI_4 + 1e-12).then_some((diff, j))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, j)| j)
    }

    /// Heading from which `forward` moves `from -> to`, if any.
    pub fn heading_towards(&self, from: usize, to: usize) -> Option<Heading> {
        Heading::ALL
            .into_iter()
            .find(|h| self.forward_neighbour(from, *h) == Some(to))
    }
}
