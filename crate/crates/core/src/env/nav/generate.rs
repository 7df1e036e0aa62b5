//! Seeded jittered-grid worlds with landmark annotations.

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::{EpisodeSpec, GraphFixture, NavNode, ViewAnnotations};
use super::Heading;
use crate::util::keyed_rng;

pub const LANDMARKS: [&str; 24] = [
    "armchair", "bed", "bookshelf", "couch", "door", "lamp", "mirror", "painting", "plant", "rug",
    "sink", "stove", "television", "toilet", "wardrobe", "window", "bathtub", "dining table",
    "fireplace", "kitchen island", "piano", "refrigerator", "sofa", "staircase",
];

/// Landmarks before this index are clutter, the rest mark goals.
const CLUTTER: usize = 16;
const SPACING: f64 = 2.5;
const JITTER: f64 = 0.3;

fn id(r: usize, c: usize) -> String {
    format!("n{r}_{c}")
}

/// A `rows x cols` jittered grid connected by a random spanning tree plus
/// extra grid edges, with `n_episodes` seeded episodes. Every edge runs within
/// a few degrees of a cardinal direction, so any shortest path is walkable
/// with the four-action interface.
pub fn generate_world(seed: u64, rows: usize, cols: usize, n_episodes: usize) -> GraphFixture {
    let mut rng = keyed_rng(seed, &["nav-world", &rows.to_string(), &cols.to_string()]);
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = c as f64 * SPACING + rng.gen_range(-JITTER..JITTER);
            let y = r as f64 * SPACING + rng.gen_range(-JITTER..JITTER);
            let z = rng.gen_range(-0.05..0.05);
            nodes.push(NavNode {
                id: id(r, c),
                pos: [x, y, z],
                views: ViewAnnotations::default(),
            });
        }
    }

    // Candidate grid edges; Kruskal over a shuffled order gives a spanning tree.
    let mut cand = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                cand.push((r * cols + c, r * cols + c + 1));
            }
            if r + 1 < rows {
                cand.push((r * cols + c, (r + 1) * cols + c));
            }
        }
    }
    cand.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..rows * cols).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut edges = Vec::new();
    for &(a, b) in &cand {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            edges.push((a, b));
        } else if rng.gen_bool(0.3) {
            edges.push((a, b));
        }
    }

    // Generic clutter in every direction; goal landmarks never appear as clutter.
    let clutter: Vec<&str> = LANDMARKS[..CLUTTER].to_vec();
    for n in &mut nodes {
        for h in Heading::ALL {
            let k = rng.gen_range(0..=2);
            let items: Vec<String> = clutter
                .choose_multiple(&mut rng, k)
                .map(|s| s.to_string())
                .collect();
            match h {
                Heading::North => n.views.front = items,
                Heading::West => n.views.left = items,
                Heading::East => n.views.right = items,
                Heading::South => n.views.back = items,
            }
        }
    }

    let mut episodes = Vec::new();
    let n = nodes.len();
    for e in 0..n_episodes {
        let start = rng.gen_range(0..n);
        let mut goal = rng.gen_range(0..n);
        while goal == start && n > 1 {
            goal = rng.gen_range(0..n);
        }
        let goals = &LANDMARKS[CLUTTER..];
        let landmark = goals[(seed as usize + e) % goals.len()];
        // The goal landmark is visible from the goal node in every direction.
        let views = &mut nodes[goal].views;
        for v in [&mut views.front, &mut views.left, &mut views.right, &mut views.back] {
            if !v.iter().any(|x| x == landmark) {
                v.push(landmark.to_string());
            }
        }
        episodes.push(EpisodeSpec {
            start: nodes[start].id.clone(),
            heading: *Heading::ALL.choose(&mut rng).expect("four headings"),
            goal: nodes[goal].id.clone(),
            instruction: format!("Go to the {landmark} and stop there."),
        });
    }

    GraphFixture {
        edges: edges
            .into_iter()
            .map(|(a, b)| [nodes[a].id.clone(), nodes[b].id.clone()])
            .collect(),
        nodes,
        episodes,
    }
}
