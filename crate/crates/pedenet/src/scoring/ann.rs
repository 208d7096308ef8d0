//! Approximate nearest neighbor: a forest of randomized projection trees
//! searched in plane-distance priority order, computing true distances for
//! every row it visits. Reported distances are therefore exact distances of
//! real gallery rows and can never undercut the exact minimum.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::scoring::{sq_dist, EmbeddingGallery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const N_TREES: usize = 8;
const LEAF_SIZE: usize = 16;
/// Redraws of the split direction before giving up on a node (all
/// projections equal, e.g. duplicate rows) and leaving it a fat leaf.
const SPLIT_ATTEMPTS: usize = 3;

enum Node {
    Split { direction: Vec<f32>, threshold: f32, left: u32, right: u32 },
    Leaf { rows: Vec<u32> },
}

struct Tree {
    nodes: Vec<Node>,
}

pub struct AnnIndex {
    trees: Vec<Tree>,
    /// Rows evaluated per query before the search gives up.
    budget: usize,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn random_unit(zdim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..zdim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let norm = v.iter().map(|&x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn build_node(
    gallery: &EmbeddingGallery,
    ids: Vec<u32>,
    nodes: &mut Vec<Node>,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let slot = nodes.len() as u32;
    nodes.push(Node::Leaf { rows: Vec::new() });
    if ids.len() <= LEAF_SIZE {
        nodes[slot as usize] = Node::Leaf { rows: ids };
        return slot;
    }
    for _ in 0..SPLIT_ATTEMPTS {
        let direction = random_unit(gallery.zdim(), rng);
        let projections: Vec<f32> =
            ids.iter().map(|&i| dot(gallery.row(i as usize), &direction)).collect();
        let mut sorted = projections.clone();
        sorted.sort_by(f32::total_cmp);
        let threshold = sorted[sorted.len() / 2];
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (&id, &p) in ids.iter().zip(&projections) {
            if p < threshold {
                left.push(id);
            } else {
                right.push(id);
            }
        }
        if !left.is_empty() && !right.is_empty() {
            let l = build_node(gallery, left, nodes, rng);
            let r = build_node(gallery, right, nodes, rng);
            nodes[slot as usize] = Node::Split { direction, threshold, left: l, right: r };
            return slot;
        }
    }
    nodes[slot as usize] = Node::Leaf { rows: ids };
    slot
}

impl AnnIndex {
    pub fn build(gallery: &EmbeddingGallery, seed: u64) -> AnnIndex {
        let m = gallery.len();
        let budget = (m / 8).max(256).min(m.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..N_TREES)
            .map(|_| {
                let mut nodes = Vec::new();
                build_node(gallery, (0..m as u32).collect(), &mut nodes, &mut rng);
                Tree { nodes }
            })
            .collect();
        AnnIndex { trees, budget }
    }

    /// Distance to the best row found within the search budget.
    ///
    /// Subtrees are visited in order of a lower bound on their distance to
    /// the query: the largest crossed-plane margin on the path to them.
    /// Non-negative f32 bounds compare correctly as their bit patterns, and
    /// ties break on tree and node index, so the search is deterministic.
    /// The loop stops early once the cheapest remaining subtree is provably
    /// farther than the best row already seen; queries that stop this way
    /// return the exact answer.
    pub fn nearest_distance(&self, gallery: &EmbeddingGallery, query: &[f32]) -> Result<f64> {
        if gallery.is_empty() {
            return Err(Error::InvalidArgument("gallery holds no embeddings".into()));
        }
        if query.len() != gallery.zdim() {
            return Err(Error::InvalidArgument(format!(
                "query of width {} against a width-{} gallery",
                query.len(),
                gallery.zdim()
            )));
        }
        let mut heap: BinaryHeap<Reverse<(u32, u32, u32)>> = BinaryHeap::new();
        for t in 0..self.trees.len() as u32 {
            heap.push(Reverse((0, t, 0)));
        }
        let mut seen = vec![false; gallery.len()];
        let mut best = f64::INFINITY;
        let mut evaluated = 0usize;
        while let Some(Reverse((bound_bits, t, n))) = heap.pop() {
            if evaluated >= self.budget {
                break;
            }
            let bound = f32::from_bits(bound_bits) as f64;
            if bound * bound >= best {
                break;
            }
            let mut node = &self.trees[t as usize].nodes[n as usize];
            loop {
                match node {
                    Node::Split { direction, threshold, left, right } => {
                        let p = dot(query, direction);
                        let margin = (p - threshold).abs();
                        let (near, far) =
                            if p < *threshold { (*left, *right) } else { (*right, *left) };
                        // The far sibling sits behind both this plane and any
                        // planes crossed to reach the popped subtree.
                        heap.push(Reverse((bound_bits.max(margin.to_bits()), t, far)));
                        node = &self.trees[t as usize].nodes[near as usize];
                    }
                    Node::Leaf { rows } => {
                        for &i in rows {
                            if !seen[i as usize] {
                                seen[i as usize] = true;
                                evaluated += 1;
                                let d = sq_dist(gallery.row(i as usize), query);
                                if d < best {
                                    best = d;
                                }
                            }
                        }
                        break;
                    }
                }
            }
        }
        Ok(best.sqrt())
    }
}
