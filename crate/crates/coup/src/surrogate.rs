//! Random-forest surrogate: model-guided proposals and the shared-leaf
//! proximity metric.
//!
//! The forest regresses per-configuration mean utilities on encoded feature
//! vectors. Proposals draw a uniform candidate pool and keep the argmax
//! prediction; proximity between two ids is the fraction of trees in which
//! their feature vectors land in the same leaf. Training is fully
//! deterministic given the run seed and the training event index: bootstrap
//! resamples, per-split feature subsets, and split tie-breaks all derive
//! from counter-keyed generators, and sorts are total orders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_rng, stream};
use crate::space::{Space, TemplateId};
use crate::{Error, Result};

fn default_trees() -> usize {
    100
}

fn default_min_leaf() -> usize {
    2
}

fn default_candidates() -> usize {
    64
}

/// Forest hyperparameters. Feature subsampling is fixed at ceil(sqrt(d)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    #[serde(default = "default_trees")]
    pub trees: usize,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    /// Uniform candidate pool size for each proposal.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
}

impl Default for ForestParams {
    fn default() -> ForestParams {
        ForestParams {
            trees: default_trees(),
            min_leaf: default_min_leaf(),
            candidates: default_candidates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// One regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf the feature vector falls into.
    pub fn leaf_index(&self, features: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if features[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(features)] {
            Node::Leaf { value } => *value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    /// Number of configurations with >= 2 samples at the last training.
    pub training_count_marker: u64,
}

impl ForestModel {
    /// Mean prediction over trees; stays in `[0,1]` for `[0,1]` targets.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(features)).sum();
        sum / self.trees.len() as f64
    }

    /// Per-tree leaf indices; cacheable by callers that score many pairs.
    pub fn leaf_ids(&self, features: &[f64]) -> Vec<u32> {
        self.trees
            .iter()
            .map(|t| t.leaf_index(features) as u32)
            .collect()
    }

    /// Fraction of trees in which the two vectors share a leaf.
    pub fn proximity(&self, a: &[f64], b: &[f64]) -> f64 {
        proximity_from_leaves(&self.leaf_ids(a), &self.leaf_ids(b))
    }
}

/// Proximity from precomputed leaf-id vectors.
pub fn proximity_from_leaves(a: &[u32], b: &[u32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let shared = a.iter().zip(b).filter(|(x, y)| x == y).count();
    shared as f64 / a.len() as f64
}

/// True when the pool's training-row census has outgrown the last training:
/// strictly more configurations with >= 2 samples than the marker, or any
/// such configuration when no model exists yet.
pub fn retrain_due(model: Option<&ForestModel>, configs_with_two_samples: u64) -> bool {
    match model {
        None => configs_with_two_samples >= 1,
        Some(m) => configs_with_two_samples > m.training_count_marker,
    }
}

/// Trains a forest on `(feature vector, mean utility)` rows.
///
/// `train_event` is the index of this training within the run; together
/// with the run seed it keys all training randomness.
pub fn train(
    examples: &[(Vec<f64>, f64)],
    params: &ForestParams,
    marker: u64,
    seed: u64,
    train_event: u64,
) -> Result<ForestModel> {
    if examples.is_empty() {
        return Err(Error::Config("cannot train a forest on zero examples".into()));
    }
    debug_assert!(examples.iter().all(|(_, y)| (0.0..=1.0).contains(y)));
    let n = examples.len();
    let d = examples[0].0.len();
    let mtry = (d as f64).sqrt().ceil() as usize;
    let mut trees = Vec::with_capacity(params.trees);
    for t in 0..params.trees {
        let mut rng = derive_rng(seed, &[stream::TRAIN, train_event, t as u64]);
        let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let mut nodes = Vec::new();
        build_node(&rows, examples, params.min_leaf, mtry.max(1), &mut rng, &mut nodes);
        trees.push(Tree { nodes });
    }
    Ok(ForestModel {
        trees,
        training_count_marker: marker,
    })
}

/// Recursively builds a subtree over `rows` (indices into `examples`,
/// repeats allowed) and returns its root index in `nodes`.
fn build_node(
    rows: &[usize],
    examples: &[(Vec<f64>, f64)],
    min_leaf: usize,
    mtry: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let mean = rows.iter().map(|&r| examples[r].1).sum::<f64>() / rows.len() as f64;
    let make_leaf = |nodes: &mut Vec<Node>| {
        nodes.push(Node::Leaf { value: mean });
        nodes.len() - 1
    };

    let n = rows.len();
    if n < 2 * min_leaf {
        return make_leaf(nodes);
    }
    let first_y = examples[rows[0]].1;
    if rows.iter().all(|&r| examples[r].1 == first_y) {
        return make_leaf(nodes);
    }

    let d = examples[0].0.len();
    // Partial Fisher-Yates: the first mtry entries are the feature subset.
    let mut features: Vec<usize> = (0..d).collect();
    for i in 0..mtry.min(d) {
        let j = rng.gen_range(i..d);
        features.swap(i, j);
    }
    features.truncate(mtry.min(d));

    let parent_sse = sse(rows.iter().map(|&r| examples[r].1));
    let mut best: Option<(f64, usize, f64)> = None; // (reduction, feature, threshold)
    for &f in &features {
        // Total order: value, then position within this node's row list.
        let mut order: Vec<(f64, usize)> = rows
            .iter()
            .map(|&r| examples[r].0[f])
            .zip(0..n)
            .collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        let total_sum: f64 = order.iter().map(|&(_, p)| examples[rows[p]].1).sum();
        let total_sq: f64 = order
            .iter()
            .map(|&(_, p)| {
                let y = examples[rows[p]].1;
                y * y
            })
            .sum();
        for i in 0..n - 1 {
            let y = examples[rows[order[i].1]].1;
            left_sum += y;
            left_sq += y * y;
            let left_n = i + 1;
            let right_n = n - left_n;
            if left_n < min_leaf || right_n < min_leaf {
                continue;
            }
            let (a, b) = (order[i].0, order[i + 1].0);
            if a == b {
                continue;
            }
            let sse_l = left_sq - left_sum * left_sum / left_n as f64;
            let right_sum = total_sum - left_sum;
            let sse_r = (total_sq - left_sq) - right_sum * right_sum / right_n as f64;
            let reduction = parent_sse - (sse_l + sse_r);
            if best.is_none_or(|(r, _, _)| reduction > r) {
                // Midpoint threshold; if rounding pulls it up to b, fall
                // back to a so `x <= threshold` still separates the pair.
                let mut threshold = a + (b - a) / 2.0;
                if threshold >= b {
                    threshold = a;
                }
                best = Some((reduction, f, threshold));
            }
        }
    }

    let Some((_, feature, threshold)) = best else {
        return make_leaf(nodes);
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&r| examples[r].0[feature] <= threshold);

    let at = nodes.len();
    nodes.push(Node::Leaf { value: mean }); // placeholder until children exist
    let left = build_node(&left_rows, examples, min_leaf, mtry, rng, nodes);
    let right = build_node(&right_rows, examples, min_leaf, mtry, rng, nodes);
    nodes[at] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    at
}

fn sse(ys: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for y in ys {
        sum += y;
        sq += y * y;
        n += 1;
    }
    sq - sum * sum / n as f64
}

/// Draws `candidates` uniform ids and returns the one the model scores
/// highest, breaking exact ties uniformly with the supplied generator.
pub fn propose(
    model: &ForestModel,
    space: &Space,
    rng: &mut ChaCha8Rng,
    candidates: usize,
    rejection_cap: u32,
) -> Result<TemplateId> {
    debug_assert!(candidates >= 1);
    let mut pool = Vec::with_capacity(candidates);
    for _ in 0..candidates {
        let id = space.sample_uniform(rng, rejection_cap)?;
        let score = model.predict(&space.encode_features(&id)?);
        pool.push((id, score));
    }
    let best = pool
        .iter()
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..pool.len())
        .filter(|&i| pool[i].1 == best)
        .collect();
    let pick = tied[rng.gen_range(0..tied.len())];
    Ok(pool.swap_remove(pick).0)
}
