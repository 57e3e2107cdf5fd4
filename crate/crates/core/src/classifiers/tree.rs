//! Gain-ratio binary decision tree.
//!
//! Candidate thresholds are midpoints between sorted distinct feature
//! values; recursion stops on purity, depth, or leaf size. No error-based
//! pruning.

use super::FeatureSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        label: usize,
    },
    Split {
        feature: usize,
        threshold: f32,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

fn majority_label(indices: &[usize], set: &FeatureSet) -> usize {
    let mut counts = vec![0usize; set.classes.len()];
    for &i in indices {
        counts[set.records[i].label] += 1;
    }
    let top = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == top).unwrap() // lowest index on ties
}

struct BestSplit {
    feature: usize,
    threshold: f32,
    ratio: f64,
}

fn best_split(indices: &[usize], set: &FeatureSet) -> Option<BestSplit> {
    let total = indices.len();
    let mut base_counts = vec![0usize; set.classes.len()];
    for &i in indices {
        base_counts[set.records[i].label] += 1;
    }
    let base_entropy = entropy(&base_counts, total);

    let mut best: Option<BestSplit> = None;
    for feature in 0..set.dim {
        let mut ordered: Vec<usize> = indices.to_vec();
        ordered.sort_by(|&a, &b| {
            set.records[a].features[feature]
                .partial_cmp(&set.records[b].features[feature])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut left_counts = vec![0usize; set.classes.len()];
        for pos in 0..total - 1 {
            left_counts[set.records[ordered[pos]].label] += 1;
            let here = set.records[ordered[pos]].features[feature];
            let next = set.records[ordered[pos + 1]].features[feature];
            if here == next {
                continue;
            }
            let threshold = (here + next) / 2.0;
            let n_left = pos + 1;
            let n_right = total - n_left;
            let right_counts: Vec<usize> = base_counts
                .iter()
                .zip(&left_counts)
                .map(|(b, l)| b - l)
                .collect();
            let gain = base_entropy
                - (n_left as f64 / total as f64) * entropy(&left_counts, n_left)
                - (n_right as f64 / total as f64) * entropy(&right_counts, n_right);
            if gain <= 1e-12 {
                continue;
            }
            let split_info = entropy(&[n_left, n_right], total);
            if split_info <= 1e-12 {
                continue;
            }
            let ratio = gain / split_info;
            let better = match &best {
                None => true,
                Some(b) => {
                    ratio > b.ratio + 1e-12
                        || ((ratio - b.ratio).abs() <= 1e-12
                            && (feature, threshold) < (b.feature, b.threshold))
                }
            };
            if better {
                best = Some(BestSplit {
                    feature,
                    threshold,
                    ratio,
                });
            }
        }
    }
    best
}

fn grow(indices: &[usize], set: &FeatureSet, depth_left: usize, min_leaf: usize) -> TreeNode {
    let first = set.records[indices[0]].label;
    let pure = indices.iter().all(|&i| set.records[i].label == first);
    if pure {
        return TreeNode::Leaf { label: first };
    }
    if depth_left == 0 || indices.len() < min_leaf {
        return TreeNode::Leaf {
            label: majority_label(indices, set),
        };
    }
    let Some(split) = best_split(indices, set) else {
        return TreeNode::Leaf {
            label: majority_label(indices, set),
        };
    };
    let (left, right): (Vec<usize>, Vec<usize>) = indices
        .iter()
        .partition(|&&i| set.records[i].features[split.feature] <= split.threshold);
    if left.is_empty() || right.is_empty() {
        return TreeNode::Leaf {
            label: majority_label(indices, set),
        };
    }
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(grow(&left, set, depth_left - 1, min_leaf)),
        right: Box::new(grow(&right, set, depth_left - 1, min_leaf)),
    }
}

/// Grow a gain-ratio tree. A leaf forms on purity, at `max_depth`, or when a
/// node holds fewer than `min_leaf` samples; leaf labels are the majority
/// with ties toward the lower class index.
pub fn tree_train(train: &FeatureSet, max_depth: usize, min_leaf: usize) -> Result<TreeNode> {
    if train.is_empty() {
        return Err(Error::Data("tree training set is empty".into()));
    }
    let indices: Vec<usize> = (0..train.len()).collect();
    Ok(grow(&indices, train, max_depth, min_leaf))
}

/// Descend left while `x[feature] <= threshold`; return the leaf's label.
pub fn tree_predict(root: &TreeNode, x: &[f32]) -> Result<usize> {
    let mut node = root;
    loop {
        match node {
            TreeNode::Leaf { label } => return Ok(*label),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let Some(&v) = x.get(*feature) else {
                    return Err(Error::Shape(format!(
                        "tree split needs feature {feature}, input has {}",
                        x.len()
                    )));
                };
                node = if v <= *threshold { left } else { right };
            }
        }
    }
}
