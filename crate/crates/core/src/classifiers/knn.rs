//! k-nearest-neighbors prediction by Euclidean distance.

use super::FeatureSet;
use crate::error::{Error, Result};

/// Majority label among the `k` nearest training records. Equal distances
/// order by lower record index; vote ties resolve to the label of the
/// nearest neighbor that carries a tied label.
pub fn knn_predict(train: &FeatureSet, k: usize, x: &[f32]) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::Data("knn training set is empty".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "k must be in 1..={}, got {k}",
            train.len()
        )));
    }
    if x.len() != train.dim {
        return Err(Error::Shape(format!(
            "knn expects {} features, got {}",
            train.dim,
            x.len()
        )));
    }

    let mut order: Vec<(f64, usize)> = train
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d2: f64 = r
                .features
                .iter()
                .zip(x)
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum();
            (d2, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut votes = vec![0usize; train.classes.len()];
    for &(_, i) in &order[..k] {
        votes[train.records[i].label] += 1;
    }
    let top = *votes.iter().max().unwrap();
    let tied: Vec<usize> = (0..votes.len())
        .filter(|&label| votes[label] == top)
        .collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    // Vote tie: the nearest neighbor bearing a tied label decides.
    for &(_, i) in &order[..k] {
        let label = train.records[i].label;
        if tied.contains(&label) {
            return Ok(label);
        }
    }
    unreachable!("a tied label always appears among the k neighbors")
}
