//! One-vs-one polynomial-kernel SVM trained by sequential minimal
//! optimization.
//!
//! The kernel is `K(x, y) = (x . y)^p` with no additive constant. Features
//! are standardized per dimension with training statistics before any kernel
//! evaluation; the statistics live in the model so prediction is
//! self-contained. Each class pair gets its own binary machine; prediction
//! is a majority vote across machines with ties broken toward the lowest
//! class index.

use super::FeatureSet;
use crate::error::{Error, Result};

/// KKT tolerance the solver drives every example under.
const KKT_TOL: f64 = 1e-3;
/// Numeric epsilon for degenerate-step and bound tests.
const EPS: f64 = 1e-12;

/// Per-dimension standardization fitted on training data. Dimensions with
/// zero variance pass through unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(set: &FeatureSet) -> Standardizer {
        let n = set.records.len() as f64;
        let dim = set.dim;
        let mut mean = vec![0f64; dim];
        for r in &set.records {
            for (m, &v) in mean.iter_mut().zip(&r.features) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; dim];
        for r in &set.records {
            for ((s, m), &v) in var.iter_mut().zip(&mean).zip(&r.features) {
                let d = f64::from(v) - *m;
                *s += d * d;
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (f64::from(v) - m) / s)
            .collect()
    }
}

fn poly_kernel(a: &[f64], b: &[f64], exponent: u32) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.powi(exponent as i32)
}

/// Binary machine for one class pair. `pos_class < neg_class`; positive
/// decision values vote for `pos_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMachine {
    pub pos_class: usize,
    pub neg_class: usize,
    support: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    labels: Vec<f64>,
    bias: f64,
}

impl PairwiseMachine {
    /// `sum(alpha_i y_i K(s_i, x)) + b` on an already-standardized input.
    pub fn decision(&self, x_std: &[f64], exponent: u32) -> f64 {
        let mut acc = self.bias;
        for ((s, &a), &y) in self.support.iter().zip(&self.alpha).zip(&self.labels) {
            acc += a * y * poly_kernel(s, x_std, exponent);
        }
        acc
    }

    /// `sum(alpha_i y_i)`, zero for a feasible dual solution.
    pub fn dual_balance(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.labels)
            .map(|(a, y)| a * y)
            .sum()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn support_count(&self) -> usize {
        self.support.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub dim: usize,
    pub class_count: usize,
    pub exponent: u32,
    pub c: f64,
    pub standardizer: Standardizer,
    pub machines: Vec<PairwiseMachine>,
}

/// Dense-Gram SMO solver for one binary subproblem.
struct Smo<'a> {
    gram: &'a [f64],
    n: usize,
    y: &'a [f64],
    c: f64,
    alpha: Vec<f64>,
    err: Vec<f64>,
    b: f64,
}

impl<'a> Smo<'a> {
    fn new(gram: &'a [f64], y: &'a [f64], c: f64) -> Smo<'a> {
        let n = y.len();
        Smo {
            gram,
            n,
            y,
            c,
            alpha: vec![0.0; n],
            // With all alphas zero, u_i = 0 and E_i = -y_i.
            err: y.iter().map(|&v| -v).collect(),
            b: 0.0,
        }
    }

    fn k(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.n + j]
    }

    fn is_free(&self, i: usize) -> bool {
        self.alpha[i] > EPS && self.alpha[i] < self.c - EPS
    }

    /// Magnitude of the KKT violation at `i`, zero when satisfied within
    /// tolerance.
    fn violation(&self, i: usize) -> f64 {
        let r = self.err[i] * self.y[i];
        if r < -KKT_TOL && self.alpha[i] < self.c - EPS {
            -r
        } else if r > KKT_TOL && self.alpha[i] > EPS {
            r
        } else {
            0.0
        }
    }

    fn take_step(&mut self, i1: usize, i2: usize) -> bool {
        if i1 == i2 {
            return false;
        }
        let (a1_old, a2_old) = (self.alpha[i1], self.alpha[i2]);
        let (y1, y2) = (self.y[i1], self.y[i2]);
        let (e1, e2) = (self.err[i1], self.err[i2]);
        let s = y1 * y2;
        let (lo, hi) = if s < 0.0 {
            (
                (a2_old - a1_old).max(0.0),
                (self.c + a2_old - a1_old).min(self.c),
            )
        } else {
            (
                (a1_old + a2_old - self.c).max(0.0),
                (a1_old + a2_old).min(self.c),
            )
        };
        if lo >= hi {
            return false;
        }
        let (k11, k12, k22) = (self.k(i1, i1), self.k(i1, i2), self.k(i2, i2));
        let eta = k11 + k22 - 2.0 * k12;
        let a2 = if eta > 0.0 {
            (a2_old + y2 * (e1 - e2) / eta).clamp(lo, hi)
        } else {
            // Indefinite direction: evaluate the objective at both segment
            // ends and move to the smaller one.
            let f1 = y1 * (e1 + self.b) - a1_old * k11 - s * a2_old * k12;
            let f2 = y2 * (e2 + self.b) - s * a1_old * k12 - a2_old * k22;
            let l1 = a1_old + s * (a2_old - lo);
            let h1 = a1_old + s * (a2_old - hi);
            let lo_obj =
                l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11 + 0.5 * lo * lo * k22 + s * lo * l1 * k12;
            let hi_obj =
                h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11 + 0.5 * hi * hi * k22 + s * hi * h1 * k12;
            if lo_obj < hi_obj - EPS {
                lo
            } else if lo_obj > hi_obj + EPS {
                hi
            } else {
                return false;
            }
        };
        if (a2 - a2_old).abs() < EPS * (a2 + a2_old + EPS) {
            return false;
        }
        let a1 = (a1_old + s * (a2_old - a2)).clamp(0.0, self.c);

        let d1 = y1 * (a1 - a1_old);
        let d2 = y2 * (a2 - a2_old);
        let b_old = self.b;
        let b1 = b_old - e1 - d1 * k11 - d2 * k12;
        let b2 = b_old - e2 - d1 * k12 - d2 * k22;
        let b_new = if a1 > EPS && a1 < self.c - EPS {
            b1
        } else if a2 > EPS && a2 < self.c - EPS {
            b2
        } else {
            (b1 + b2) / 2.0
        };
        let db = b_new - b_old;
        for idx in 0..self.n {
            self.err[idx] += d1 * self.k(i1, idx) + d2 * self.k(i2, idx) + db;
        }
        self.b = b_new;
        self.alpha[i1] = a1;
        self.alpha[i2] = a2;
        true
    }

    /// Try partners for the violator `i2`: largest |E1 - E2| over free
    /// points first, then every free point, then everything. Start positions
    /// rotate deterministically with `i2` so the solver needs no randomness.
    fn examine(&mut self, i2: usize) -> bool {
        let e2 = self.err[i2];
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.n {
            if i == i2 || !self.is_free(i) {
                continue;
            }
            let gap = (self.err[i] - e2).abs();
            if best.map_or(true, |(g, _)| gap > g) {
                best = Some((gap, i));
            }
        }
        if let Some((_, i1)) = best {
            if self.take_step(i1, i2) {
                return true;
            }
        }
        for off in 0..self.n {
            let i1 = (i2 + 1 + off) % self.n;
            if i1 == i2 || !self.is_free(i1) {
                continue;
            }
            if self.take_step(i1, i2) {
                return true;
            }
        }
        for off in 0..self.n {
            let i1 = (i2 + 1 + off) % self.n;
            if i1 == i2 {
                continue;
            }
            if self.take_step(i1, i2) {
                return true;
            }
        }
        false
    }

    /// Drive all KKT violations under tolerance, worst violator first.
    fn solve(mut self) -> (Vec<f64>, f64) {
        let max_steps = 200_000usize.max(500 * self.n);
        let mut steps = 0usize;
        // Examples whose every partner refused a step since the last
        // successful update; retrying them without progress elsewhere is
        // pointless.
        let mut blocked = vec![false; self.n];
        loop {
            let mut pick: Option<(f64, usize)> = None;
            for i in 0..self.n {
                if blocked[i] {
                    continue;
                }
                let v = self.violation(i);
                if v > 0.0 && pick.map_or(true, |(pv, _)| v > pv) {
                    pick = Some((v, i));
                }
            }
            let Some((_, i2)) = pick else {
                break; // converged, or every remaining violator is stalled
            };
            if self.examine(i2) {
                blocked.iter_mut().for_each(|b| *b = false);
                steps += 1;
                if steps >= max_steps {
                    break;
                }
            } else {
                blocked[i2] = true;
            }
        }
        (self.alpha, self.b)
    }
}

/// Train one-vs-one polynomial-kernel machines by SMO.
pub fn svm_train(train: &FeatureSet, c: f64, exponent: u32) -> Result<SvmModel> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("svm C must be positive, got {c}")));
    }
    if exponent == 0 {
        return Err(Error::Config(
            "kernel exponent must be a positive int".into(),
        ));
    }
    let present = train.present_labels();
    if present.len() < 2 {
        return Err(Error::Data(format!(
            "svm needs at least 2 classes with samples, found {}",
            present.len()
        )));
    }
    let standardizer = Standardizer::fit(train);
    let standardized: Vec<Vec<f64>> = train
        .records
        .iter()
        .map(|r| standardizer.apply(&r.features))
        .collect();

    let mut machines = Vec::new();
    for (pi, &pos) in present.iter().enumerate() {
        for &neg in &present[pi + 1..] {
            let idx: Vec<usize> = train
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.label == pos || r.label == neg)
                .map(|(i, _)| i)
                .collect();
            let y: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    if train.records[i].label == pos {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            let n = idx.len();
            let mut gram = vec![0f64; n * n];
            for a in 0..n {
                for b in a..n {
                    let k = poly_kernel(&standardized[idx[a]], &standardized[idx[b]], exponent);
                    gram[a * n + b] = k;
                    gram[b * n + a] = k;
                }
            }
            let (alpha, bias) = Smo::new(&gram, &y, c).solve();
            let mut support = Vec::new();
            let mut sv_alpha = Vec::new();
            let mut sv_labels = Vec::new();
            for (slot, &a) in alpha.iter().enumerate() {
                if a > EPS {
                    support.push(standardized[idx[slot]].clone());
                    sv_alpha.push(a);
                    sv_labels.push(y[slot]);
                }
            }
            machines.push(PairwiseMachine {
                pos_class: pos,
                neg_class: neg,
                support,
                alpha: sv_alpha,
                labels: sv_labels,
                bias,
            });
        }
    }
    Ok(SvmModel {
        dim: train.dim,
        class_count: train.classes.len(),
        exponent,
        c,
        standardizer,
        machines,
    })
}

/// Majority vote across pairwise machines; a zero decision votes for the
/// pair's lower class index, and vote ties resolve to the lowest class.
pub fn svm_predict(model: &SvmModel, x: &[f32]) -> Result<usize> {
    if x.len() != model.dim {
        return Err(Error::Shape(format!(
            "svm expects {} features, got {}",
            model.dim,
            x.len()
        )));
    }
    let x_std = model.standardizer.apply(x);
    let mut votes = vec![0usize; model.class_count];
    for m in &model.machines {
        let d = m.decision(&x_std, model.exponent);
        if d >= 0.0 {
            votes[m.pos_class] += 1;
        } else {
            votes[m.neg_class] += 1;
        }
    }
    let mut winner = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = i;
        }
    }
    Ok(winner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::testdata::{separable_clusters, xor_set};

    #[test]
    fn separable_clusters_reach_full_training_accuracy() {
        let set = separable_clusters();
        let model = svm_train(&set, 1.0, 2).unwrap();
        for r in &set.records {
            assert_eq!(svm_predict(&model, &r.features).unwrap(), r.label);
        }
    }

    #[test]
    fn quadratic_kernel_separates_xor() {
        let set = xor_set();
        let model = svm_train(&set, 1.0, 2).unwrap();
        for r in &set.records {
            assert_eq!(
                svm_predict(&model, &r.features).unwrap(),
                r.label,
                "xor point {:?}",
                r.features
            );
        }
    }

    #[test]
    fn dual_constraint_and_box_hold_per_machine() {
        for set in [separable_clusters(), xor_set()] {
            let model = svm_train(&set, 1.0, 2).unwrap();
            for m in &model.machines {
                assert!(
                    m.dual_balance().abs() < 1e-6,
                    "balance {}",
                    m.dual_balance()
                );
                for &a in m.alphas() {
                    assert!((0.0..=model.c + 1e-9).contains(&a));
                }
                assert!(m.support_count() > 0);
            }
        }
    }

    #[test]
    fn two_class_model_uses_single_decision() {
        let set = separable_clusters();
        let model = svm_train(&set, 1.0, 2).unwrap();
        assert_eq!(model.machines.len(), 1);
        let m = &model.machines[0];
        for r in &set.records {
            let d = m.decision(&model.standardizer.apply(&r.features), model.exponent);
            let want = if r.label == 0 { d >= 0.0 } else { d < 0.0 };
            assert!(want, "decision {d} for label {}", r.label);
        }
    }

    #[test]
    fn kernel_is_symmetric_exactly() {
        let a = [1.25f64, -3.5, 0.75, 2.0];
        let b = [0.5f64, 1.5, -2.25, 4.0];
        assert_eq!(
            poly_kernel(&a, &b, 2).to_bits(),
            poly_kernel(&b, &a, 2).to_bits()
        );
        assert_eq!(
            poly_kernel(&a, &b, 3).to_bits(),
            poly_kernel(&b, &a, 3).to_bits()
        );
    }

    #[test]
    fn gram_matrix_is_positive_semidefinite() {
        let set = separable_clusters();
        let model = svm_train(&set, 1.0, 2).unwrap();
        let std: Vec<Vec<f64>> = set
            .records
            .iter()
            .map(|r| model.standardizer.apply(&r.features))
            .collect();
        let n = std.len();
        let mut gram = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                gram[(i, j)] = poly_kernel(&std[i], &std[j], 2);
            }
        }
        let eigen = nalgebra::SymmetricEigen::new(gram);
        for &ev in eigen.eigenvalues.iter() {
            assert!(ev >= -1e-8, "eigenvalue {ev}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let set = separable_clusters();
        assert!(matches!(svm_train(&set, 0.0, 2), Err(Error::Config(_))));
        assert!(matches!(svm_train(&set, 1.0, 0), Err(Error::Config(_))));

        let mut single = FeatureSet::new(2, vec!["only".into(), "ghost".into()]).unwrap();
        single
            .push(super::super::FeatureRecord {
                features: vec![1.0, 2.0],
                label: 0,
                video_id: String::new(),
            })
            .unwrap();
        assert!(matches!(svm_train(&single, 1.0, 2), Err(Error::Data(_))));

        let model = svm_train(&set, 1.0, 2).unwrap();
        assert!(matches!(svm_predict(&model, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn standardization_is_deterministic() {
        let set = separable_clusters();
        let model = svm_train(&set, 1.0, 2).unwrap();
        let a = model.standardizer.apply(&set.records[0].features);
        let b = model.standardizer.apply(&set.records[0].features);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_variance_dims_pass_through() {
        let mut set = FeatureSet::new(2, vec!["a".into(), "b".into()]).unwrap();
        let points = [
            (0.0f32, 0),
            (0.1, 0),
            (2.0, 1),
            (2.1, 1),
            (2.2, 1),
            (2.3, 1),
        ];
        for (i, (x, label)) in points.iter().enumerate() {
            set.push(super::super::FeatureRecord {
                // Second dim is constant across the whole set.
                features: vec![*x, 7.0],
                label: *label,
                video_id: format!("v{i}"),
            })
            .unwrap();
        }
        let model = svm_train(&set, 1.0, 2).unwrap();
        let z = model.standardizer.apply(&[0.0, 7.0]);
        assert_eq!(z[1], 0.0); // (7 - 7) / 1
        for r in &set.records {
            assert_eq!(svm_predict(&model, &r.features).unwrap(), r.label);
        }
    }
}
