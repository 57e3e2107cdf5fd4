//! Video-consistent dataset splitting, confusion matrices, frame accuracy,
//! and per-video majority voting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng;

/// Rows are the true label, columns the predicted label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> ConfusionMatrix {
        let n = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Build directly from a table of counts (rows = truth).
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<ConfusionMatrix> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|row| row.len() != n) {
            return Err(Error::Data(format!("confusion counts must be {n}x{n}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Fraction of diagonal mass: trace / total.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("confusion matrix holds no samples".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Tab-separated table with class-name headers; rows are the true labels.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("truth\\pred");
        for c in &self.classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Count (truth, prediction) pairs into a confusion matrix.
pub fn confusion(preds: &[usize], truth: &[usize], classes: &[String]) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::new(classes.to_vec());
    let n = classes.len();
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= n || t >= n {
            return Err(Error::Data(format!(
                "label index out of range: truth {t}, pred {p}"
            )));
        }
        m.add(t, p);
    }
    Ok(m)
}

/// Train/test partition in which every video's frames stay on one side.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub seed: u64,
}

/// Per-class video counts of a split side: (class, distinct video count).
pub fn videos_per_class(manifest: &DatasetManifest) -> Vec<(String, usize)> {
    let mut per_class: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in &manifest.samples {
        per_class.entry(&s.label).or_default().insert(&s.video_id);
    }
    manifest
        .classes
        .iter()
        .map(|c| {
            (
                c.clone(),
                per_class.get(c.as_str()).map_or(0, BTreeSet::len),
            )
        })
        .collect()
}

/// Stratified video split: within each class the distinct video ids are
/// shuffled by a seeded stream and `max(1, round(fraction * count))` of them
/// go to test. All frames follow their video.
pub fn split_by_video(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitResult> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    // A video id must map to exactly one class for the no-span invariant to
    // be meaningful.
    let mut video_class: BTreeMap<&str, &str> = BTreeMap::new();
    for s in &manifest.samples {
        if s.video_id.is_empty() {
            return Err(Error::Data(format!(
                "sample {} has an empty video id",
                s.image_path
            )));
        }
        match video_class.insert(&s.video_id, &s.label) {
            Some(prev) if prev != s.label => {
                return Err(Error::Data(format!(
                    "video {} appears with labels {prev:?} and {:?}",
                    s.video_id, s.label
                )));
            }
            _ => {}
        }
    }

    let mut test_videos: BTreeSet<String> = BTreeSet::new();
    for class in &manifest.classes {
        // Sorted distinct ids, so the shuffle sees a canonical order no
        // matter how the manifest rows are arranged.
        let mut videos: Vec<&str> = video_class
            .iter()
            .filter(|(_, c)| **c == class.as_str())
            .map(|(v, _)| *v)
            .collect();
        if videos.len() < 2 {
            return Err(Error::Data(format!(
                "class {class:?} has {} video(s); need at least 2 to split",
                videos.len()
            )));
        }
        let mut stream = rng::stream(seed, &format!("split/{class}"));
        videos.shuffle(&mut stream);
        let n_test = ((test_fraction * videos.len() as f64).round() as usize).max(1);
        for v in &videos[..n_test.min(videos.len())] {
            test_videos.insert((*v).to_string());
        }
    }

    let test = manifest.subset(|s| test_videos.contains(&s.video_id));
    let train = manifest.subset(|s| !test_videos.contains(&s.video_id));
    Ok(SplitResult { train, test, seed })
}

/// Modal predicted label per video; vote ties break toward the lower label
/// index.
pub fn majority_vote(frame_preds: &[(String, usize)]) -> BTreeMap<String, usize> {
    let mut tallies: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for (video, label) in frame_preds {
        *tallies.entry(video).or_default().entry(*label).or_insert(0) += 1;
    }
    tallies
        .into_iter()
        .map(|(video, votes)| {
            let best = votes
                .into_iter()
                // BTreeMap iterates labels ascending, so strict > keeps the
                // lowest label on ties.
                .fold((usize::MAX, 0usize), |acc, (label, n)| {
                    if n > acc.1 {
                        (label, n)
                    } else {
                        acc
                    }
                })
                .0;
            (video.to_string(), best)
        })
        .collect()
}

/// Fraction of videos whose voted label matches the truth.
pub fn video_accuracy(
    votes: &BTreeMap<String, usize>,
    truth: &BTreeMap<String, usize>,
) -> Result<f64> {
    if votes.len() != truth.len() || votes.keys().any(|k| !truth.contains_key(k)) {
        return Err(Error::Data("vote and truth video sets differ".into()));
    }
    if votes.is_empty() {
        return Err(Error::Data("no videos to score".into()));
    }
    let correct = votes
        .iter()
        .filter(|(video, label)| truth[*video] == **label)
        .count();
    Ok(correct as f64 / votes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Sample;

    fn sample(path: &str, label: &str, video: &str) -> Sample {
        Sample {
            image_path: path.into(),
            label: label.into(),
            video_id: video.into(),
        }
    }

    /// Manifest with `videos` videos per class and 2 frames per video.
    fn synthetic_manifest(class_videos: &[(&str, usize)]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (class, n) in class_videos {
            for v in 0..*n {
                for f in 0..2 {
                    samples.push(sample(
                        &format!("{class}_{v}_{f}.ppm"),
                        class,
                        &format!("{class}_vid{v:03}"),
                    ));
                }
            }
        }
        DatasetManifest::from_samples(samples).unwrap()
    }

    #[test]
    fn split_counts_follow_rounding_rule() {
        // 16 videos at fraction 0.2 -> 3 test; 35 -> 7 test.
        let m = synthetic_manifest(&[("diving", 16), ("gym", 35)]);
        let split = split_by_video(&m, 0.2, 11).unwrap();
        let test_counts = videos_per_class(&split.test);
        assert_eq!(test_counts, vec![("diving".into(), 3), ("gym".into(), 7)]);
        let train_counts = videos_per_class(&split.train);
        assert_eq!(
            train_counts,
            vec![("diving".into(), 13), ("gym".into(), 28)]
        );
    }

    #[test]
    fn split_never_splits_a_video() {
        let m = synthetic_manifest(&[("a", 5), ("b", 7)]);
        let split = split_by_video(&m, 0.4, 3).unwrap();
        let train_videos: BTreeSet<&str> = split
            .train
            .samples
            .iter()
            .map(|s| s.video_id.as_str())
            .collect();
        let test_videos: BTreeSet<&str> = split
            .test
            .samples
            .iter()
            .map(|s| s.video_id.as_str())
            .collect();
        assert!(train_videos.is_disjoint(&test_videos));
        assert_eq!(split.train.len() + split.test.len(), m.len());
    }

    #[test]
    fn split_is_deterministic_and_order_invariant() {
        let m = synthetic_manifest(&[("a", 6), ("b", 9)]);
        let s1 = split_by_video(&m, 0.25, 42).unwrap();
        let s2 = split_by_video(&m, 0.25, 42).unwrap();
        assert_eq!(s1.test.samples, s2.test.samples);

        let mut shuffled = m.clone();
        shuffled.samples.reverse();
        let s3 = split_by_video(&shuffled, 0.25, 42).unwrap();
        let videos = |m: &DatasetManifest| {
            m.samples
                .iter()
                .map(|s| s.video_id.clone())
                .collect::<BTreeSet<_>>()
        };
        assert_eq!(videos(&s1.test), videos(&s3.test));
    }

    #[test]
    fn split_rejects_underfilled_class_and_empty_video_id() {
        let m = synthetic_manifest(&[("a", 1), ("b", 4)]);
        assert!(matches!(split_by_video(&m, 0.2, 1), Err(Error::Data(_))));

        let m2 = DatasetManifest::from_samples(vec![
            sample("x.ppm", "a", ""),
            sample("y.ppm", "a", "v1"),
        ])
        .unwrap();
        assert!(matches!(split_by_video(&m2, 0.2, 1), Err(Error::Data(_))));

        let m3 = synthetic_manifest(&[("a", 4)]);
        assert!(matches!(split_by_video(&m3, 0.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn confusion_all_correct_is_diagonal() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let m = confusion(&[0, 1, 1], &[0, 1, 1], &classes).unwrap();
        assert_eq!(m.counts(), &[vec![1, 0], vec![0, 2]]);
        assert_eq!(m.accuracy().unwrap(), 1.0);
    }

    #[test]
    fn confusion_single_miss() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let m = confusion(&[1], &[0], &classes).unwrap();
        assert_eq!(m.counts()[0][1], 1);
        assert_eq!(m.total(), 1);
        assert_eq!(m.accuracy().unwrap(), 0.0);
    }

    #[test]
    fn confusion_conserves_sample_count() {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let preds = [0, 1, 2, 2, 1, 0, 0];
        let truth = [0, 1, 1, 2, 0, 2, 0];
        let m = confusion(&preds, &truth, &classes).unwrap();
        assert_eq!(m.total(), preds.len() as u64);
        assert!(confusion(&[0], &[0, 1], &classes).is_err());
        assert!(confusion(&[5], &[0], &classes).is_err());
    }

    #[test]
    fn zero_diagonal_scores_zero() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let m = ConfusionMatrix::from_counts(classes, vec![vec![0, 3], vec![2, 0]]).unwrap();
        assert_eq!(m.accuracy().unwrap(), 0.0);
    }

    #[test]
    fn empty_matrix_has_no_accuracy() {
        let m = ConfusionMatrix::new(vec!["a".into()]);
        assert!(m.accuracy().is_err());
    }

    #[test]
    fn vote_prefers_modal_label() {
        // 28 frames of one label vs 20 of another in a single video.
        let mut frames: Vec<(String, usize)> = Vec::new();
        for _ in 0..28 {
            frames.push(("v1".into(), 3));
        }
        for _ in 0..20 {
            frames.push(("v1".into(), 6));
        }
        let votes = majority_vote(&frames);
        assert_eq!(votes["v1"], 3);
    }

    #[test]
    fn vote_is_frame_order_invariant_and_breaks_ties_low() {
        let frames = vec![
            ("v".to_string(), 2),
            ("v".to_string(), 1),
            ("v".to_string(), 2),
        ];
        let mut reversed = frames.clone();
        reversed.reverse();
        assert_eq!(majority_vote(&frames), majority_vote(&reversed));

        let tied = vec![("v".to_string(), 4), ("v".to_string(), 1)];
        assert_eq!(majority_vote(&tied)["v"], 1);

        let single = vec![("solo".to_string(), 5)];
        assert_eq!(majority_vote(&single)["solo"], 5);
    }

    #[test]
    fn video_accuracy_scores_votes() {
        let votes: BTreeMap<String, usize> =
            [("a".into(), 1), ("b".into(), 0)].into_iter().collect();
        let truth: BTreeMap<String, usize> =
            [("a".into(), 1), ("b".into(), 1)].into_iter().collect();
        assert_eq!(video_accuracy(&votes, &truth).unwrap(), 0.5);
        assert_eq!(video_accuracy(&votes, &votes.clone()).unwrap(), 1.0);

        let missing: BTreeMap<String, usize> = [("a".into(), 1)].into_iter().collect();
        assert!(video_accuracy(&votes, &missing).is_err());
    }

    #[test]
    fn matrix_tsv_layout() {
        let classes = vec!["x".to_string(), "y".to_string()];
        let m = ConfusionMatrix::from_counts(classes, vec![vec![2, 1], vec![0, 4]]).unwrap();
        let tsv = m.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "truth\\pred\tx\ty");
        assert_eq!(lines[1], "x\t2\t1");
        assert_eq!(lines[2], "y\t0\t4");
    }
}
