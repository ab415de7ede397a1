//! Per-class recall, precision and F1, normalized confusion matrices and
//! class histograms, for labeled points or map voxels.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rustc_hash::FxHashMap;

use crate::classes::argmax;
use crate::octree::{SemanticOctree, VoxelKey};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{predicted} predictions for {truth} ground-truth labels")]
    MismatchedLength { predicted: usize, truth: usize },
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: u32, classes: usize },
}

/// Streaming confusion counts, `counts[pred * c + truth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAccumulator {
    classes: usize,
    counts: Vec<u64>,
}

impl EvalAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, predicted: u32, truth: u32) -> Result<(), EvalError> {
        for id in [predicted, truth] {
            if id as usize >= self.classes {
                return Err(EvalError::ClassOutOfRange {
                    id,
                    classes: self.classes,
                });
            }
        }
        self.counts[predicted as usize * self.classes + truth as usize] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn count(&self, predicted: usize, truth: usize) -> u64 {
        self.counts[predicted * self.classes + truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn report(&self, names: &[String]) -> EvalReport {
        let c = self.classes;
        let total = self.total();
        let mut recall = vec![0.0; c];
        let mut precision = vec![0.0; c];
        let mut f1 = vec![0.0; c];
        let mut support = vec![0u64; c];
        let mut predicted = vec![0u64; c];
        for k in 0..c {
            let tp = self.count(k, k) as f64;
            support[k] = (0..c).map(|p| self.count(p, k)).sum();
            predicted[k] = (0..c).map(|t| self.count(k, t)).sum();
            recall[k] = ratio(tp, support[k] as f64);
            precision[k] = ratio(tp, predicted[k] as f64);
            f1[k] = ratio(2.0 * precision[k] * recall[k], precision[k] + recall[k]);
        }
        let confusion_percent = (0..c)
            .map(|p| {
                (0..c)
                    .map(|t| 100.0 * ratio(self.count(p, t) as f64, support[t] as f64))
                    .collect()
            })
            .collect();
        let pct = |n: u64| 100.0 * ratio(n as f64, total as f64);
        let supported: Vec<f64> = (0..c).filter(|&k| support[k] > 0).map(|k| f1[k]).collect();
        let macro_f1 = if supported.is_empty() {
            0.0
        } else {
            supported.iter().sum::<f64>() / supported.len() as f64
        };
        EvalReport {
            class_names: names.to_vec(),
            recall,
            precision,
            f1,
            macro_f1,
            confusion_percent,
            truth_histogram: support.iter().map(|&n| pct(n)).collect(),
            predicted_histogram: predicted.iter().map(|&n| pct(n)).collect(),
            support,
            predicted_count: predicted,
            total,
        }
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    /// Mean F1 over classes present in the ground truth.
    pub macro_f1: f64,
    /// Rows are predicted classes, columns true classes; each column with
    /// support sums to 100.
    pub confusion_percent: Vec<Vec<f64>>,
    /// Share of evaluated items per true class, percent.
    pub truth_histogram: Vec<f64>,
    /// Share of evaluated items per predicted class, percent.
    pub predicted_histogram: Vec<f64>,
    pub support: Vec<u64>,
    pub predicted_count: Vec<u64>,
    pub total: u64,
}

impl EvalReport {
    pub fn f1_of(&self, name: &str) -> Option<f64> {
        self.class_names.iter().position(|n| n == name).map(|i| self.f1[i])
    }

    /// Per-class metrics as CSV.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("class,recall,precision,f1,support,predicted,truth_percent,predicted_percent\n");
        for k in 0..self.class_names.len() {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{},{},{:.3},{:.3}",
                self.class_names[k],
                self.recall[k],
                self.precision[k],
                self.f1[k],
                self.support[k],
                self.predicted_count[k],
                self.truth_histogram[k],
                self.predicted_histogram[k]
            );
        }
        let _ = writeln!(s, "macro,,,{:.6},{},,,", self.macro_f1, self.total);
        s
    }

    /// Confusion matrix as CSV with one-decimal percentages; first column is
    /// the predicted class.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("predicted\\true");
        for n in &self.class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion_percent) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v:.1}");
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text table of the normalized confusion matrix.
    pub fn confusion_table(&self) -> String {
        let w = self.class_names.iter().map(|n| n.len()).max().unwrap_or(4).max(6);
        let mut s = format!("{:>w$}", "");
        for n in &self.class_names {
            let _ = write!(s, " {n:>w$}");
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion_percent) {
            let _ = write!(s, "{name:>w$}");
            for v in row {
                let _ = write!(s, " {v:>w$.1}");
            }
            s.push('\n');
        }
        s
    }
}

/// Compares argmax predictions against truth labels index by index.
pub fn evaluate(
    predicted: &[Vec<f64>],
    truth: &[u32],
    names: &[String],
) -> Result<EvalReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::MismatchedLength {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut acc = EvalAccumulator::new(names.len());
    for (p, &t) in predicted.iter().zip(truth) {
        acc.add(argmax(p) as u32, t)?;
    }
    Ok(acc.report(names))
}

/// Per-voxel votes of the true classes of points that fell in it.
#[derive(Debug, Clone, Default)]
pub struct VoxelTruth {
    classes: usize,
    resolution: f64,
    votes: FxHashMap<VoxelKey, Vec<u32>>,
}

impl VoxelTruth {
    pub fn new(classes: usize, resolution: f64) -> Self {
        Self {
            classes,
            resolution,
            votes: FxHashMap::default(),
        }
    }

    pub fn add(&mut self, p: &Vector3<f64>, class: u32) {
        let key = VoxelKey::from_point(p, self.resolution);
        let c = self.classes;
        let v = self.votes.entry(key).or_insert_with(|| vec![0; c]);
        if let Some(slot) = v.get_mut(class as usize) {
            *slot += 1;
        }
    }

    /// Majority class; ties go to the lowest class id.
    pub fn label(&self, key: &VoxelKey) -> Option<u32> {
        self.votes.get(key).and_then(|v| {
            let best = (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            (v[best] > 0).then_some(best as u32)
        })
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }
}

/// Evaluates occupied map voxels that have a ground-truth label.
pub fn evaluate_map(
    map: &SemanticOctree,
    truth: &VoxelTruth,
    names: &[String],
) -> Result<EvalReport, EvalError> {
    let mut acc = EvalAccumulator::new(names.len());
    for p in map.to_point_cloud() {
        if let Some(t) = truth.label(&p.key) {
            acc.add(argmax(&p.class_probs) as u32, t)?;
        }
    }
    Ok(acc.report(names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::{Observation, OctreeParams};
    use approx::assert_abs_diff_eq;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn onehot(c: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; c];
        v[k] = 1.0;
        v
    }

    #[test]
    fn perfect_prediction() {
        let truth = vec![0, 1, 2, 2, 1, 0, 0];
        let pred: Vec<_> = truth.iter().map(|&t| onehot(3, t as usize)).collect();
        let r = evaluate(&pred, &truth, &names(3)).unwrap();
        assert_eq!(r.recall, vec![1.0; 3]);
        assert_eq!(r.precision, vec![1.0; 3]);
        assert_eq!(r.f1, vec![1.0; 3]);
        for (i, row) in r.confusion_percent.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 100.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn all_predicted_as_one_class() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![onehot(2, 0); 4];
        let r = evaluate(&pred, &truth, &names(2)).unwrap();
        assert_eq!(r.recall[0], 1.0);
        assert_eq!(r.precision[0], 0.5);
        assert_abs_diff_eq!(r.f1[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!((r.recall[1], r.precision[1], r.f1[1]), (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(r.macro_f1, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn columns_sum_to_hundred() {
        let truth = vec![0, 1, 2, 0, 1, 2, 2, 2, 1];
        let pred = vec![0, 2, 2, 1, 1, 0, 2, 1, 1];
        let pred: Vec<_> = pred.iter().map(|&p| onehot(3, p)).collect();
        let r = evaluate(&pred, &truth, &names(3)).unwrap();
        for t in 0..3 {
            let s: f64 = (0..3).map(|p| r.confusion_percent[p][t]).sum();
            assert!((s - 100.0).abs() < 0.1);
        }
        assert!((r.truth_histogram.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            evaluate(&[onehot(2, 0)], &[0, 1], &names(2)),
            Err(EvalError::MismatchedLength { predicted: 1, truth: 2 })
        );
    }

    #[test]
    fn one_decimal_formatting() {
        let truth = vec![0, 0, 0, 1];
        let pred = vec![onehot(2, 0), onehot(2, 0), onehot(2, 1), onehot(2, 1)];
        let r = evaluate(&pred, &truth, &names(2)).unwrap();
        let csv = r.confusion_csv();
        assert_eq!(csv, "predicted\\true,c0,c1\nc0,66.7,0.0\nc1,33.3,100.0\n");
        assert!(r.confusion_table().contains("66.7"));
    }

    #[test]
    fn voxel_majority_vote() {
        let mut t = VoxelTruth::new(3, 0.1);
        let p = Vector3::new(0.01, 0.02, 0.03);
        t.add(&p, 2);
        t.add(&p, 1);
        assert_eq!(t.label(&VoxelKey::new(0, 0, 0)), Some(1));
        t.add(&p, 2);
        assert_eq!(t.label(&VoxelKey::new(0, 0, 0)), Some(2));
        assert_eq!(t.label(&VoxelKey::new(5, 0, 0)), None);
    }

    #[test]
    fn map_evaluation() {
        let mut map = SemanticOctree::new(OctreeParams::default(), 2).unwrap();
        map.apply(VoxelKey::new(0, 0, 0), Observation::Hit, Some(&[0.8, 0.2]));
        map.apply(VoxelKey::new(1, 0, 0), Observation::Hit, Some(&[0.3, 0.7]));
        map.apply(VoxelKey::new(2, 0, 0), Observation::Hit, Some(&[0.3, 0.7]));
        let mut t = VoxelTruth::new(2, 0.1);
        t.add(&Vector3::new(0.05, 0.05, 0.05), 0);
        t.add(&Vector3::new(0.15, 0.05, 0.05), 0);
        let r = evaluate_map(&map, &t, &names(2)).unwrap();
        assert_eq!(r.total, 2);
        assert_eq!(r.recall[0], 0.5);
    }
}
