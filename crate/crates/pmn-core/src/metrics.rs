//! Evaluation: accuracy, confusion matrix, representation quality, feature
//! export.
//!
//! The representation metric is the ratio of the mean intra-class feature
//! distance (each feature to its class mean, plain Euclidean norm) to the
//! mean inter-class centroid distance (over all ordered centroid pairs,
//! diagonal terms contributing zero). Smaller is better: tight classes, far
//! apart.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::model::Model;
use crate::signal::Dataset;
use crate::tensor::Tensor;

/// Fraction of exact matches between predictions and labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(PmnError::Usage("accuracy of an empty batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(PmnError::Dimension(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `confusion[y][p]` counts samples of true class `y` predicted as `p`.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(PmnError::Dimension(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut matrix = vec![vec![0usize; class_count]; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= class_count || y >= class_count {
            return Err(PmnError::Data(format!(
                "class id out of range: predicted {p}, true {y}, K={class_count}"
            )));
        }
        matrix[y][p] += 1;
    }
    Ok(matrix)
}

/// Intra-to-inter distance ratio of a labeled feature set (`[n, q]` rows).
pub fn r_rps(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(PmnError::Dimension(format!(
            "expected [n, q] features, got {shape:?}"
        )));
    }
    let (n, q) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(PmnError::Dimension(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    if k < 2 {
        return Err(PmnError::Domain(
            "representation ratio needs at least two classes".into(),
        ));
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(PmnError::Domain(
            "every class in [0, K) must appear at least once".into(),
        ));
    }

    // Class means.
    let mut means = vec![vec![0.0; q]; k];
    for (i, &y) in labels.iter().enumerate() {
        for (slot, v) in means[y].iter_mut().zip(&features.data()[i * q..(i + 1) * q]) {
            *slot += v;
        }
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        mean.iter_mut().for_each(|v| *v /= count as f64);
    }

    // Mean distance of each feature to its own class mean.
    let mut intra = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &features.data()[i * q..(i + 1) * q];
        let sq: f64 = row
            .iter()
            .zip(&means[y])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        intra += sq.sqrt();
    }
    intra /= n as f64;

    // Mean distance over ordered centroid pairs; i == j terms are zero, so
    // including them and dividing by K(K-1) is the same as skipping them.
    let mut inter = 0.0;
    for i in 0..k {
        for j in 0..k {
            let sq: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            inter += sq.sqrt();
        }
    }
    inter /= (k * (k - 1)) as f64;
    if inter < 1e-12 {
        return Err(PmnError::Domain(
            "class centroids coincide; representation ratio undefined".into(),
        ));
    }
    Ok(intra / inter)
}

/// Evaluation summary for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub r_rps: f64,
    pub sample_count: usize,
}

/// Run a frozen model over a dataset and summarize it.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(PmnError::Usage("evaluation of an empty dataset".into()));
    }
    let k = model.class_count();
    let x = dataset.full_tensor();
    let labels = dataset.labels();
    let features = model.encode_batch(&x)?;
    let probs = model.probs_from_latents(&features)?;
    let predictions: Vec<usize> = (0..dataset.len())
        .map(|i| {
            let row = &probs.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();

    let acc = accuracy(&predictions, &labels)?;
    let confusion = confusion_matrix(&predictions, &labels, k)?;
    let per_class_accuracy = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    let ratio = r_rps(&features, &labels)?;
    Ok(EvalReport {
        accuracy: acc,
        per_class_accuracy,
        confusion,
        r_rps: ratio,
        sample_count: dataset.len(),
    })
}

/// Export encoder features as CSV (`label,domain,z0..`), appending the
/// prototype rows tagged with label -1 for matching-classifier models.
pub fn export_features(model: &Model, dataset: &Dataset, path: &Path) -> Result<()> {
    let x = dataset.full_tensor();
    let features = model.encode_batch(&x)?;
    let q = features.shape()[1];

    let file = File::create(path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| PmnError::io(path.display().to_string(), e);

    let mut header = String::from("label,domain");
    for i in 0..q {
        header.push_str(&format!(",z{i}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;

    for (i, sample) in dataset.samples.iter().enumerate() {
        let mut row = format!("{},{}", sample.label, sample.domain);
        for v in &features.data()[i * q..(i + 1) * q] {
            row.push(',');
            row.push_str(&format!("{v}"));
        }
        writeln!(w, "{row}").map_err(io_err)?;
    }
    if let Model::Pmn(m) = model {
        for j in 0..m.prototypes.count {
            let mut row = String::from("-1,0");
            for v in m.prototypes.row(j) {
                row.push(',');
                row.push_str(&format!("{v}"));
            }
            writeln!(w, "{row}").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 2, 3]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let preds = [0, 1, 1, 2, 0];
        let labels = [0, 1, 2, 2, 1];
        let m = confusion_matrix(&preds, &labels, 3).unwrap();
        assert_eq!(m[0], vec![1, 0, 0]);
        assert_eq!(m[1], vec![1, 1, 0]);
        assert_eq!(m[2], vec![0, 1, 1]);
        let trace: usize = (0..3).map(|i| m[i][i]).sum();
        assert_eq!(trace as f64 / 5.0, accuracy(&preds, &labels).unwrap());
    }

    #[test]
    fn r_rps_hand_example() {
        // Two classes, means (0,1) and (4,1), each sample offset vertically
        // by ±1: intra = 1, inter = 4, ratio = 0.25.
        let features = Tensor::from_vec(
            &[4, 2],
            vec![0.0, 0.0, 0.0, 2.0, 4.0, 0.0, 4.0, 2.0],
        )
        .unwrap();
        let labels = [0, 0, 1, 1];
        let v = r_rps(&features, &labels).unwrap();
        assert!((v - 0.25).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn r_rps_zero_for_collapsed_classes() {
        let features = Tensor::from_vec(&[4, 2], vec![1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(r_rps(&features, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn r_rps_invariant_under_rotation_and_scale() {
        let mut rng = Rng::new(12);
        let n = 20;
        let data: Vec<f64> = (0..n * 2)
            .map(|i| rng.gaussian() + if i % 4 == 0 { 3.0 } else { 0.0 })
            .collect();
        let features = Tensor::from_vec(&[n, 2], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let base = r_rps(&features, &labels).unwrap();

        // Rigid rotation by 1.1 rad.
        let (c, s) = (1.1f64.cos(), 1.1f64.sin());
        let rotated: Vec<f64> = (0..n)
            .flat_map(|i| {
                let (x, y) = (features.data()[i * 2], features.data()[i * 2 + 1]);
                [c * x - s * y, s * x + c * y]
            })
            .collect();
        let rotated = Tensor::from_vec(&[n, 2], rotated).unwrap();
        assert!((r_rps(&rotated, &labels).unwrap() - base).abs() < 1e-12);

        // Positive scaling.
        let scaled = features.map(|v| 3.7 * v);
        assert!((r_rps(&scaled, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn r_rps_needs_two_nonempty_classes() {
        let features = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            r_rps(&features, &[0, 0]).unwrap_err(),
            PmnError::Domain(_)
        ));
        // Coinciding centroids.
        let features = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            r_rps(&features, &[0, 1]).unwrap_err(),
            PmnError::Domain(_)
        ));
    }

    #[test]
    fn inter_distance_equivalence_with_and_without_diagonal() {
        // The ordered-pair sum including i == j equals the one skipping it.
        let mut rng = Rng::new(13);
        let k = 4;
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..3).map(|_| rng.gaussian()).collect())
            .collect();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let with_diag: f64 = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(i, j)| dist(&means[i], &means[j]))
            .sum();
        let without_diag: f64 = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| dist(&means[i], &means[j]))
            .sum();
        assert_eq!(with_diag, without_diag);
    }
}
