//! The five-term training objective and its gradients.
//!
//! `total = cla + lambda*recon + lambda1*r1 + lambda2*r2 + lambda3*r3` where
//!
//! - `cla`: mean cross-entropy of the softmax probabilities (log clamped at
//!   1e-12; the clamp only guards the value, gradients assume it is inactive)
//! - `recon`: mean over samples of the squared reconstruction error summed
//!   over bins
//! - `r1`: mean over samples of the distance to the nearest prototype
//! - `r2`: mean over prototypes of the distance to the nearest sample in the
//!   current minibatch (the minimization is deliberately local to the batch)
//! - `r3`: negated mean over prototypes of the distance to the nearest other
//!   prototype (self-pairs excluded), pushing prototypes apart
//!
//! Minimum selections route their (sub)gradient to the single winning pair;
//! ties resolve to the lowest index, matching `argmin` everywhere else.

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::model::{pm_layer, AeMlpModel, Metric, PmnModel, PrototypeSet};
use crate::tensor::Tensor;

const LOG_CLAMP: f64 = 1e-12;

/// Weights balancing the objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction weight.
    pub lambda: f64,
    /// Feature-to-prototype clustering weight.
    pub lambda1: f64,
    /// Prototype-to-feature anchoring weight.
    pub lambda2: f64,
    /// Prototype separation weight.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Grid-searched defaults used by every stock run configuration.
        LossWeights {
            lambda: 1.0,
            lambda1: 0.25,
            lambda2: 0.25,
            lambda3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PmnError::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// The five scalar terms plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cla: f64,
    pub recon: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(cla: f64, recon: f64, r1: f64, r2: f64, r3: f64, w: &LossWeights) -> Result<Self> {
        for (name, v) in [
            ("cla", cla),
            ("recon", recon),
            ("r1", r1),
            ("r2", r2),
            ("r3", r3),
        ] {
            if !v.is_finite() {
                return Err(PmnError::Numerical(format!(
                    "loss term '{name}' is non-finite ({v})"
                )));
            }
        }
        Ok(LossBreakdown {
            cla,
            recon,
            r1,
            r2,
            r3,
            total: cla + w.lambda * recon + w.lambda1 * r1 + w.lambda2 * r2 + w.lambda3 * r3,
        })
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(PmnError::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(PmnError::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = probabilities.shape();
    if shape.len() != 2 {
        return Err(PmnError::Dimension(format!(
            "cross_entropy expects [N, K] probabilities, got {shape:?}"
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    check_labels(labels, n, k)?;
    let p = probabilities.data();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= p[i * k + y].max(LOG_CLAMP).ln();
    }
    Ok(total / n as f64)
}

/// Mean over samples of the squared error summed over bins.
pub fn reconstruction_mse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(PmnError::Dimension(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if x.rank() != 2 {
        return Err(PmnError::Dimension(format!(
            "reconstruction_mse expects [N, bins], got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0] as f64;
    let sq: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n)
}

fn latent_rows(features: &Tensor) -> Result<(usize, usize)> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(PmnError::Dimension(format!(
            "expected [N, q] features, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Mean distance from each feature to its nearest prototype, with the winning
/// prototype index per feature.
pub fn r1_detailed(
    features: &Tensor,
    prototypes: &PrototypeSet,
    metric: Metric,
) -> Result<(f64, Vec<usize>)> {
    let (n, q) = latent_rows(features)?;
    let mut total = 0.0;
    let mut winners = Vec::with_capacity(n);
    for i in 0..n {
        let z = &features.data()[i * q..(i + 1) * q];
        let d = pm_layer(z, prototypes, metric)?;
        let j = crate::tensor::argmin(&d);
        total += d[j];
        winners.push(j);
    }
    Ok((total / n as f64, winners))
}

/// Mean distance from each prototype to its nearest feature in the batch,
/// with the winning sample index per prototype.
pub fn r2_detailed(
    features: &Tensor,
    prototypes: &PrototypeSet,
    metric: Metric,
) -> Result<(f64, Vec<usize>)> {
    let (n, q) = latent_rows(features)?;
    let m = prototypes.count;
    let mut total = 0.0;
    let mut winners = Vec::with_capacity(m);
    for j in 0..m {
        let p = prototypes.row(j);
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for i in 0..n {
            let z = &features.data()[i * q..(i + 1) * q];
            let d = metric.distance(z, p)?;
            if d < best {
                best = d;
                best_i = i;
            }
        }
        total += best;
        winners.push(best_i);
    }
    Ok((total / m as f64, winners))
}

/// Negated mean distance from each prototype to its nearest *other*
/// prototype, with the winning partner per prototype.
pub fn r3_detailed(prototypes: &PrototypeSet, metric: Metric) -> Result<(f64, Vec<usize>)> {
    let m = prototypes.count;
    if m < 2 {
        return Err(PmnError::Config(
            "prototype separation needs at least two prototypes".into(),
        ));
    }
    let mut total = 0.0;
    let mut winners = Vec::with_capacity(m);
    for i in 0..m {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..m {
            if j == i {
                continue;
            }
            let d = metric.distance(prototypes.row(i), prototypes.row(j))?;
            if d < best {
                best = d;
                best_j = j;
            }
        }
        total += best;
        winners.push(best_j);
    }
    Ok((-total / m as f64, winners))
}

pub fn r1_feature_to_prototype(
    features: &Tensor,
    prototypes: &PrototypeSet,
    metric: Metric,
) -> Result<f64> {
    if features.shape()[0] == 0 {
        return Err(PmnError::Usage("empty feature batch".into()));
    }
    r1_detailed(features, prototypes, metric).map(|(v, _)| v)
}

pub fn r2_prototype_to_feature(
    features: &Tensor,
    prototypes: &PrototypeSet,
    metric: Metric,
) -> Result<f64> {
    if features.shape()[0] == 0 {
        return Err(PmnError::Usage("empty feature batch".into()));
    }
    r2_detailed(features, prototypes, metric).map(|(v, _)| v)
}

pub fn r3_prototype_separation(prototypes: &PrototypeSet, metric: Metric) -> Result<f64> {
    r3_detailed(prototypes, metric).map(|(v, _)| v)
}

/// Outcome of a loss evaluation over one batch.
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    /// argmax class per sample, for accuracy bookkeeping.
    pub predictions: Vec<usize>,
}

/// Evaluate the full objective on a batch and (optionally) populate the
/// gradients of every parameter, prototypes and classifier weight included.
///
/// `x` is `[N, bins]` with one class id per row in `labels`. Gradients
/// accumulate on top of whatever is in the model's buffers; call `zero_grads`
/// first when a fresh gradient is wanted.
pub fn pmn_loss(
    model: &mut PmnModel,
    x: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
    with_grads: bool,
) -> Result<BatchLoss> {
    weights.validate()?;
    let n = x.shape()[0];
    let k = model.class_count;
    let m = model.prototypes.count;
    check_labels(labels, n, k)?;

    let fwd = model.ae.forward_train(x)?;
    let (_, q) = latent_rows(&fwd.z)?;

    // Matching layer over the batch.
    let mut dvec = vec![0.0; n * m];
    for i in 0..n {
        let z = &fwd.z.data()[i * q..(i + 1) * q];
        let d = pm_layer(z, &model.prototypes, model.metric)?;
        dvec[i * m..(i + 1) * m].copy_from_slice(&d);
    }

    // Logits and probabilities.
    let w = model.fc_weight.data().to_vec();
    let mut probs = vec![0.0; n * k];
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                w[c * m..(c + 1) * m]
                    .iter()
                    .zip(&dvec[i * m..(i + 1) * m])
                    .map(|(wv, dv)| wv * dv)
                    .sum()
            })
            .collect();
        let p = crate::model::softmax(&logits);
        predictions.push(argmax(&p));
        probs[i * k..(i + 1) * k].copy_from_slice(&p);
    }

    let probs_t = Tensor::from_vec(&[n, k], probs.clone())?;
    let cla = cross_entropy(&probs_t, labels)?;
    let recon = reconstruction_mse(x, &fwd.x_hat)?;
    let (r1, r1_winners) = r1_detailed(&fwd.z, &model.prototypes, model.metric)?;
    let (r2, r2_winners) = r2_detailed(&fwd.z, &model.prototypes, model.metric)?;
    let (r3, r3_winners) = r3_detailed(&model.prototypes, model.metric)?;
    let breakdown = LossBreakdown::assemble(cla, recon, r1, r2, r3, weights)?;

    if with_grads {
        // Softmax + cross-entropy: d total / d logits = (p - onehot) / n.
        let mut dlogits = vec![0.0; n * k];
        for i in 0..n {
            for c in 0..k {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                dlogits[i * k + c] = (probs[i * k + c] - y) / n as f64;
            }
        }

        // Classifier weight gradient and distance-vector gradient.
        {
            let dw = model.fc_wgrad.data_mut();
            for i in 0..n {
                for c in 0..k {
                    let g = dlogits[i * k + c];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        dw[c * m + j] += g * dvec[i * m + j];
                    }
                }
            }
        }
        let mut d_dvec = vec![0.0; n * m];
        for i in 0..n {
            for c in 0..k {
                let g = dlogits[i * k + c];
                for j in 0..m {
                    d_dvec[i * m + j] += g * w[c * m + j];
                }
            }
        }
        // Minimum-selection subgradients: single winning pair each.
        for (i, &j) in r1_winners.iter().enumerate() {
            d_dvec[i * m + j] += weights.lambda1 / n as f64;
        }
        for (j, &i) in r2_winners.iter().enumerate() {
            d_dvec[i * m + j] += weights.lambda2 / m as f64;
        }

        // Push distance gradients into latents and prototypes.
        let mut dz = Tensor::zeros(&[n, q]);
        for i in 0..n {
            let z = &fwd.z.data()[i * q..(i + 1) * q];
            for j in 0..m {
                let coeff = d_dvec[i * m + j];
                if coeff == 0.0 {
                    continue;
                }
                let (da, db) = model.metric.distance_grads(z, model.prototypes.row(j))?;
                for (slot, v) in dz.data_mut()[i * q..(i + 1) * q].iter_mut().zip(&da) {
                    *slot += coeff * v;
                }
                for (slot, v) in model.prototypes.grad.data_mut()[j * q..(j + 1) * q]
                    .iter_mut()
                    .zip(&db)
                {
                    *slot += coeff * v;
                }
            }
        }

        // Prototype separation gradients.
        let r3_coeff = -weights.lambda3 / m as f64;
        if r3_coeff != 0.0 {
            for (i, &j) in r3_winners.iter().enumerate() {
                let (da, db) = model
                    .metric
                    .distance_grads(model.prototypes.row(i), model.prototypes.row(j))?;
                for (slot, v) in model.prototypes.grad.data_mut()[i * q..(i + 1) * q]
                    .iter_mut()
                    .zip(&da)
                {
                    *slot += r3_coeff * v;
                }
                for (slot, v) in model.prototypes.grad.data_mut()[j * q..(j + 1) * q]
                    .iter_mut()
                    .zip(&db)
                {
                    *slot += r3_coeff * v;
                }
            }
        }

        // Reconstruction gradient and the trip back through the autoencoder.
        let scale = 2.0 * weights.lambda / n as f64;
        let mut dx_hat = Tensor::zeros(x.shape());
        for ((d, xh), xv) in dx_hat
            .data_mut()
            .iter_mut()
            .zip(fwd.x_hat.data())
            .zip(x.data())
        {
            *d = scale * (xh - xv);
        }
        model.ae.backward(&fwd, dz, dx_hat)?;
    }

    Ok(BatchLoss {
        breakdown,
        predictions,
    })
}

/// Objective for the MLP-head baseline: cross-entropy plus weighted
/// reconstruction only (no prototypes, so the regularizers are zero).
pub fn baseline_loss(
    model: &mut AeMlpModel,
    x: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
    with_grads: bool,
) -> Result<BatchLoss> {
    weights.validate()?;
    let n = x.shape()[0];
    let k = model.class_count;
    check_labels(labels, n, k)?;

    let fwd = model.ae.forward_train(x)?;
    let (logits, head_caches) = model.head.forward_train(fwd.z.clone())?;

    let mut probs = vec![0.0; n * k];
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let p = crate::model::softmax(&logits.data()[i * k..(i + 1) * k]);
        predictions.push(argmax(&p));
        probs[i * k..(i + 1) * k].copy_from_slice(&p);
    }
    let probs_t = Tensor::from_vec(&[n, k], probs.clone())?;
    let cla = cross_entropy(&probs_t, labels)?;
    let recon = reconstruction_mse(x, &fwd.x_hat)?;
    let breakdown = LossBreakdown::assemble(cla, recon, 0.0, 0.0, 0.0, weights)?;

    if with_grads {
        let mut dlogits = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for c in 0..k {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                dlogits.data_mut()[i * k + c] = (probs[i * k + c] - y) / n as f64;
            }
        }
        let dz = model.head.backward(dlogits, &head_caches)?;

        let scale = 2.0 * weights.lambda / n as f64;
        let mut dx_hat = Tensor::zeros(x.shape());
        for ((d, xh), xv) in dx_hat
            .data_mut()
            .iter_mut()
            .zip(fwd.x_hat.data())
            .zip(x.data())
        {
            *d = scale * (xh - xv);
        }
        model.ae.backward(&fwd, dz, dx_hat)?;
    }

    Ok(BatchLoss {
        breakdown,
        predictions,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use crate::model::{init_fc_weight, Autoencoder};
    use crate::nn::{BatchNorm1d, Conv1d, Deconv1d, Layer, Linear, Sequential};
    use crate::rng::Rng;

    fn protos_from(rows: &[&[f64]]) -> PrototypeSet {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PrototypeSet {
            count: rows.len(),
            dim,
            matrix: Tensor::from_vec(&[rows.len(), dim], data).unwrap(),
            grad: Tensor::zeros(&[rows.len(), dim]),
        }
    }

    fn features_from(rows: &[&[f64]]) -> Tensor {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[rows.len(), dim], data).unwrap()
    }

    // ── Cross-entropy ──────────────────────────────────────────────────────

    #[test]
    fn cross_entropy_of_perfect_predictions_is_zero() {
        let p = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy(&p, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&p, &[0]).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let uniform = Tensor::filled(&[1, 11], 1.0 / 11.0);
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 11.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let v = cross_entropy(&p, &[0]).unwrap();
        assert!(v.is_finite());
        assert!((v - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            cross_entropy(&p, &[2]).unwrap_err(),
            PmnError::Data(_)
        ));
    }

    // ── Reconstruction ─────────────────────────────────────────────────────

    #[test]
    fn mse_examples() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(reconstruction_mse(&x, &x).unwrap(), 0.0);

        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(reconstruction_mse(&x, &zero).unwrap(), 2.0);

        let neg = Tensor::from_vec(&[1, 2], vec![-1.0, -1.0]).unwrap();
        assert_eq!(reconstruction_mse(&x, &neg).unwrap(), 8.0);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let x = Tensor::zeros(&[1, 2]);
        let y = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            reconstruction_mse(&x, &y).unwrap_err(),
            PmnError::Dimension(_)
        ));
    }

    // ── Regularizers ───────────────────────────────────────────────────────

    #[test]
    fn r1_and_r2_hand_example() {
        let features = features_from(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let protos = protos_from(&[&[0.0, 0.0], &[3.0, 0.0]]);
        // Exhaustive pairwise distances: feature 0 hits prototype 0 at 0,
        // feature 1 is 1 away (squared) from prototype 1.
        assert_eq!(
            r1_feature_to_prototype(&features, &protos, Metric::SqL2).unwrap(),
            0.5
        );
        assert_eq!(
            r2_prototype_to_feature(&features, &protos, Metric::SqL2).unwrap(),
            0.5
        );
    }

    #[test]
    fn r1_zero_when_every_feature_sits_on_a_prototype() {
        let protos = protos_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let features = features_from(&[&[3.0, 4.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(
            r1_feature_to_prototype(&features, &protos, Metric::SqL2).unwrap(),
            0.0
        );
    }

    #[test]
    fn r1_never_increases_with_an_extra_prototype() {
        let mut rng = Rng::new(3);
        let features =
            Tensor::from_vec(&[6, 3], (0..18).map(|_| rng.gaussian()).collect()).unwrap();
        let base = protos_from(&[&[0.1, 0.2, 0.3], &[-1.0, 0.5, 0.0]]);
        let with_far = protos_from(&[
            &[0.1, 0.2, 0.3],
            &[-1.0, 0.5, 0.0],
            &[100.0, 100.0, 100.0],
        ]);
        let a = r1_feature_to_prototype(&features, &base, Metric::SqL2).unwrap();
        let b = r1_feature_to_prototype(&features, &with_far, Metric::SqL2).unwrap();
        assert!(b <= a);
    }

    #[test]
    fn r2_zero_when_prototypes_sit_on_features() {
        let features = features_from(&[&[1.0, 1.0], &[2.0, 2.0], &[5.0, 0.0]]);
        let protos = protos_from(&[&[2.0, 2.0], &[1.0, 1.0]]);
        assert_eq!(
            r2_prototype_to_feature(&features, &protos, Metric::SqL2).unwrap(),
            0.0
        );
    }

    #[test]
    fn r2_superset_batch_is_no_worse() {
        let protos = protos_from(&[&[0.0, 0.0], &[4.0, 4.0]]);
        let small = features_from(&[&[1.0, 0.0], &[3.0, 3.0]]);
        let big = features_from(&[&[1.0, 0.0], &[3.0, 3.0], &[0.1, 0.0], &[4.0, 4.1]]);
        let small_v = r2_prototype_to_feature(&small, &protos, Metric::SqL2).unwrap();
        let big_v = r2_prototype_to_feature(&big, &protos, Metric::SqL2).unwrap();
        assert!(big_v <= small_v);
    }

    #[test]
    fn r3_hand_examples() {
        let identical = protos_from(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(
            r3_prototype_separation(&identical, Metric::SqL2).unwrap(),
            0.0
        );

        let apart = protos_from(&[&[0.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(r3_prototype_separation(&apart, Metric::SqL2).unwrap(), -9.0);

        let further = protos_from(&[&[0.0, 0.0], &[4.0, 0.0]]);
        assert!(
            r3_prototype_separation(&further, Metric::SqL2).unwrap()
                < r3_prototype_separation(&apart, Metric::SqL2).unwrap()
        );
    }

    #[test]
    fn r3_needs_two_prototypes() {
        let lonely = protos_from(&[&[0.0, 0.0]]);
        assert!(matches!(
            r3_prototype_separation(&lonely, Metric::SqL2).unwrap_err(),
            PmnError::Config(_)
        ));
    }

    #[test]
    fn regularizers_match_exhaustive_oracle() {
        // Brute-force reimplementation: materialize the full distance matrix
        // and reduce it directly.
        let mut rng = Rng::new(41);
        for trial in 0..20 {
            let n = 1 + rng.below(10);
            let m = 2 + rng.below(4);
            let q = 1 + rng.below(4);
            let features =
                Tensor::from_vec(&[n, q], (0..n * q).map(|_| rng.gaussian()).collect()).unwrap();
            let protos = PrototypeSet::new(m, q, &mut rng);
            let metric = [Metric::SqL2, Metric::L1][trial % 2];

            let mut dmat = vec![vec![0.0; m]; n];
            for (i, row) in dmat.iter_mut().enumerate() {
                for (j, slot) in row.iter_mut().enumerate() {
                    let z = &features.data()[i * q..(i + 1) * q];
                    *slot = metric.distance(z, protos.row(j)).unwrap();
                }
            }
            let oracle_r1: f64 = dmat
                .iter()
                .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / n as f64;
            let oracle_r2: f64 = (0..m)
                .map(|j| (0..n).map(|i| dmat[i][j]).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / m as f64;
            let oracle_r3: f64 = -(0..m)
                .map(|i| {
                    (0..m)
                        .filter(|&j| j != i)
                        .map(|j| metric.distance(protos.row(i), protos.row(j)).unwrap())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / m as f64;

            let r1 = r1_feature_to_prototype(&features, &protos, metric).unwrap();
            let r2 = r2_prototype_to_feature(&features, &protos, metric).unwrap();
            let r3 = r3_prototype_separation(&protos, metric).unwrap();
            assert!((r1 - oracle_r1).abs() < 1e-12);
            assert!((r2 - oracle_r2).abs() < 1e-12);
            assert!((r3 - oracle_r3).abs() < 1e-12);
        }
    }

    #[test]
    fn r1_r2_invariant_under_batch_and_prototype_permutation() {
        let mut rng = Rng::new(42);
        let features =
            Tensor::from_vec(&[5, 3], (0..15).map(|_| rng.gaussian()).collect()).unwrap();
        let protos = PrototypeSet::new(3, 3, &mut rng);

        let r1 = r1_feature_to_prototype(&features, &protos, Metric::SqL2).unwrap();
        let r2 = r2_prototype_to_feature(&features, &protos, Metric::SqL2).unwrap();

        // Reverse sample order and rotate prototype order.
        let mut rows: Vec<Vec<f64>> = (0..5)
            .map(|i| features.data()[i * 3..(i + 1) * 3].to_vec())
            .collect();
        rows.reverse();
        let features_p = Tensor::from_vec(&[5, 3], rows.concat()).unwrap();
        let rotated: Vec<f64> = (0..3)
            .map(|j| protos.row((j + 1) % 3).to_vec())
            .collect::<Vec<_>>()
            .concat();
        let protos_p = PrototypeSet {
            count: 3,
            dim: 3,
            matrix: Tensor::from_vec(&[3, 3], rotated).unwrap(),
            grad: Tensor::zeros(&[3, 3]),
        };

        assert!(
            (r1 - r1_feature_to_prototype(&features_p, &protos_p, Metric::SqL2).unwrap()).abs()
                < 1e-12
        );
        assert!(
            (r2 - r2_prototype_to_feature(&features_p, &protos_p, Metric::SqL2).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn tied_minimum_routes_to_lowest_index() {
        // Two identical prototypes: every selection must pick index 0.
        let protos = protos_from(&[&[1.0, 0.0], &[1.0, 0.0], &[5.0, 5.0]]);
        let features = features_from(&[&[0.0, 0.0]]);
        let (_, w1) = r1_detailed(&features, &protos, Metric::SqL2).unwrap();
        assert_eq!(w1, vec![0]);
        // Tie on the sample side as well.
        let features = features_from(&[&[2.0, 0.0], &[2.0, 0.0]]);
        let (_, w2) = r2_detailed(&features, &protos, Metric::SqL2).unwrap();
        assert_eq!(w2[0], 0);
        // Prototype 2's nearest is a tie between 0 and 1; 0 wins.
        let (_, w3) = r3_detailed(&protos, Metric::SqL2).unwrap();
        assert_eq!(w3[2], 0);
    }

    // ── Total objective ────────────────────────────────────────────────────

    /// Tiny homologous model: every layer kind appears, latent dim 4, three
    /// prototypes, 16-bin input.
    pub(crate) fn tiny_model(rng: &mut Rng) -> PmnModel {
        let enc_conv = Sequential::new(vec![
            Layer::Conv1d(Conv1d::new(1, 2, 3, 2, 1, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(2)),
            Layer::Relu,
        ]);
        let enc_fc = Sequential::new(vec![
            Layer::Flatten,
            Layer::Linear(Linear::new(16, 8, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(8, 4, rng)),
        ]);
        let dec_fc = Sequential::new(vec![
            Layer::Linear(Linear::new(4, 8, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(8, 16, rng)),
            Layer::Reshape { ch: 2, len: 8 },
        ]);
        let dec_conv = Sequential::new(vec![
            Layer::Deconv1d(Deconv1d::new(2, 2, 4, 2, 1, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(2)),
            Layer::Relu,
            Layer::Deconv1d(Deconv1d::new(2, 1, 3, 1, 1, rng)),
            Layer::Flatten,
        ]);
        let ae = Autoencoder {
            enc_conv,
            enc_fc,
            dec_fc,
            dec_conv,
            input_bins: 16,
        };
        PmnModel {
            ae,
            prototypes: PrototypeSet::new(3, 4, rng),
            fc_weight: init_fc_weight(3, 3).unwrap(),
            fc_wgrad: Tensor::zeros(&[3, 3]),
            metric: Metric::SqL2,
            class_count: 3,
        }
    }

    fn tiny_batch(rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let x = Tensor::from_vec(&[5, 16], (0..80).map(|_| rng.uniform()).collect()).unwrap();
        let labels = vec![0, 1, 2, 1, 0];
        (x, labels)
    }

    #[test]
    fn total_reduces_to_classification_when_other_weights_vanish() {
        let mut rng = Rng::new(50);
        let mut model = tiny_model(&mut rng);
        let (x, labels) = tiny_batch(&mut rng);
        let w = LossWeights {
            lambda: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let out = pmn_loss(&mut model, &x, &labels, &w, false).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.cla);
    }

    #[test]
    fn default_weights_are_the_grid_searched_setting() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda, w.lambda1, w.lambda2, w.lambda3),
            (1.0, 0.25, 0.25, 0.01)
        );
    }

    #[test]
    fn total_matches_independent_resummation() {
        let mut rng = Rng::new(51);
        let mut model = tiny_model(&mut rng);
        let (x, labels) = tiny_batch(&mut rng);
        let w = LossWeights::default();
        let out = pmn_loss(&mut model, &x, &labels, &w, false)
            .unwrap()
            .breakdown;
        let resum = out.cla
            + w.lambda * out.recon
            + w.lambda1 * out.r1
            + w.lambda2 * out.r2
            + w.lambda3 * out.r3;
        assert!((out.total - resum).abs() < 1e-12);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let mut rng = Rng::new(52);
        let mut model = tiny_model(&mut rng);
        let (x, labels) = tiny_batch(&mut rng);
        let w = LossWeights::default();

        model.zero_grads();
        pmn_loss(&mut model, &x, &labels, &w, true).unwrap();

        // Snapshot analytic gradients in visit order.
        let mut grads: Vec<Vec<f64>> = Vec::new();
        model.visit_params(&mut |slot| grads.push(slot.grad.data().to_vec()));

        let mut worst = 0.0f64;
        let mut worst_at = String::new();
        for (p, grad) in grads.iter().enumerate() {
            let len = grad.len();
            let step = (len / 6).max(1);
            for e in (0..len).step_by(step) {
                let x0 = {
                    let mut i = 0;
                    let mut v = 0.0;
                    model.visit_params(&mut |slot| {
                        if i == p {
                            v = slot.value.data()[e];
                        }
                        i += 1;
                    });
                    v
                };
                let fd = central_diff(
                    |v| {
                        let mut i = 0;
                        model.visit_params(&mut |slot| {
                            if i == p {
                                slot.value.data_mut()[e] = v;
                            }
                            i += 1;
                        });
                        pmn_loss(&mut model, &x, &labels, &w, false)
                            .unwrap()
                            .breakdown
                            .total
                    },
                    x0,
                    1e-6,
                );
                let err = rel_error(grad[e], fd, 1e-4);
                if err > worst {
                    worst = err;
                    worst_at = format!("param {p} element {e}");
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst} at {worst_at}");
    }

    #[test]
    fn matched_prototype_receives_gradient_on_misclassified_sample() {
        let mut rng = Rng::new(53);
        let mut model = tiny_model(&mut rng);
        let x = Tensor::from_vec(&[1, 16], (0..16).map(|_| rng.uniform()).collect()).unwrap();

        // Find the model's current prediction, then demand a different label.
        let out = pmn_loss(&mut model, &x, &[0], &LossWeights::default(), false).unwrap();
        let wrong_label = (out.predictions[0] + 1) % 3;

        model.zero_grads();
        let out = pmn_loss(&mut model, &x, &[wrong_label], &LossWeights::default(), true).unwrap();
        let matched = out.predictions[0]; // still the nearest prototype's class
        let grad_row = &model.prototypes.grad.data()[matched * 4..(matched + 1) * 4];
        assert!(
            grad_row.iter().any(|&g| g != 0.0),
            "matched prototype gradient is all zero: {grad_row:?}"
        );
    }

    #[test]
    fn baseline_ignores_prototype_terms() {
        let mut rng = Rng::new(54);
        let mut model = AeMlpModel::new(3, &mut rng);
        // Swap in the tiny autoencoder so the test stays fast.
        model.ae = tiny_model(&mut Rng::new(55)).ae;
        model.head = Sequential::new(vec![
            Layer::Linear(Linear::new(4, 8, &mut rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(8, 3, &mut rng)),
        ]);
        let (x, labels) = tiny_batch(&mut rng);
        let out = baseline_loss(&mut model, &x, &labels, &LossWeights::default(), false).unwrap();
        assert_eq!(out.breakdown.r1, 0.0);
        assert_eq!(out.breakdown.r2, 0.0);
        assert_eq!(out.breakdown.r3, 0.0);
        assert!(out.breakdown.total > 0.0);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let mut rng = Rng::new(56);
        let mut model = AeMlpModel::new(3, &mut rng);
        model.ae = tiny_model(&mut Rng::new(57)).ae;
        // The stock head expects 64-dim latents; rebuild it for 4 dims.
        model.head = Sequential::new(vec![
            Layer::Linear(Linear::new(4, 8, &mut rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(8, 3, &mut rng)),
        ]);
        let (x, labels) = tiny_batch(&mut rng);
        let w = LossWeights::default();

        model.zero_grads();
        baseline_loss(&mut model, &x, &labels, &w, true).unwrap();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        model.visit_params(&mut |slot| grads.push(slot.grad.data().to_vec()));

        let mut worst = 0.0f64;
        for (p, grad) in grads.iter().enumerate() {
            let len = grad.len();
            let step = (len / 4).max(1);
            for e in (0..len).step_by(step) {
                let x0 = {
                    let mut i = 0;
                    let mut v = 0.0;
                    model.visit_params(&mut |slot| {
                        if i == p {
                            v = slot.value.data()[e];
                        }
                        i += 1;
                    });
                    v
                };
                let fd = central_diff(
                    |v| {
                        let mut i = 0;
                        model.visit_params(&mut |slot| {
                            if i == p {
                                slot.value.data_mut()[e] = v;
                            }
                            i += 1;
                        });
                        baseline_loss(&mut model, &x, &labels, &w, false)
                            .unwrap()
                            .breakdown
                            .total
                    },
                    x0,
                    1e-6,
                );
                worst = worst.max(rel_error(grad[e], fd, 1e-4));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
