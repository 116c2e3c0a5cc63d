//! The three interpreting paths of the matching classifier.
//!
//! 1. **Classification logic**: the per-prototype distance vector is the
//!    decision — the prediction is the class of the nearest prototype.
//! 2. **Sample-level prototypes**: feature-level prototypes pushed through
//!    the decoder become readable "typical fault spectra".
//! 3. **Similarity source**: gradient-weighted activation mapping over the
//!    deepest convolutional feature map (128 channels x 4 positions),
//!    upsampled to the 1024 input bins, shows which frequencies drive the
//!    match.

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::model::PmnModel;
use crate::tensor::{argmin, Tensor};

/// Per-bin relevance scores aligned to the input spectrum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Non-negative, max-normalized to 1 unless the raw map was all zero.
    pub scores: Vec<f64>,
    /// Set when the gated map vanished everywhere and no normalization was
    /// possible.
    pub zero_map: bool,
}

/// Everything the first two interpreting paths say about one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: usize,
    pub distances: Vec<f64>,
    pub matched_prototype: usize,
    pub matched_class: usize,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
    /// The matched prototype decoded into the spectrum domain.
    pub decoded_prototype: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribution: Option<AttributionMap>,
}

/// First + second interpreting path for one sample: distances, the matched
/// prototype, and that prototype decoded into the spectrum domain.
pub fn explain_match(model: &PmnModel, sample: &[f64], sample_id: usize) -> Result<Explanation> {
    let cls = model.classify(sample)?;
    let matched = argmin(&cls.distances);
    let proto = Tensor::from_vec(
        &[1, model.prototypes.dim],
        model.prototypes.row(matched).to_vec(),
    )?;
    let decoded = model.ae.decode(&proto)?;
    Ok(Explanation {
        sample_id,
        distances: cls.distances,
        matched_prototype: matched,
        matched_class: model.prototype_class(matched),
        predicted_class: cls.predicted,
        probabilities: cls.probabilities,
        decoded_prototype: decoded.data().to_vec(),
        attribution: None,
    })
}

/// Decode every prototype into the spectrum domain (second path, in bulk).
pub fn decode_prototypes(model: &PmnModel) -> Result<Vec<Vec<f64>>> {
    let protos = model.prototypes.matrix.clone();
    let decoded = model.ae.decode(&protos)?;
    let bins = decoded.shape()[1];
    Ok((0..model.prototypes.count)
        .map(|j| decoded.data()[j * bins..(j + 1) * bins].to_vec())
        .collect())
}

/// Third interpreting path: gradient-weighted activation mapping.
///
/// Target score is the predicted class's logit. Channel weights are the
/// position-averaged gradient of that logit with respect to the deepest
/// convolutional feature map; the map is the ReLU of the weighted channel
/// sum over the 4 positions, linearly interpolated to 1024 bins and
/// normalized to peak 1.
pub fn grad_cam(model: &PmnModel, sample: &[f64]) -> Result<AttributionMap> {
    let bins = model.ae.input_bins;
    if sample.len() != bins {
        return Err(PmnError::Dimension(format!(
            "sample has {} bins, expected {bins}",
            sample.len()
        )));
    }
    let x = Tensor::from_vec(&[1, bins], sample.to_vec())?;
    let (feature_map, z, fc_caches) = model.ae.encode_cached(&x)?;
    let cls = model.classify_latent(z.data())?;
    let target = cls.predicted;

    // d logit_target / d z through the matching layer: the logit is a
    // weighted sum of distances, so chain through each distance gradient.
    let q = model.prototypes.dim;
    let m = model.prototypes.count;
    let w = model.fc_weight.data();
    let mut dz = vec![0.0; q];
    for j in 0..m {
        let coeff = w[target * m + j];
        if coeff == 0.0 {
            continue;
        }
        let (da, _) = model.metric.distance_grads(z.data(), model.prototypes.row(j))?;
        for (slot, v) in dz.iter_mut().zip(&da) {
            *slot += coeff * v;
        }
    }
    let dz = Tensor::from_vec(&[1, q], dz)?;

    // Back through the encoder tail (frozen) to the feature map.
    let d_feature = model.ae.enc_fc.backward_input(dz, &fc_caches)?;
    let (ch, pos) = (feature_map.shape()[1], feature_map.shape()[2]);

    // Position-averaged channel weights, then the gated weighted sum.
    let gpos = pos as f64;
    let mut map = vec![0.0; pos];
    for c in 0..ch {
        let grad_row = &d_feature.data()[c * pos..(c + 1) * pos];
        let weight: f64 = grad_row.iter().sum::<f64>() / gpos;
        let act_row = &feature_map.data()[c * pos..(c + 1) * pos];
        for (slot, a) in map.iter_mut().zip(act_row) {
            *slot += weight * a;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));

    let scores = upsample_linear(&map, bins);
    let peak = scores.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        Ok(AttributionMap {
            scores: scores.iter().map(|v| v / peak).collect(),
            zero_map: false,
        })
    } else {
        Ok(AttributionMap {
            scores,
            zero_map: true,
        })
    }
}

/// Full explanation bundle: match readout plus attribution.
pub fn explain_full(model: &PmnModel, sample: &[f64], sample_id: usize) -> Result<Explanation> {
    let mut explanation = explain_match(model, sample, sample_id)?;
    explanation.attribution = Some(grad_cam(model, sample)?);
    Ok(explanation)
}

/// Linear interpolation from feature positions to input bins along the
/// encoder's geometry: position `t` has its receptive field centered at bin
/// `t * (out_len / knots)` (the cumulative stride), so the knots sit there
/// and the value is held constant past the last center.
fn upsample_linear(values: &[f64], out_len: usize) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![values[0]; out_len];
    }
    let stride = (out_len / n) as f64;
    (0..out_len)
        .map(|i| {
            let coord = (i as f64 / stride).clamp(0.0, (n - 1) as f64);
            let lo = coord.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = coord - lo as f64;
            values[lo] * (1.0 - t) + values[hi] * t
        })
        .collect()
}

/// Input bin a feature-map position is centered on: multiples of the
/// cumulative stride.
pub fn knot_bin(knot: usize, knots: usize, out_len: usize) -> usize {
    knot * (out_len / knots)
}
