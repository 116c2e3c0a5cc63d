//! Model assembly: encoder, decoder, and the prototype-matching classifier.
//!
//! The classifier measures the distance from an encoded feature to every
//! prototype (the matching layer), maps the distance vector through a fully
//! connected layer initialized to a negative one-hot pattern, and normalizes
//! with softmax. With squared-Euclidean distances and the negative-identity
//! weight the whole classifier is equivalent to a linear model over the
//! latent space ([`PmnModel::linear_equivalent_logits`]); the prediction is
//! then exactly "the class of the nearest prototype".
//!
//! An MLP-head baseline ([`AeMlpModel`]) shares the identical autoencoder
//! backbone so representation-quality comparisons are apples-to-apples.

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::nn::{BatchNorm1d, Cache, Conv1d, Deconv1d, Layer, Linear, ParamSlot, Sequential};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Input spectrum width (frequency bins).
pub const INPUT_BINS: usize = 1024;
/// Latent dimension produced by the encoder.
pub const LATENT_DIM: usize = 64;
/// Channels and length of the deepest convolutional feature map.
pub const FEATURE_CHANNELS: usize = 128;
pub const FEATURE_POSITIONS: usize = 4;

/// Distance metric used by the prototype-matching layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance (default, slightly ahead of the others).
    SqL2,
    L1,
    Cosine,
}

impl Metric {
    /// Distance between two equal-length vectors.
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(PmnError::Dimension(format!(
                "distance between vectors of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        match self {
            Metric::SqL2 => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
            Metric::L1 => Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()),
            Metric::Cosine => {
                let na = norm(a);
                let nb = norm(b);
                if na < 1e-12 || nb < 1e-12 {
                    return Err(PmnError::Domain(
                        "cosine distance undefined for (near-)zero vectors".into(),
                    ));
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                Ok(1.0 - dot / (na * nb))
            }
        }
    }

    /// Gradients of the distance with respect to both arguments.
    pub fn distance_grads(self, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Metric::SqL2 => {
                let da: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                Ok((da, db))
            }
            Metric::L1 => {
                // Subgradient: sign(0) = 0.
                let da: Vec<f64> = a.iter().zip(b).map(|(x, y)| sign(x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                Ok((da, db))
            }
            Metric::Cosine => {
                let na = norm(a);
                let nb = norm(b);
                if na < 1e-12 || nb < 1e-12 {
                    return Err(PmnError::Domain(
                        "cosine distance undefined for (near-)zero vectors".into(),
                    ));
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let cos = dot / (na * nb);
                let da = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| -(y / (na * nb)) + cos * x / (na * na))
                    .collect();
                let db = b
                    .iter()
                    .zip(a)
                    .map(|(y, x)| -(x / (na * nb)) + cos * y / (nb * nb))
                    .collect();
                Ok((da, db))
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Trainable feature-level prototype vectors, one row per prototype.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub count: usize,
    pub dim: usize,
    pub matrix: Tensor,
    pub grad: Tensor,
}

impl PrototypeSet {
    /// Initialize prototypes i.i.d. Gaussian with mean 0 and std 0.1.
    pub fn new(count: usize, dim: usize, rng: &mut Rng) -> PrototypeSet {
        let data = (0..count * dim).map(|_| 0.1 * rng.gaussian()).collect();
        let mut matrix = Tensor::from_vec(&[count, dim], data).expect("prototype shape");
        matrix.quantize_f32();
        PrototypeSet {
            count,
            dim,
            matrix,
            grad: Tensor::zeros(&[count, dim]),
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.matrix.data()[j * self.dim..(j + 1) * self.dim]
    }
}

/// Distance vector of one latent against every prototype (the matching layer).
pub fn pm_layer(z: &[f64], prototypes: &PrototypeSet, metric: Metric) -> Result<Vec<f64>> {
    (0..prototypes.count)
        .map(|j| metric.distance(z, prototypes.row(j)))
        .collect()
}

/// Initial classifier weight: `W[i][j] = -1` when `j mod K == i`, else 0
/// (zero-based; the negative identity when `m == K`), so each prototype is
/// tied to one class and smaller distance means larger logit.
pub fn init_fc_weight(class_count: usize, prototype_count: usize) -> Result<Tensor> {
    if prototype_count < class_count {
        return Err(PmnError::Config(format!(
            "need at least one prototype per class: m={prototype_count} < K={class_count}"
        )));
    }
    let mut w = Tensor::zeros(&[class_count, prototype_count]);
    for j in 0..prototype_count {
        w.set(&[j % class_count, j], -1.0);
    }
    Ok(w)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Shared convolutional autoencoder backbone.
///
/// Encoder: five Conv-BN-ReLU blocks (1x1024 -> 8x512 -> 16x256 -> 32x64 ->
/// 64x16 -> 128x4), flatten, then Linear(512->128)-ReLU-Linear(128->64).
/// Decoder mirrors it back to a length-1024 vector with five transposed
/// convolutions; the final block has no BN/ReLU so reconstructions are
/// unconstrained.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub enc_conv: Sequential,
    pub enc_fc: Sequential,
    pub dec_fc: Sequential,
    pub dec_conv: Sequential,
    /// Spectrum width this autoencoder consumes and reproduces.
    pub input_bins: usize,
}

/// Caches from a training-mode autoencoder pass.
pub struct AeForward {
    /// Deepest convolutional feature map `[N, 128, 4]` (after ReLU).
    pub feature_map: Tensor,
    /// Latent code `[N, 64]`.
    pub z: Tensor,
    /// Reconstruction `[N, 1024]`.
    pub x_hat: Tensor,
    enc_conv_caches: Vec<Cache>,
    enc_fc_caches: Vec<Cache>,
    dec_fc_caches: Vec<Cache>,
    dec_conv_caches: Vec<Cache>,
}

impl Autoencoder {
    pub fn build(rng: &mut Rng) -> Autoencoder {
        let enc_conv = Sequential::new(vec![
            Layer::Conv1d(Conv1d::new(1, 8, 9, 2, 4, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(8)),
            Layer::Relu,
            Layer::Conv1d(Conv1d::new(8, 16, 9, 2, 4, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(16)),
            Layer::Relu,
            Layer::Conv1d(Conv1d::new(16, 32, 11, 4, 5, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(32)),
            Layer::Relu,
            Layer::Conv1d(Conv1d::new(32, 64, 11, 4, 5, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(64)),
            Layer::Relu,
            Layer::Conv1d(Conv1d::new(64, 128, 11, 4, 5, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(128)),
            Layer::Relu,
        ]);
        let enc_fc = Sequential::new(vec![
            Layer::Flatten,
            Layer::Linear(Linear::new(512, 128, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(128, LATENT_DIM, rng)),
        ]);
        let dec_fc = Sequential::new(vec![
            Layer::Linear(Linear::new(LATENT_DIM, 128, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(128, 512, rng)),
            Layer::Reshape { ch: 128, len: 4 },
        ]);
        let dec_conv = Sequential::new(vec![
            Layer::Deconv1d(Deconv1d::new(128, 64, 10, 4, 3, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(64)),
            Layer::Relu,
            Layer::Deconv1d(Deconv1d::new(64, 32, 10, 4, 3, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(32)),
            Layer::Relu,
            Layer::Deconv1d(Deconv1d::new(32, 16, 10, 4, 3, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(16)),
            Layer::Relu,
            Layer::Deconv1d(Deconv1d::new(16, 8, 8, 2, 3, rng)),
            Layer::BatchNorm1d(BatchNorm1d::new(8)),
            Layer::Relu,
            Layer::Deconv1d(Deconv1d::new(8, 1, 8, 2, 3, rng)),
            Layer::Flatten,
        ]);
        Autoencoder {
            enc_conv,
            enc_fc,
            dec_fc,
            dec_conv,
            input_bins: INPUT_BINS,
        }
    }

    fn to_conv_input(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_bins {
            return Err(PmnError::Dimension(format!(
                "expected spectra [N, {}], got {shape:?}",
                self.input_bins
            )));
        }
        x.clone().reshaped(&[shape[0], 1, self.input_bins])
    }

    /// Training-mode pass through encoder and decoder with caches.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<AeForward> {
        let x3 = self.to_conv_input(x)?;
        let (feature_map, enc_conv_caches) = self.enc_conv.forward_train(x3)?;
        let (z, enc_fc_caches) = self.enc_fc.forward_train(feature_map.clone())?;
        let (dec_mid, dec_fc_caches) = self.dec_fc.forward_train(z.clone())?;
        let (x_hat, dec_conv_caches) = self.dec_conv.forward_train(dec_mid)?;
        Ok(AeForward {
            feature_map,
            z,
            x_hat,
            enc_conv_caches,
            enc_fc_caches,
            dec_fc_caches,
            dec_conv_caches,
        })
    }

    /// Backward through decoder and encoder. `dz` is the latent gradient from
    /// the classifier/regularizers; `dx_hat` the reconstruction gradient.
    pub fn backward(&mut self, fwd: &AeForward, dz: Tensor, dx_hat: Tensor) -> Result<()> {
        let d_dec_mid = self.dec_conv.backward(dx_hat, &fwd.dec_conv_caches)?;
        let dz_from_dec = self.dec_fc.backward(d_dec_mid, &fwd.dec_fc_caches)?;
        let mut dz_total = dz;
        dz_total.add_scaled(&dz_from_dec, 1.0);
        let d_feature = self.enc_fc.backward(dz_total, &fwd.enc_fc_caches)?;
        self.enc_conv.backward(d_feature, &fwd.enc_conv_caches)?;
        Ok(())
    }

    /// Frozen encoder: spectra `[N, 1024]` to latents `[N, 64]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let x3 = self.to_conv_input(x)?;
        let a = self.enc_conv.forward_eval(x3)?;
        self.enc_fc.forward_eval(a)
    }

    /// Frozen encoder keeping the deepest feature map and tail caches
    /// (attribution needs to backpropagate a logit to the feature map).
    pub fn encode_cached(&self, x: &Tensor) -> Result<(Tensor, Tensor, Vec<Cache>)> {
        let x3 = self.to_conv_input(x)?;
        let a = self.enc_conv.forward_eval(x3)?;
        let (z, fc_caches) = self.enc_fc.forward_eval_cached(a.clone())?;
        Ok((a, z, fc_caches))
    }

    /// Frozen decoder: latents `[N, 64]` to spectra `[N, 1024]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mid = self.dec_fc.forward_eval(z.clone())?;
        self.dec_conv.forward_eval(mid)
    }

    pub fn zero_grads(&mut self) {
        self.enc_conv.zero_grads();
        self.enc_fc.zero_grads();
        self.dec_fc.zero_grads();
        self.dec_conv.zero_grads();
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.enc_conv.visit_params("enc_conv", f);
        self.enc_fc.visit_params("enc_fc", f);
        self.dec_fc.visit_params("dec_fc", f);
        self.dec_conv.visit_params("dec_conv", f);
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.enc_conv.visit_state("enc_conv", f);
        self.enc_fc.visit_state("enc_fc", f);
        self.dec_fc.visit_state("dec_fc", f);
        self.dec_conv.visit_state("dec_conv", f);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.enc_conv.visit_state_mut("enc_conv", f);
        self.enc_fc.visit_state_mut("enc_fc", f);
        self.dec_fc.visit_state_mut("dec_fc", f);
        self.dec_conv.visit_state_mut("dec_conv", f);
    }
}

/// Everything [`PmnModel::classify`] returns: probabilities, raw logits, and
/// the per-prototype distance vector feeding them.
#[derive(Debug, Clone)]
pub struct Classification {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    pub distances: Vec<f64>,
    pub predicted: usize,
}

/// Autoencoder plus prototype-matching classifier.
#[derive(Debug, Clone)]
pub struct PmnModel {
    pub ae: Autoencoder,
    pub prototypes: PrototypeSet,
    /// Classifier weight `[K, m]`, trainable after its one-hot-style init.
    pub fc_weight: Tensor,
    pub fc_wgrad: Tensor,
    pub metric: Metric,
    pub class_count: usize,
}

impl PmnModel {
    /// Build a model with `m` prototypes for `K` classes (defaults to one per
    /// class when `prototype_count` is `None`).
    pub fn new(
        class_count: usize,
        prototype_count: Option<usize>,
        metric: Metric,
        rng: &mut Rng,
    ) -> Result<PmnModel> {
        let m = prototype_count.unwrap_or(class_count);
        let fc_weight = init_fc_weight(class_count, m)?;
        let ae = Autoencoder::build(rng);
        let prototypes = PrototypeSet::new(m, LATENT_DIM, rng);
        Ok(PmnModel {
            ae,
            prototypes,
            fc_weight,
            fc_wgrad: Tensor::zeros(&[class_count, m]),
            metric,
            class_count,
        })
    }

    /// Fault class a prototype is tied to under the init pattern of the
    /// classifier weight.
    pub fn prototype_class(&self, j: usize) -> usize {
        j % self.class_count
    }

    /// Logits for one distance vector: `v = W p(z)`.
    pub fn logits_from_distances(&self, distances: &[f64]) -> Vec<f64> {
        let w = self.fc_weight.data();
        let m = self.prototypes.count;
        (0..self.class_count)
            .map(|k| {
                w[k * m..(k + 1) * m]
                    .iter()
                    .zip(distances)
                    .map(|(wv, dv)| wv * dv)
                    .sum()
            })
            .collect()
    }

    fn validate_sample(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.ae.input_bins {
            return Err(PmnError::Dimension(format!(
                "sample has {} bins, expected {}",
                x.len(),
                self.ae.input_bins
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(PmnError::Data("sample contains non-finite values".into()));
        }
        Ok(())
    }

    /// Classify one spectrum: probabilities, logits, and distances.
    pub fn classify(&self, x: &[f64]) -> Result<Classification> {
        self.validate_sample(x)?;
        let xt = Tensor::from_vec(&[1, self.ae.input_bins], x.to_vec())?;
        let z = self.ae.encode(&xt)?;
        if !z.all_finite() {
            return Err(PmnError::Numerical(
                "encoder produced a non-finite latent (check weights after the \
                 last training step)"
                    .into(),
            ));
        }
        self.classify_latent(z.data())
    }

    /// Classifier head only, from an already-encoded latent.
    pub fn classify_latent(&self, z: &[f64]) -> Result<Classification> {
        let distances = pm_layer(z, &self.prototypes, self.metric)?;
        let logits = self.logits_from_distances(&distances);
        let probabilities = softmax(&logits);
        let predicted = argmax(&probabilities);
        Ok(Classification {
            probabilities,
            logits,
            distances,
            predicted,
        })
    }

    /// Decode the autoencoder's reconstruction of one spectrum.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate_sample(x)?;
        let xt = Tensor::from_vec(&[1, self.ae.input_bins], x.to_vec())?;
        let z = self.ae.encode(&xt)?;
        Ok(self.ae.decode(&z)?.data().to_vec())
    }

    /// Expanded linear form of the squared-L2 matching classifier:
    /// `v'_k = 2 p_k^T z - p_k^T p_k`. Differs from the matching-layer logits
    /// only by a class-independent `-||z||^2`, so softmax outputs are equal.
    /// Requires the exact configuration the identity is derived for.
    pub fn linear_equivalent_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.metric != Metric::SqL2 {
            return Err(PmnError::Config(
                "linear equivalence requires the squared-L2 metric".into(),
            ));
        }
        let m = self.prototypes.count;
        if m != self.class_count || !self.fc_weight_is_negative_identity() {
            return Err(PmnError::Config(
                "linear equivalence requires W = -I (m = K, untouched init)".into(),
            ));
        }
        Ok((0..self.class_count)
            .map(|k| {
                let p = self.prototypes.row(k);
                let dot: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
                let pp: f64 = p.iter().map(|a| a * a).sum();
                2.0 * dot - pp
            })
            .collect())
    }

    fn fc_weight_is_negative_identity(&self) -> bool {
        let m = self.prototypes.count;
        self.fc_weight.data().iter().enumerate().all(|(idx, &v)| {
            let (i, j) = (idx / m, idx % m);
            v == if i == j { -1.0 } else { 0.0 }
        })
    }

    pub fn zero_grads(&mut self) {
        self.ae.zero_grads();
        self.prototypes.grad.fill(0.0);
        self.fc_wgrad.fill(0.0);
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.ae.visit_params(f);
        f(ParamSlot {
            name: "classifier.prototypes".into(),
            value: &mut self.prototypes.matrix,
            grad: &mut self.prototypes.grad,
        });
        f(ParamSlot {
            name: "classifier.weight".into(),
            value: &mut self.fc_weight,
            grad: &mut self.fc_wgrad,
        });
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.ae.visit_state(f);
        f("classifier.prototypes".into(), &self.prototypes.matrix);
        f("classifier.weight".into(), &self.fc_weight);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ae.visit_state_mut(f);
        f("classifier.prototypes".into(), &mut self.prototypes.matrix);
        f("classifier.weight".into(), &mut self.fc_weight);
    }
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

/// Baseline sharing the autoencoder but classifying with a small MLP
/// (Linear(64->32)-ReLU-Linear(32->K)) instead of prototype matching.
#[derive(Debug, Clone)]
pub struct AeMlpModel {
    pub ae: Autoencoder,
    pub head: Sequential,
    pub class_count: usize,
}

impl AeMlpModel {
    pub fn new(class_count: usize, rng: &mut Rng) -> AeMlpModel {
        let ae = Autoencoder::build(rng);
        let head = Sequential::new(vec![
            Layer::Linear(Linear::new(LATENT_DIM, 32, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(32, class_count, rng)),
        ]);
        AeMlpModel {
            ae,
            head,
            class_count,
        }
    }

    pub fn zero_grads(&mut self) {
        self.ae.zero_grads();
        self.head.zero_grads();
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.ae.visit_params(f);
        self.head.visit_params("head", f);
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.ae.visit_state(f);
        self.head.visit_state("head", f);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ae.visit_state_mut(f);
        self.head.visit_state_mut("head", f);
    }
}

/// Either model variant behind one training/evaluation surface.
#[derive(Debug, Clone)]
pub enum Model {
    Pmn(PmnModel),
    AeMlp(AeMlpModel),
}

impl Model {
    pub fn class_count(&self) -> usize {
        match self {
            Model::Pmn(m) => m.class_count,
            Model::AeMlp(m) => m.class_count,
        }
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        match self {
            Model::Pmn(m) => &m.ae,
            Model::AeMlp(m) => &m.ae,
        }
    }

    pub fn prototype_count(&self) -> usize {
        match self {
            Model::Pmn(m) => m.prototypes.count,
            Model::AeMlp(_) => 0,
        }
    }

    /// Latent features for a batch of spectra `[N, 1024] -> [N, 64]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.autoencoder().encode(x)
    }

    /// Class probabilities for a batch `[N, 1024] -> [N, K]`.
    pub fn probs_batch(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_batch(x)?;
        self.probs_from_latents(&z)
    }

    /// Class probabilities from already-encoded latents `[N, 64] -> [N, K]`.
    pub fn probs_from_latents(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.shape()[0];
        let q = z.shape()[1];
        let k = self.class_count();
        match self {
            Model::Pmn(m) => {
                let mut out = Tensor::zeros(&[n, k]);
                for s in 0..n {
                    let zs = &z.data()[s * q..(s + 1) * q];
                    let cls = m.classify_latent(zs)?;
                    out.data_mut()[s * k..(s + 1) * k].copy_from_slice(&cls.probabilities);
                }
                Ok(out)
            }
            Model::AeMlp(m) => {
                let logits = m.head.forward_eval(z.clone())?;
                let mut out = Tensor::zeros(&[n, k]);
                for s in 0..n {
                    let row = softmax(&logits.data()[s * k..(s + 1) * k]);
                    out.data_mut()[s * k..(s + 1) * k].copy_from_slice(&row);
                }
                Ok(out)
            }
        }
    }

    /// Most likely class per row of a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.probs_batch(x)?;
        let k = self.class_count();
        Ok((0..probs.shape()[0])
            .map(|s| argmax(&probs.data()[s * k..(s + 1) * k]))
            .collect())
    }

    pub fn zero_grads(&mut self) {
        match self {
            Model::Pmn(m) => m.zero_grads(),
            Model::AeMlp(m) => m.zero_grads(),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        match self {
            Model::Pmn(m) => m.visit_params(f),
            Model::AeMlp(m) => m.visit_params(f),
        }
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Model::Pmn(m) => m.visit_state(f),
            Model::AeMlp(m) => m.visit_state(f),
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Model::Pmn(m) => m.visit_state_mut(f),
            Model::AeMlp(m) => m.visit_state_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::argmin;

    fn unit_model(metric: Metric) -> PmnModel {
        let mut rng = Rng::new(17);
        PmnModel::new(4, None, metric, &mut rng).unwrap()
    }

    // ── Distances ──────────────────────────────────────────────────────────

    #[test]
    fn distance_examples() {
        let z = [1.0, 2.0, 3.0];
        assert_eq!(Metric::SqL2.distance(&z, &z).unwrap(), 0.0);
        assert_eq!(
            Metric::SqL2.distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            25.0
        );
        assert!((Metric::Cosine.distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(Metric::L1.distance(&[0.0, 0.0], &[3.0, -4.0]).unwrap(), 7.0);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let err = Metric::Cosine
            .distance(&[0.0, 0.0], &[1.0, 0.0])
            .unwrap_err();
        assert!(matches!(err, PmnError::Domain(_)));
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        use crate::gradcheck::{central_diff, rel_error};
        let mut rng = Rng::new(23);
        for metric in [Metric::SqL2, Metric::L1, Metric::Cosine] {
            let a: Vec<f64> = (0..5).map(|_| rng.gaussian() + 2.0).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gaussian() - 2.0).collect();
            let (da, db) = metric.distance_grads(&a, &b).unwrap();
            for i in 0..5 {
                let mut probe = a.clone();
                let fd = central_diff(
                    |v| {
                        probe[i] = v;
                        metric.distance(&probe, &b).unwrap()
                    },
                    a[i],
                    1e-6,
                );
                assert!(rel_error(da[i], fd, 1e-8) < 1e-6, "{metric:?} da[{i}]");
                let mut probe = b.clone();
                let fd = central_diff(
                    |v| {
                        probe[i] = v;
                        metric.distance(&a, &probe).unwrap()
                    },
                    b[i],
                    1e-6,
                );
                assert!(rel_error(db[i], fd, 1e-8) < 1e-6, "{metric:?} db[{i}]");
            }
        }
    }

    // ── Matching layer ─────────────────────────────────────────────────────

    #[test]
    fn pm_layer_zero_at_matching_prototype() {
        let mut rng = Rng::new(1);
        let protos = PrototypeSet::new(4, 3, &mut rng);
        let z = protos.row(2).to_vec();
        let d = pm_layer(&z, &protos, Metric::SqL2).unwrap();
        assert_eq!(d[2], 0.0);
        assert!(d.iter().enumerate().all(|(j, &v)| j == 2 || v > 0.0));
    }

    #[test]
    fn pm_layer_hand_example() {
        let mut protos = PrototypeSet::new(2, 2, &mut Rng::new(0));
        protos.matrix = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let d = pm_layer(&[0.0, 0.0], &protos, Metric::SqL2).unwrap();
        assert_eq!(d, vec![1.0, 4.0]);
    }

    #[test]
    fn pm_layer_permutation_equivariant() {
        let mut rng = Rng::new(5);
        let mut protos = PrototypeSet::new(3, 4, &mut rng);
        let z: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let d = pm_layer(&z, &protos, Metric::SqL2).unwrap();
        // Swap prototype rows 0 and 2.
        let mut m = protos.matrix.data().to_vec();
        for i in 0..4 {
            m.swap(i, 2 * 4 + i);
        }
        protos.matrix = Tensor::from_vec(&[3, 4], m).unwrap();
        let d_swapped = pm_layer(&z, &protos, Metric::SqL2).unwrap();
        assert_eq!(d_swapped, vec![d[2], d[1], d[0]]);
    }

    // ── Classifier weight init ─────────────────────────────────────────────

    #[test]
    fn fc_weight_is_negative_identity_when_m_equals_k() {
        let w = init_fc_weight(3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w.get(&[i, j]), if i == j { -1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn fc_weight_tiles_classes_when_m_exceeds_k() {
        let w = init_fc_weight(2, 4).unwrap();
        assert_eq!(w.data(), &[-1.0, 0.0, -1.0, 0.0, 0.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn fc_weight_every_column_has_one_negative_entry() {
        for (k, m) in [(2, 5), (3, 7), (4, 4), (5, 11)] {
            let w = init_fc_weight(k, m).unwrap();
            for j in 0..m {
                let col: Vec<f64> = (0..k).map(|i| w.get(&[i, j])).collect();
                assert_eq!(col.iter().filter(|&&v| v == -1.0).count(), 1);
                assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), k - 1);
            }
        }
    }

    #[test]
    fn fc_weight_rejects_m_below_k() {
        assert!(matches!(
            init_fc_weight(4, 3).unwrap_err(),
            PmnError::Config(_)
        ));
    }

    // ── Classification ─────────────────────────────────────────────────────

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&[0.7, 0.7, 0.7, 0.7]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_example() {
        let p = softmax(&[0.0, 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn classify_probabilities_normalized_and_consistent_with_argmin() {
        let model = unit_model(Metric::SqL2);
        let mut rng = Rng::new(77);
        for _ in 0..5 {
            let x: Vec<f64> = (0..INPUT_BINS).map(|_| rng.uniform()).collect();
            let cls = model.classify(&x).unwrap();
            let total: f64 = cls.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(cls.probabilities.iter().all(|&p| (0.0..=1.0).contains(&p)));
            // With W = -I and squared L2, prediction = nearest prototype.
            assert_eq!(cls.predicted, argmin(&cls.distances));
        }
    }

    #[test]
    fn reconstruct_contract() {
        let model = unit_model(Metric::SqL2);
        let mut rng = Rng::new(78);
        let x: Vec<f64> = (0..INPUT_BINS).map(|_| rng.uniform()).collect();
        let r1 = model.reconstruct(&x).unwrap();
        let r2 = model.reconstruct(&x).unwrap();
        assert_eq!(r1.len(), INPUT_BINS);
        assert!(r1.iter().all(|v| v.is_finite()));
        assert_eq!(r1, r2);
    }

    // ── Linear equivalence ─────────────────────────────────────────────────

    #[test]
    fn linear_form_matches_matching_layer_probabilities() {
        let model = unit_model(Metric::SqL2);
        let mut rng = Rng::new(79);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let z: Vec<f64> = (0..LATENT_DIM).map(|_| rng.gaussian()).collect();
            let direct = model.classify_latent(&z).unwrap().probabilities;
            let linear = softmax(&model.linear_equivalent_logits(&z).unwrap());
            for (a, b) in direct.iter().zip(&linear) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-9, "max probability deviation {worst}");
    }

    #[test]
    fn latent_at_prototype_wins_its_class() {
        let model = unit_model(Metric::SqL2);
        for k in 0..4 {
            let z = model.prototypes.row(k).to_vec();
            let cls = model.classify_latent(&z).unwrap();
            assert_eq!(cls.predicted, k);
            let best = cls.probabilities[k];
            assert!(cls
                .probabilities
                .iter()
                .enumerate()
                .all(|(i, &p)| i == k || p < best));
        }
    }

    #[test]
    fn probabilities_invariant_under_joint_rotation() {
        // Rotate latents and prototypes by the same orthogonal map; squared-L2
        // distances, hence probabilities, are unchanged.
        let mut model = unit_model(Metric::SqL2);
        let mut rng = Rng::new(80);
        let z: Vec<f64> = (0..LATENT_DIM).map(|_| rng.gaussian()).collect();
        let before = model.classify_latent(&z).unwrap().probabilities;

        // Givens rotation on coordinates (3, 10) by 0.7 rad.
        let (a, b, theta) = (3, 10, 0.7f64);
        let rotate = |v: &mut [f64]| {
            let (c, s) = (theta.cos(), theta.sin());
            let (va, vb) = (v[a], v[b]);
            v[a] = c * va - s * vb;
            v[b] = s * va + c * vb;
        };
        let mut z_rot = z.clone();
        rotate(&mut z_rot);
        let mut protos = model.prototypes.matrix.data().to_vec();
        for j in 0..model.prototypes.count {
            rotate(&mut protos[j * LATENT_DIM..(j + 1) * LATENT_DIM]);
        }
        model.prototypes.matrix =
            Tensor::from_vec(&[model.prototypes.count, LATENT_DIM], protos).unwrap();

        let after = model.classify_latent(&z_rot).unwrap().probabilities;
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_form_requires_the_derivation_configuration() {
        let model = unit_model(Metric::L1);
        let z = vec![0.0; LATENT_DIM];
        assert!(matches!(
            model.linear_equivalent_logits(&z).unwrap_err(),
            PmnError::Config(_)
        ));

        let mut model = unit_model(Metric::SqL2);
        model.fc_weight.data_mut()[1] = 0.5; // not -I anymore
        assert!(matches!(
            model.linear_equivalent_logits(&z).unwrap_err(),
            PmnError::Config(_)
        ));
    }

    // ── Table geometry ─────────────────────────────────────────────────────

    #[test]
    fn encoder_decoder_classifier_shapes_match_the_architecture_table() {
        let mut rng = Rng::new(2);
        let mut model = PmnModel::new(4, None, Metric::SqL2, &mut rng).unwrap();
        let x = Tensor::from_vec(
            &[2, INPUT_BINS],
            (0..2 * INPUT_BINS).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();

        // Encoder conv blocks end after layer indices 2, 5, 8, 11, 14.
        let expected_enc: [(usize, &[usize]); 5] = [
            (2, &[2, 8, 512]),
            (5, &[2, 16, 256]),
            (8, &[2, 32, 64]),
            (11, &[2, 64, 16]),
            (14, &[2, 128, 4]),
        ];
        let x3 = x.clone().reshaped(&[2, 1, INPUT_BINS]).unwrap();
        let mut cur = x3;
        for (i, layer) in model.ae.enc_conv.layers.iter_mut().enumerate() {
            let (y, _) = layer.forward(cur, crate::nn::Mode::Train).unwrap();
            cur = y;
            if let Some((_, shape)) = expected_enc.iter().find(|(idx, _)| *idx == i) {
                assert_eq!(cur.shape(), *shape, "encoder block ending at layer {i}");
            }
        }
        let (z, _) = model.ae.enc_fc.forward_train(cur).unwrap();
        assert_eq!(z.shape(), &[2, 64]);

        // Decoder: fc block restores [N, 128, 4], deconv blocks walk back up.
        let (mid, _) = model.ae.dec_fc.forward_train(z.clone()).unwrap();
        assert_eq!(mid.shape(), &[2, 128, 4]);
        let expected_dec: [(usize, &[usize]); 5] = [
            (2, &[2, 64, 16]),
            (5, &[2, 32, 64]),
            (8, &[2, 16, 256]),
            (11, &[2, 8, 512]),
            (13, &[2, 1024]),
        ];
        let mut cur = mid;
        for (i, layer) in model.ae.dec_conv.layers.iter_mut().enumerate() {
            let (y, _) = layer.forward(cur, crate::nn::Mode::Train).unwrap();
            cur = y;
            if let Some((_, shape)) = expected_dec.iter().find(|(idx, _)| *idx == i) {
                assert_eq!(cur.shape(), *shape, "decoder block ending at layer {i}");
            }
        }

        // Classifier: distances in R^m, logits and probabilities in R^K.
        let cls = model.classify(&x.data()[..INPUT_BINS]).unwrap();
        assert_eq!(cls.distances.len(), 4);
        assert_eq!(cls.logits.len(), 4);
        assert_eq!(cls.probabilities.len(), 4);
    }
}
