//! Layers with explicit forward/backward rules.
//!
//! The layer set is fixed: `Conv1d`, `Deconv1d`, `BatchNorm1d`, `Linear`,
//! `ReLU`, `Flatten`, `Reshape`. Each forward call in training mode returns
//! the activation cache its backward pass needs; general computation-graph
//! autodiff is out of scope.
//!
//! Conventions:
//! - convolutional tensors are `[batch, channels, length]`, dense tensors
//!   `[batch, features]`, all row-major `f64`
//! - `Conv1d` output length is `(L + 2*pad - kernel) / stride + 1`
//! - `Deconv1d` output length is `(L - 1) * stride - 2*pad + kernel`
//! - parameters live at f32 precision (see [`Tensor::quantize_f32`]); all
//!   arithmetic is double precision

mod adam;
mod batchnorm;
mod conv;
mod linear;

pub use adam::Adam;
pub use batchnorm::{BatchNorm1d, BN_EPS, BN_MOMENTUM};
pub use conv::{Conv1d, Deconv1d};
pub use linear::Linear;

use crate::error::{PmnError, Result};
use crate::tensor::Tensor;

/// Whether a forward pass updates batch statistics (train) or consumes the
/// stored running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One network layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv1d(Conv1d),
    Deconv1d(Deconv1d),
    BatchNorm1d(BatchNorm1d),
    Linear(Linear),
    Relu,
    /// Collapse all trailing axes into one: `[N, C, L] -> [N, C*L]`.
    Flatten,
    /// Split the feature axis: `[N, ch*len] -> [N, ch, len]`.
    Reshape { ch: usize, len: usize },
}

/// Activations saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { input: Tensor },
    Deconv { input: Tensor },
    BatchNorm(batchnorm::BnCache),
    Linear { input: Tensor },
    Relu { mask: Vec<bool> },
    Shape { input_shape: Vec<usize> },
}

/// Mutable view of one named parameter and its gradient accumulator.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
}

impl Layer {
    /// Run the layer forward, returning the output and the cache backward
    /// needs. Training mode updates BatchNorm running statistics; every other
    /// layer behaves identically in both modes.
    pub fn forward(&mut self, input: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match (self, mode) {
            (Layer::BatchNorm1d(bn), Mode::Train) => bn.forward_train(input),
            (layer, _) => layer.forward_frozen(input),
        }
    }

    /// Forward without touching any layer state; usable concurrently on a
    /// frozen model. BatchNorm always consumes running statistics.
    pub fn forward_frozen(&self, input: Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv1d(conv) => conv.forward(input),
            Layer::Deconv1d(deconv) => deconv.forward(input),
            Layer::BatchNorm1d(bn) => bn.forward_eval(input),
            Layer::Linear(linear) => linear.forward(input),
            Layer::Relu => {
                let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
                let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
                Ok((out, Cache::Relu { mask }))
            }
            Layer::Flatten => {
                let shape = input.shape().to_vec();
                if shape.len() < 2 {
                    return Err(PmnError::Dimension(format!(
                        "flatten needs a batch axis, got {:?}",
                        shape
                    )));
                }
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                let out = input.reshaped(&[n, rest])?;
                Ok((out, Cache::Shape { input_shape: shape }))
            }
            Layer::Reshape { ch, len } => {
                let shape = input.shape().to_vec();
                if shape.len() != 2 || shape[1] != *ch * *len {
                    return Err(PmnError::Dimension(format!(
                        "reshape to [{}, {}] expects [N, {}], got {:?}",
                        ch,
                        len,
                        *ch * *len,
                        shape
                    )));
                }
                let out = input.reshaped(&[shape[0], *ch, *len])?;
                Ok((out, Cache::Shape { input_shape: shape }))
            }
        }
    }

    /// Propagate gradients, accumulating parameter gradients in the layer and
    /// returning the gradient with respect to the layer input.
    pub fn backward(&mut self, grad_out: &Tensor, cache: &Cache) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Conv1d(conv), Cache::Conv { input }) => conv.backward(grad_out, input, true),
            (Layer::Deconv1d(deconv), Cache::Deconv { input }) => {
                deconv.backward(grad_out, input, true)
            }
            (Layer::BatchNorm1d(bn), Cache::BatchNorm(c)) => bn.backward(grad_out, c, true),
            (Layer::Linear(linear), Cache::Linear { input }) => {
                linear.backward(grad_out, input, true)
            }
            (Layer::Relu, Cache::Relu { mask }) => backward_relu(grad_out, mask),
            (Layer::Flatten, Cache::Shape { input_shape })
            | (Layer::Reshape { .. }, Cache::Shape { input_shape }) => {
                grad_out.clone().reshaped(input_shape)
            }
            _ => Err(PmnError::Usage(
                "backward called with a cache from a different layer".into(),
            )),
        }
    }

    /// Like [`Layer::backward`] but skips parameter-gradient accumulation, so
    /// it works on a shared reference (used by attribution).
    pub fn backward_input(&self, grad_out: &Tensor, cache: &Cache) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Conv1d(conv), Cache::Conv { input }) => conv.backward_input(grad_out, input),
            (Layer::Deconv1d(deconv), Cache::Deconv { input }) => {
                deconv.backward_input(grad_out, input)
            }
            (Layer::BatchNorm1d(bn), Cache::BatchNorm(c)) => bn.backward_input(grad_out, c),
            (Layer::Linear(linear), Cache::Linear { .. }) => linear.backward_input(grad_out),
            (Layer::Relu, Cache::Relu { mask }) => backward_relu(grad_out, mask),
            (Layer::Flatten, Cache::Shape { input_shape })
            | (Layer::Reshape { .. }, Cache::Shape { input_shape }) => {
                grad_out.clone().reshaped(input_shape)
            }
            _ => Err(PmnError::Usage(
                "backward_input called with a cache from a different layer".into(),
            )),
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Layer::Conv1d(c) => c.zero_grads(),
            Layer::Deconv1d(d) => d.zero_grads(),
            Layer::BatchNorm1d(b) => b.zero_grads(),
            Layer::Linear(l) => l.zero_grads(),
            _ => {}
        }
    }

    /// Visit trainable parameters in a fixed order.
    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        match self {
            Layer::Conv1d(c) => c.visit_params(prefix, f),
            Layer::Deconv1d(d) => d.visit_params(prefix, f),
            Layer::BatchNorm1d(b) => b.visit_params(prefix, f),
            Layer::Linear(l) => l.visit_params(prefix, f),
            _ => {}
        }
    }

    /// Visit persistent tensors (parameters plus buffers such as BatchNorm
    /// running statistics) for serialization.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Layer::Conv1d(c) => c.visit_state(prefix, f),
            Layer::Deconv1d(d) => d.visit_state(prefix, f),
            Layer::BatchNorm1d(b) => b.visit_state(prefix, f),
            Layer::Linear(l) => l.visit_state(prefix, f),
            _ => {}
        }
    }

    /// Mutable counterpart of [`Layer::visit_state`] for deserialization.
    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Layer::Conv1d(c) => c.visit_state_mut(prefix, f),
            Layer::Deconv1d(d) => d.visit_state_mut(prefix, f),
            Layer::BatchNorm1d(b) => b.visit_state_mut(prefix, f),
            Layer::Linear(l) => l.visit_state_mut(prefix, f),
            _ => {}
        }
    }
}

fn backward_relu(grad_out: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if grad_out.len() != mask.len() {
        return Err(PmnError::Dimension(format!(
            "relu backward: gradient has {} elements, cache {}",
            grad_out.len(),
            mask.len()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// An ordered stack of layers applied in sequence.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Sequential {
        Sequential { layers }
    }

    /// Training-mode forward; returns the output and per-layer caches.
    pub fn forward_train(&mut self, input: Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(x, Mode::Train)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Evaluation-mode forward on a frozen stack; no state is touched.
    pub fn forward_eval(&self, input: Tensor) -> Result<Tensor> {
        let mut x = input;
        for layer in &self.layers {
            let (y, _) = layer.forward_frozen(x)?;
            x = y;
        }
        Ok(x)
    }

    /// Evaluation-mode forward that also returns caches (for attribution,
    /// which backpropagates through a frozen stack).
    pub fn forward_eval_cached(&self, input: Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let (y, cache) = layer.forward_frozen(x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backward through the whole stack, accumulating parameter gradients.
    pub fn backward(&mut self, grad_out: Tensor, caches: &[Cache]) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(PmnError::Usage(format!(
                "backward got {} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grad = grad_out;
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            grad = layer.backward(&grad, cache)?;
        }
        Ok(grad)
    }

    /// Input-gradient-only backward on a frozen stack.
    pub fn backward_input(&self, grad_out: Tensor, caches: &[Cache]) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(PmnError::Usage(format!(
                "backward_input got {} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grad = grad_out;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            grad = layer.backward_input(&grad, cache)?;
        }
        Ok(grad)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_state(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Fan-in-scaled uniform init used for convolution and linear weights:
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
pub(crate) fn fan_in_uniform(rng: &mut crate::rng::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    let mut t = Tensor::from_vec(shape, data).expect("init shape");
    t.quantize_f32();
    t
}
