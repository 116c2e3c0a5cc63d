//! Batch normalization over `[N, C, L]` activations.
//!
//! Normalization uses per-channel biased (population) statistics over the
//! `N x L` slots of each channel. Running statistics are updated only in
//! training mode with momentum 0.1:
//! `running = (1 - momentum) * running + momentum * batch_stat`.
//! Before any training step the running statistics are their initial values
//! (mean 0, variance 1), so eval-mode forward is well-defined on a fresh
//! layer.

use rayon::prelude::*;

use super::{Cache, ParamSlot};
use crate::error::{PmnError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub ch: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub ggrad: Tensor,
    pub bgrad: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

/// Forward activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized input before the affine transform.
    x_hat: Tensor,
    /// Per-channel 1/sqrt(var + eps) actually used by the forward pass.
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm1d {
    pub fn new(ch: usize) -> BatchNorm1d {
        BatchNorm1d {
            ch,
            gamma: Tensor::filled(&[ch], 1.0),
            beta: Tensor::zeros(&[ch]),
            ggrad: Tensor::zeros(&[ch]),
            bgrad: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::filled(&[ch], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    fn expect_shape(&self, input: &Tensor, what: &str) -> Result<(usize, usize)> {
        let shape = input.shape();
        if shape.len() != 3 || shape[1] != self.ch {
            return Err(PmnError::Dimension(format!(
                "{what} expects [N, {}, L], got {:?}",
                self.ch, shape
            )));
        }
        Ok((shape[0], shape[2]))
    }

    /// Training-mode forward: normalize by batch statistics and update the
    /// running statistics.
    pub fn forward_train(&mut self, input: Tensor) -> Result<(Tensor, Cache)> {
        let (n, l) = self.expect_shape(&input, "BatchNorm1d")?;
        let slots = (n * l) as f64;
        let x = input.data();

        let mut mean = vec![0.0; self.ch];
        let mut var = vec![0.0; self.ch];
        for c in 0..self.ch {
            let mut sum = 0.0;
            for s in 0..n {
                let row = &x[(s * self.ch + c) * l..(s * self.ch + c + 1) * l];
                sum += row.iter().sum::<f64>();
            }
            let m = sum / slots;
            let mut sq = 0.0;
            for s in 0..n {
                let row = &x[(s * self.ch + c) * l..(s * self.ch + c + 1) * l];
                sq += row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / slots;
        }

        for c in 0..self.ch {
            let rm = self.running_mean.data_mut();
            rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
            let rv = self.running_var.data_mut();
            rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c];
        }
        self.running_mean.quantize_f32();
        self.running_var.quantize_f32();

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        self.normalized_output(input, &mean, &inv_std, true)
    }

    /// Eval-mode forward using the running statistics; no state mutated.
    pub fn forward_eval(&self, input: Tensor) -> Result<(Tensor, Cache)> {
        self.expect_shape(&input, "BatchNorm1d")?;
        let mean = self.running_mean.data().to_vec();
        let inv_std: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect();
        self.normalized_output(input, &mean, &inv_std, false)
    }

    fn normalized_output(
        &self,
        input: Tensor,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<(Tensor, Cache)> {
        let shape = input.shape().to_vec();
        let (ch, l) = (self.ch, shape[2]);
        let gamma = self.gamma.data();
        let beta = self.beta.data();

        let mut x_hat = input; // consumed; normalized in place
        let mut out = Tensor::zeros(&shape);
        x_hat
            .data_mut()
            .par_chunks_mut(ch * l)
            .zip(out.data_mut().par_chunks_mut(ch * l))
            .for_each(|(xh, y)| {
                for c in 0..ch {
                    let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
                    for (xv, yv) in xh[c * l..(c + 1) * l]
                        .iter_mut()
                        .zip(&mut y[c * l..(c + 1) * l])
                    {
                        *xv = (*xv - m) * is;
                        *yv = g * *xv + b;
                    }
                }
            });
        Ok((
            out,
            Cache::BatchNorm(BnCache {
                x_hat,
                inv_std: inv_std.to_vec(),
                train,
            }),
        ))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        cache: &BnCache,
        param_grads: bool,
    ) -> Result<Tensor> {
        let (dx, sum_dy, sum_dy_xhat) = self.grads_core(grad_out, cache)?;
        if param_grads {
            for c in 0..self.ch {
                self.ggrad.data_mut()[c] += sum_dy_xhat[c];
                self.bgrad.data_mut()[c] += sum_dy[c];
            }
        }
        Ok(dx)
    }

    pub fn backward_input(&self, grad_out: &Tensor, cache: &BnCache) -> Result<Tensor> {
        self.grads_core(grad_out, cache).map(|(dx, _, _)| dx)
    }

    #[allow(clippy::type_complexity)]
    fn grads_core(
        &self,
        grad_out: &Tensor,
        cache: &BnCache,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, l) = self.expect_shape(grad_out, "BatchNorm1d upstream gradient")?;
        if grad_out.shape() != cache.x_hat.shape() {
            return Err(PmnError::Usage(
                "BatchNorm1d backward got a cache for a different batch shape".into(),
            ));
        }
        let ch = self.ch;
        let slots = (n * l) as f64;
        let dy = grad_out.data();
        let xh = cache.x_hat.data();

        // Per-channel reductions used by both parameter and input gradients.
        let mut sum_dy = vec![0.0; ch];
        let mut sum_dy_xhat = vec![0.0; ch];
        for s in 0..n {
            for c in 0..ch {
                let at = (s * ch + c) * l;
                for i in 0..l {
                    sum_dy[c] += dy[at + i];
                    sum_dy_xhat[c] += dy[at + i] * xh[at + i];
                }
            }
        }
        let gamma = self.gamma.data();
        let inv_std = &cache.inv_std;
        let mut dx = Tensor::zeros(grad_out.shape());
        if cache.train {
            dx.data_mut()
                .par_chunks_mut(ch * l)
                .enumerate()
                .for_each(|(s, dxs)| {
                    for c in 0..ch {
                        let scale = gamma[c] * inv_std[c] / slots;
                        let at = (s * ch + c) * l;
                        for i in 0..l {
                            dxs[c * l + i] = scale
                                * (slots * dy[at + i] - sum_dy[c] - xh[at + i] * sum_dy_xhat[c]);
                        }
                    }
                });
        } else {
            // Running statistics are constants in eval mode.
            dx.data_mut()
                .par_chunks_mut(ch * l)
                .enumerate()
                .for_each(|(s, dxs)| {
                    for c in 0..ch {
                        let scale = gamma[c] * inv_std[c];
                        let at = (s * ch + c) * l;
                        for i in 0..l {
                            dxs[c * l + i] = scale * dy[at + i];
                        }
                    }
                });
        }
        Ok((dx, sum_dy, sum_dy_xhat))
    }

    pub fn zero_grads(&mut self) {
        self.ggrad.fill(0.0);
        self.bgrad.fill(0.0);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            name: format!("{prefix}.gamma"),
            value: &mut self.gamma,
            grad: &mut self.ggrad,
        });
        f(ParamSlot {
            name: format!("{prefix}.beta"),
            value: &mut self.beta,
            grad: &mut self.bgrad,
        });
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}
