//! Fully connected layer over `[N, features]` tensors.

use rayon::prelude::*;

use super::{Cache, ParamSlot};
use crate::error::{PmnError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dense layer `y = x W^T + b`. Weight layout `[out_features, in_features]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub wgrad: Tensor,
    pub bgrad: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Linear {
        let weight = super::fan_in_uniform(rng, &[out_features, in_features], in_features);
        Linear {
            in_features,
            out_features,
            weight,
            bias: Tensor::zeros(&[out_features]),
            wgrad: Tensor::zeros(&[out_features, in_features]),
            bgrad: Tensor::zeros(&[out_features]),
        }
    }

    fn expect_2d(&self, t: &Tensor, features: usize, what: &str) -> Result<usize> {
        let shape = t.shape();
        if shape.len() != 2 || shape[1] != features {
            return Err(PmnError::Dimension(format!(
                "{what} expects [N, {features}], got {shape:?}"
            )));
        }
        Ok(shape[0])
    }

    pub fn forward(&self, input: Tensor) -> Result<(Tensor, Cache)> {
        let n = self.expect_2d(&input, self.in_features, "Linear")?;
        let (fi, fo) = (self.in_features, self.out_features);
        let w = self.weight.data();
        let b = self.bias.data();
        let x = input.data();

        let mut out = Tensor::zeros(&[n, fo]);
        out.data_mut()
            .par_chunks_mut(fo)
            .enumerate()
            .for_each(|(s, y)| {
                let xs = &x[s * fi..(s + 1) * fi];
                for (o, yo) in y.iter_mut().enumerate() {
                    let wr = &w[o * fi..(o + 1) * fi];
                    *yo = b[o] + super::conv::dot(wr, xs);
                }
            });
        Ok((out, Cache::Linear { input }))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        input: &Tensor,
        param_grads: bool,
    ) -> Result<Tensor> {
        let n = self.expect_2d(input, self.in_features, "Linear backward")?;
        let n_g = self.expect_2d(grad_out, self.out_features, "Linear upstream gradient")?;
        if n_g != n {
            return Err(PmnError::Dimension(format!(
                "Linear upstream gradient batch {n_g} does not match input batch {n}"
            )));
        }
        if param_grads {
            let (fi, fo) = (self.in_features, self.out_features);
            let x = input.data();
            let dy = grad_out.data();
            self.wgrad
                .data_mut()
                .par_chunks_mut(fi)
                .enumerate()
                .for_each(|(o, dw)| {
                    for s in 0..n {
                        let g = dy[s * fo + o];
                        if g == 0.0 {
                            continue;
                        }
                        let xs = &x[s * fi..(s + 1) * fi];
                        for (d, xv) in dw.iter_mut().zip(xs) {
                            *d += g * xv;
                        }
                    }
                });
            let db = self.bgrad.data_mut();
            for s in 0..n {
                for (o, dbo) in db.iter_mut().enumerate() {
                    *dbo += dy[s * fo + o];
                }
            }
        }
        self.input_grad(grad_out, n)
    }

    pub fn backward_input(&self, grad_out: &Tensor) -> Result<Tensor> {
        let n = self.expect_2d(grad_out, self.out_features, "Linear upstream gradient")?;
        self.input_grad(grad_out, n)
    }

    fn input_grad(&self, grad_out: &Tensor, n: usize) -> Result<Tensor> {
        let (fi, fo) = (self.in_features, self.out_features);
        let w = self.weight.data();
        let dy = grad_out.data();
        let mut dx = Tensor::zeros(&[n, fi]);
        dx.data_mut()
            .par_chunks_mut(fi)
            .enumerate()
            .for_each(|(s, dxs)| {
                for o in 0..fo {
                    let g = dy[s * fo + o];
                    if g == 0.0 {
                        continue;
                    }
                    let wr = &w[o * fi..(o + 1) * fi];
                    for (d, wv) in dxs.iter_mut().zip(wr) {
                        *d += g * wv;
                    }
                }
            });
        Ok(dx)
    }

    pub fn zero_grads(&mut self) {
        self.wgrad.fill(0.0);
        self.bgrad.fill(0.0);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            name: format!("{prefix}.weight"),
            value: &mut self.weight,
            grad: &mut self.wgrad,
        });
        f(ParamSlot {
            name: format!("{prefix}.bias"),
            value: &mut self.bias,
            grad: &mut self.bgrad,
        });
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}
