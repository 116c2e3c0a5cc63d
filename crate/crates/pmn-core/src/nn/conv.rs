//! 1-D convolution and transposed convolution.
//!
//! `Deconv1d` is the exact linear adjoint of a `Conv1d` with the same
//! kernel/stride/padding geometry: `<Conv(x), y> == <x, Deconv(y)>` when both
//! share weights and zero bias (for geometries where the stride divides
//! exactly, as in every layer used here). The backward passes are written
//! from that correspondence.
//!
//! Internally both layers lower onto an im2col buffer — `cols[(c,k)][t] =
//! x[c][t*stride - pad + k]` — so every hot loop is a contiguous dot or axpy
//! over output positions. Batches parallelize over samples, weight gradients
//! over output channels; each parallel branch writes disjoint slices and
//! reduces sequentially, keeping results bitwise reproducible regardless of
//! thread count.

use rayon::prelude::*;

use super::{Cache, ParamSlot};
use crate::error::{PmnError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Output length of a convolution: `(L + 2*pad - kernel) / stride + 1`.
pub fn conv_out_len(l_in: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = l_in + 2 * pad;
    if padded < kernel {
        return Err(PmnError::Dimension(format!(
            "convolution kernel {kernel} exceeds padded input length {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution: `(L-1)*stride - 2*pad + kernel`.
pub fn deconv_out_len(l_in: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (l_in - 1) * stride + kernel;
    if grown < 2 * pad + 1 {
        return Err(PmnError::Dimension(format!(
            "transposed convolution padding {pad} swallows the whole output \
             (kernel {kernel}, stride {stride}, input {l_in})"
        )));
    }
    Ok(grown - 2 * pad)
}

fn expect_3d(input: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    let shape = input.shape();
    if shape.len() != 3 || shape[1] != channels {
        return Err(PmnError::Dimension(format!(
            "{what} expects [N, {channels}, L], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2]))
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    l_in: usize,
    l_out: usize,
}

impl Geometry {
    fn cols_len(&self) -> usize {
        self.channels * self.kernel * self.l_out
    }
}

/// Gather `x[C, L_in]` into `cols[(c,k)][t] = x[c][t*s - p + k]` (zero
/// outside), row-major over `(c, k)` with `t` contiguous.
fn im2col(x: &[f64], g: Geometry, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.cols_len());
    cols.fill(0.0);
    for c in 0..g.channels {
        let x_row = &x[c * g.l_in..(c + 1) * g.l_in];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * g.l_out..(c * g.kernel + k + 1) * g.l_out];
            // Valid t range: 0 <= t*s - p + k < l_in.
            let offset = k as isize - g.pad as isize;
            let t_lo = if offset >= 0 {
                0
            } else {
                ((-offset) as usize).div_ceil(g.stride)
            };
            let t_hi = {
                // Largest t with t*s + offset <= l_in - 1.
                let limit = g.l_in as isize - 1 - offset;
                if limit < 0 {
                    0
                } else {
                    ((limit as usize) / g.stride + 1).min(g.l_out)
                }
            };
            for t in t_lo..t_hi {
                row[t] = x_row[(t as isize * g.stride as isize + offset) as usize];
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`]: `x[c][t*s - p + k] += cols[(c,k)][t]`.
fn col2im(cols: &[f64], g: Geometry, x: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.cols_len());
    for c in 0..g.channels {
        let x_row = &mut x[c * g.l_in..(c + 1) * g.l_in];
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * g.l_out..(c * g.kernel + k + 1) * g.l_out];
            let offset = k as isize - g.pad as isize;
            let t_lo = if offset >= 0 {
                0
            } else {
                ((-offset) as usize).div_ceil(g.stride)
            };
            let t_hi = {
                let limit = g.l_in as isize - 1 - offset;
                if limit < 0 {
                    0
                } else {
                    ((limit as usize) / g.stride + 1).min(g.l_out)
                }
            };
            for t in t_lo..t_hi {
                x_row[(t as isize * g.stride as isize + offset) as usize] += row[t];
            }
        }
    }
}

/// `y[o][..] += a * x[..]` over one row.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Four-accumulator dot product: same result every run, but the shortened
/// dependency chains let the CPU pipeline the multiply-adds.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let at = &a[i * 4..i * 4 + 4];
        let bt = &b[i * 4..i * 4 + 4];
        s0 += at[0] * bt[0];
        s1 += at[1] * bt[1];
        s2 += at[2] * bt[2];
        s3 += at[3] * bt[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// 1-D convolution layer. Weight layout `[out_ch, in_ch, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub wgrad: Tensor,
    pub bgrad: Tensor,
}

impl Conv1d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Conv1d {
        let weight = super::fan_in_uniform(rng, &[out_ch, in_ch, kernel], in_ch * kernel);
        Conv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias: Tensor::zeros(&[out_ch]),
            wgrad: Tensor::zeros(&[out_ch, in_ch, kernel]),
            bgrad: Tensor::zeros(&[out_ch]),
        }
    }

    fn geometry(&self, l_in: usize) -> Result<Geometry> {
        Ok(Geometry {
            channels: self.in_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            l_in,
            l_out: conv_out_len(l_in, self.kernel, self.stride, self.pad)?,
        })
    }

    pub fn forward(&self, input: Tensor) -> Result<(Tensor, Cache)> {
        let (n, l_in) = expect_3d(&input, self.in_ch, "Conv1d")?;
        let g = self.geometry(l_in)?;
        let (ic, oc, k, l_out) = (self.in_ch, self.out_ch, self.kernel, g.l_out);
        let w = self.weight.data();
        let b = self.bias.data();
        let x = input.data();

        let mut out = Tensor::zeros(&[n, oc, l_out]);
        out.data_mut()
            .par_chunks_mut(oc * l_out)
            .enumerate()
            .for_each(|(sample, y)| {
                let mut cols = vec![0.0; g.cols_len()];
                im2col(&x[sample * ic * l_in..(sample + 1) * ic * l_in], g, &mut cols);
                for o in 0..oc {
                    let y_row = &mut y[o * l_out..(o + 1) * l_out];
                    y_row.fill(b[o]);
                    let w_row = &w[o * ic * k..(o + 1) * ic * k];
                    for (ck, &wv) in w_row.iter().enumerate() {
                        if wv != 0.0 {
                            axpy(y_row, wv, &cols[ck * l_out..(ck + 1) * l_out]);
                        }
                    }
                }
            });
        Ok((out, Cache::Conv { input }))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        input: &Tensor,
        param_grads: bool,
    ) -> Result<Tensor> {
        let (n, l_in) = expect_3d(input, self.in_ch, "Conv1d backward")?;
        let g = self.geometry(l_in)?;
        let (n_g, l_g) = expect_3d(grad_out, self.out_ch, "Conv1d upstream gradient")?;
        if n_g != n || l_g != g.l_out {
            return Err(PmnError::Dimension(format!(
                "Conv1d upstream gradient [{}, {}, {}] does not match output [{}, {}, {}]",
                n_g, self.out_ch, l_g, n, self.out_ch, g.l_out
            )));
        }
        if param_grads {
            self.accumulate_param_grads(grad_out, input, n, g);
        }
        self.input_grad(grad_out, n, g)
    }

    pub fn backward_input(&self, grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
        let (n, l_in) = expect_3d(input, self.in_ch, "Conv1d backward")?;
        let g = self.geometry(l_in)?;
        self.input_grad(grad_out, n, g)
    }

    fn input_grad(&self, grad_out: &Tensor, n: usize, g: Geometry) -> Result<Tensor> {
        let (ic, oc, k, l_in, l_out) = (self.in_ch, self.out_ch, self.kernel, g.l_in, g.l_out);
        let w = self.weight.data();
        let dy = grad_out.data();

        let mut dx = Tensor::zeros(&[n, ic, l_in]);
        dx.data_mut()
            .par_chunks_mut(ic * l_in)
            .enumerate()
            .for_each(|(sample, dxs)| {
                // dcols = W^T dy, then scatter back onto the input grid.
                let mut dcols = vec![0.0; g.cols_len()];
                let dys = &dy[sample * oc * l_out..(sample + 1) * oc * l_out];
                for o in 0..oc {
                    let dy_row = &dys[o * l_out..(o + 1) * l_out];
                    let w_row = &w[o * ic * k..(o + 1) * ic * k];
                    for (ck, &wv) in w_row.iter().enumerate() {
                        if wv != 0.0 {
                            axpy(&mut dcols[ck * l_out..(ck + 1) * l_out], wv, dy_row);
                        }
                    }
                }
                col2im(&dcols, g, dxs);
            });
        Ok(dx)
    }

    fn accumulate_param_grads(&mut self, grad_out: &Tensor, input: &Tensor, n: usize, g: Geometry) {
        let (ic, oc, k, l_in, l_out) = (self.in_ch, self.out_ch, self.kernel, g.l_in, g.l_out);
        let x = input.data();
        let dy = grad_out.data();

        // Materialize columns for the whole batch once, then every weight
        // gradient is a plain dot.
        let stride_cols = g.cols_len();
        let mut cols = vec![0.0; n * stride_cols];
        cols.par_chunks_mut(stride_cols)
            .enumerate()
            .for_each(|(sample, slot)| {
                im2col(&x[sample * ic * l_in..(sample + 1) * ic * l_in], g, slot);
            });

        self.wgrad
            .data_mut()
            .par_chunks_mut(ic * k)
            .enumerate()
            .for_each(|(o, dw)| {
                for sample in 0..n {
                    let dy_row = &dy[(sample * oc + o) * l_out..(sample * oc + o + 1) * l_out];
                    let sample_cols = &cols[sample * stride_cols..(sample + 1) * stride_cols];
                    for (ck, slot) in dw.iter_mut().enumerate() {
                        *slot += dot(dy_row, &sample_cols[ck * l_out..(ck + 1) * l_out]);
                    }
                }
            });

        let db = self.bgrad.data_mut();
        for sample in 0..n {
            let dys = &dy[sample * oc * l_out..(sample + 1) * oc * l_out];
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo += dys[o * l_out..(o + 1) * l_out].iter().sum::<f64>();
            }
        }
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

/// 1-D transposed convolution layer. Weight layout `[in_ch, out_ch, kernel]`.
#[derive(Debug, Clone)]
pub struct Deconv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub wgrad: Tensor,
    pub bgrad: Tensor,
}

impl Deconv1d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Deconv1d {
        let weight = super::fan_in_uniform(rng, &[in_ch, out_ch, kernel], in_ch * kernel);
        Deconv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias: Tensor::zeros(&[out_ch]),
            wgrad: Tensor::zeros(&[in_ch, out_ch, kernel]),
            bgrad: Tensor::zeros(&[out_ch]),
        }
    }

    /// The transposed view: out_ch plays the role of the im2col channels and
    /// the deconv *input* length is the "output" grid of the gather.
    fn geometry(&self, l_in: usize) -> Result<Geometry> {
        Ok(Geometry {
            channels: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            l_in: deconv_out_len(l_in, self.kernel, self.stride, self.pad)?,
            l_out: l_in,
        })
    }

    pub fn forward(&self, input: Tensor) -> Result<(Tensor, Cache)> {
        let (n, l_in) = expect_3d(&input, self.in_ch, "Deconv1d")?;
        let g = self.geometry(l_in)?;
        let (ic, oc, k, l_out) = (self.in_ch, self.out_ch, self.kernel, g.l_in);
        let w = self.weight.data();
        let b = self.bias.data();
        let x = input.data();

        let mut out = Tensor::zeros(&[n, oc, l_out]);
        out.data_mut()
            .par_chunks_mut(oc * l_out)
            .enumerate()
            .for_each(|(sample, y)| {
                // cols[(o,k)][t] = sum_ic w[ic][(o,k)] * x[ic][t], scattered
                // onto the output grid.
                let mut cols = vec![0.0; g.cols_len()];
                let xs = &x[sample * ic * l_in..(sample + 1) * ic * l_in];
                for c in 0..ic {
                    let x_row = &xs[c * l_in..(c + 1) * l_in];
                    let w_row = &w[c * oc * k..(c + 1) * oc * k];
                    for (ok, &wv) in w_row.iter().enumerate() {
                        if wv != 0.0 {
                            axpy(&mut cols[ok * l_in..(ok + 1) * l_in], wv, x_row);
                        }
                    }
                }
                for o in 0..oc {
                    y[o * l_out..(o + 1) * l_out].fill(b[o]);
                }
                col2im(&cols, g, y);
            });
        Ok((out, Cache::Deconv { input }))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        input: &Tensor,
        param_grads: bool,
    ) -> Result<Tensor> {
        let (n, l_in) = expect_3d(input, self.in_ch, "Deconv1d backward")?;
        let g = self.geometry(l_in)?;
        let (n_g, l_g) = expect_3d(grad_out, self.out_ch, "Deconv1d upstream gradient")?;
        if n_g != n || l_g != g.l_in {
            return Err(PmnError::Dimension(format!(
                "Deconv1d upstream gradient [{}, {}, {}] does not match output [{}, {}, {}]",
                n_g, self.out_ch, l_g, n, self.out_ch, g.l_in
            )));
        }
        if param_grads {
            self.accumulate_param_grads(grad_out, input, n, g);
        }
        self.input_grad(grad_out, n, g)
    }

    pub fn backward_input(&self, grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
        let (n, l_in) = expect_3d(input, self.in_ch, "Deconv1d backward")?;
        let g = self.geometry(l_in)?;
        self.input_grad(grad_out, n, g)
    }

    fn input_grad(&self, grad_out: &Tensor, n: usize, g: Geometry) -> Result<Tensor> {
        let (ic, oc, k) = (self.in_ch, self.out_ch, self.kernel);
        let (l_in, l_out_y) = (g.l_out, g.l_in); // deconv input / output lengths
        let w = self.weight.data();
        let dy = grad_out.data();

        let mut dx = Tensor::zeros(&[n, ic, l_in]);
        dx.data_mut()
            .par_chunks_mut(ic * l_in)
            .enumerate()
            .for_each(|(sample, dxs)| {
                // Gather dy into columns over the deconv *input* grid, then
                // each input-channel gradient is a weighted column sum.
                let mut cols = vec![0.0; g.cols_len()];
                im2col(
                    &dy[sample * oc * l_out_y..(sample + 1) * oc * l_out_y],
                    g,
                    &mut cols,
                );
                for c in 0..ic {
                    let dx_row = &mut dxs[c * l_in..(c + 1) * l_in];
                    let w_row = &w[c * oc * k..(c + 1) * oc * k];
                    for (ok, &wv) in w_row.iter().enumerate() {
                        if wv != 0.0 {
                            axpy(dx_row, wv, &cols[ok * l_in..(ok + 1) * l_in]);
                        }
                    }
                }
            });
        Ok(dx)
    }

    fn accumulate_param_grads(&mut self, grad_out: &Tensor, input: &Tensor, n: usize, g: Geometry) {
        let (ic, oc, k) = (self.in_ch, self.out_ch, self.kernel);
        let (l_in, l_out_y) = (g.l_out, g.l_in);
        let x = input.data();
        let dy = grad_out.data();

        let stride_cols = g.cols_len();
        let mut cols = vec![0.0; n * stride_cols];
        cols.par_chunks_mut(stride_cols)
            .enumerate()
            .for_each(|(sample, slot)| {
                im2col(
                    &dy[sample * oc * l_out_y..(sample + 1) * oc * l_out_y],
                    g,
                    slot,
                );
            });

        self.wgrad
            .data_mut()
            .par_chunks_mut(oc * k)
            .enumerate()
            .for_each(|(c, dw)| {
                for sample in 0..n {
                    let x_row = &x[(sample * ic + c) * l_in..(sample * ic + c + 1) * l_in];
                    let sample_cols = &cols[sample * stride_cols..(sample + 1) * stride_cols];
                    for (ok, slot) in dw.iter_mut().enumerate() {
                        *slot += dot(x_row, &sample_cols[ok * l_in..(ok + 1) * l_in]);
                    }
                }
            });

        let db = self.bgrad.data_mut();
        for sample in 0..n {
            let dys = &dy[sample * oc * l_out_y..(sample + 1) * oc * l_out_y];
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo += dys[o * l_out_y..(o + 1) * l_out_y].iter().sum::<f64>();
            }
        }
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
