//! Dense row-major tensors.
//!
//! A [`Tensor`] is a flat `f64` buffer plus shape metadata. Element `(i, j)`
//! of an `m x n` tensor sits at flat index `i * n + j`; higher ranks extend
//! the same row-major rule. All shaped accessors are bounds-checked.

use crate::error::{PmnError, Result};

/// Dense multi-dimensional value array with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction kinds accepted by [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Min,
    Max,
    /// Index of the minimum; ties resolve to the lowest index.
    ArgMin,
}

impl Tensor {
    /// Tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::check_shape(shape);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Self::check_shape(shape);
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Build from a flat row-major buffer. Errors when the element count
    /// does not match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(shape);
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(PmnError::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    fn check_shape(shape: &[usize]) {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {:?}",
            shape
        );
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat row-major offset of a multi-index, bounds-checked per axis.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(
            index.len(),
            self.shape.len(),
            "index rank {} does not match tensor rank {}",
            index.len(),
            self.shape.len()
        );
        let mut flat = 0;
        for (axis, (&i, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                i < dim,
                "index {} out of bounds for axis {} of size {}",
                i,
                axis,
                dim
            );
            flat = flat * dim + i;
        }
        flat
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires exactly one element");
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(shape);
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(PmnError::Dimension(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                expected
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(PmnError::Dimension(format!(
                "matmul requires rank-2 tensors, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(PmnError::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// Reduce over one axis (removing it) or over all elements (`axis = None`,
    /// yielding a scalar tensor). `ArgMin` returns indices as floats.
    pub fn reduce(&self, op: Reduce, axis: Option<usize>) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(PmnError::Domain("reduce over empty tensor".into()));
        }
        match axis {
            None => Ok(Tensor::scalar(reduce_slice(op, &self.data))),
            Some(ax) => {
                if ax >= self.rank() {
                    return Err(PmnError::Dimension(format!(
                        "axis {} out of range for rank {}",
                        ax,
                        self.rank()
                    )));
                }
                let outer: usize = self.shape[..ax].iter().product();
                let reduced = self.shape[ax];
                let inner: usize = self.shape[ax + 1..].iter().product();
                let mut out_shape: Vec<usize> = self.shape.clone();
                out_shape.remove(ax);
                let mut out = Vec::with_capacity(outer * inner);
                let mut lane = Vec::with_capacity(reduced);
                for o in 0..outer {
                    for i in 0..inner {
                        lane.clear();
                        for r in 0..reduced {
                            lane.push(self.data[(o * reduced + r) * inner + i]);
                        }
                        out.push(reduce_slice(op, &lane));
                    }
                }
                if out_shape.is_empty() {
                    Ok(Tensor::scalar(out[0]))
                } else {
                    Tensor::from_vec(&out_shape, out)
                }
            }
        }
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += scale * other`. Shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Round every element to the nearest single-precision value.
    ///
    /// Parameters are stored at f32 precision (checkpoints hold f32 payloads)
    /// while all arithmetic runs in f64; keeping live parameters exactly
    /// f32-representable makes save/load lossless.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn reduce_slice(op: Reduce, values: &[f64]) -> f64 {
    match op {
        Reduce::Sum => values.iter().sum(),
        Reduce::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Reduce::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Reduce::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Reduce::ArgMin => argmin(values) as f64,
    }
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmin of empty slice");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
