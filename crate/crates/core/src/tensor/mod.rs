//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value (shape + row-major data). Differentiation
//! state (`requires_grad`, accumulated gradients) lives on the [`Tape`],
//! which is rebuilt for every forward pass.

mod conv;
pub mod io;
mod tape;
mod upsample;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Shape(format!(
                "item() needs a single element, shape is {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        // `v * 0.0` is NaN exactly for non-finite `v`; the sum vectorises.
        if self.data.iter().fold(0.0, |acc, &v| acc + v * 0.0) == 0.0 {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes (right-aligned, extent 1 stretches).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Row-wise view of a broadcast read: output row `r` (of `row` elements)
/// reads input elements `starts[r] + k * step`. `in_shape` must broadcast
/// to `out_shape`.
pub(crate) struct RowMap {
    pub row: usize,
    pub step: usize,
    pub starts: Vec<usize>,
}

impl RowMap {
    pub(crate) fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let lead = rank - in_shape.len();
        let in_strides = strides(in_shape);
        let mut eff = vec![0usize; rank];
        for i in lead..rank {
            if in_shape[i - lead] != 1 {
                eff[i] = in_strides[i - lead];
            }
        }
        let row = out_shape[rank - 1];
        let rows: usize = out_shape[..rank - 1].iter().product();
        let mut starts = Vec::with_capacity(rows);
        let mut index = vec![0usize; rank - 1];
        let mut offset = 0usize;
        for _ in 0..rows {
            starts.push(offset);
            for d in (0..rank - 1).rev() {
                index[d] += 1;
                offset += eff[d];
                if index[d] < out_shape[d] {
                    break;
                }
                offset -= eff[d] * index[d];
                index[d] = 0;
            }
        }
        Self {
            row,
            step: eff[rank - 1],
            starts,
        }
    }

    /// Calls `f(out_index, in_index)` in output order.
    #[inline]
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for (r, &start) in self.starts.iter().enumerate() {
            let base = r * self.row;
            for k in 0..self.row {
                f(base + k, start + k * self.step);
            }
        }
    }
}

/// For every flat index of `out_shape`, the flat index of `in_shape` it
/// reads after broadcasting.
#[cfg(test)]
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let mut offsets = vec![0; out_shape.iter().product()];
    RowMap::new(out_shape, in_shape).for_each(|o, i| offsets[o] = i);
    offsets
}
