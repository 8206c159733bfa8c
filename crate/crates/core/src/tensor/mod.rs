//! Dense fp32 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional value (feature maps use NCHW
//! order). All operations live on [`Ctx`]: in training mode they record onto
//! an internal tape which [`Ctx::backward`] replays in reverse to produce
//! gradients for every watched leaf.

mod ctx;
pub mod gradcheck;
pub(crate) mod kernels;

pub use ctx::{BnUpdate, Conv2dCfg, Ctx, Gradients, NodeId, BCE_EPS, DIV_EPS};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable dense fp32 tensor. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Tape node, set when this value participates in a recording [`Ctx`].
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "shape {:?} does not describe a buffer of {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; n]), node: None }
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![1], data: Arc::new(vec![v]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(&self, node: NodeId) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: Some(node) }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node: None }
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same storage under a new shape (element count must match). Detached
    /// from any tape; use [`Ctx::reshape`] inside differentiated code.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data), node: None })
    }

    /// Drop the tape association, keeping the value.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    /// Elementwise equality of shape and values (`==` semantics, so `-0.0`
    /// equals `0.0`; NaN never matches).
    pub fn value_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a == b)
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Broadcast result shape under replication semantics: shapes are
/// right-aligned, missing or size-1 axes replicate.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Strides (in elements) of a shape embedded into `rank` axes, with 0 for
/// broadcast (replicated) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    for s in strides.iter_mut().take(offset) {
        *s = 0;
    }
    strides
}

/// Pad a shape to exactly 4 axes (leading 1s).
pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    debug_assert!(shape.len() <= 4);
    let mut out = [1usize; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Strides over 4 padded axes, 0 where the shape broadcasts.
pub(crate) fn strides4(shape: &[usize], out: &[usize; 4]) -> [usize; 4] {
    let s = broadcast_strides(shape, out);
    let mut r = [0usize; 4];
    r[4 - s.len()..].copy_from_slice(&s);
    r
}

/// Horizontal sum with fixed 8-lane splitting (deterministic, vectorizable).
pub(crate) fn sum8(v: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let mut chunks = v.chunks_exact(8);
    for ch in &mut chunks {
        for i in 0..8 {
            lanes[i] += ch[i];
        }
    }
    let mut tail = 0.0f32;
    for &x in chunks.remainder() {
        tail += x;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

/// Sum `grad` (shaped `from`) down to `to`, undoing broadcast replication.
pub(crate) fn reduce_to_shape(grad: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if from == to {
        return grad.to_vec();
    }
    let full = pad4(from);
    let st = strides4(to, &full);
    let out_len: usize = to.iter().product();
    let mut out = vec![0.0f32; out_len];
    let w = full[3];
    for i0 in 0..full[0] {
        for i1 in 0..full[1] {
            for i2 in 0..full[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                let row = &grad[((i0 * full[1] + i1) * full[2] + i2) * w..][..w];
                if st[3] == 1 {
                    let orow = &mut out[base..base + w];
                    for (o, &g) in orow.iter_mut().zip(row) {
                        *o += g;
                    }
                } else {
                    out[base] += sum8(row);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[4], &[2, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn reduce_undoes_tiling() {
        // grad over [2,3] reduced to [3] sums the rows
        let g = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![11.0, 22.0, 33.0]);
        // reduced to [2,1] sums the columns
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 60.0]);
    }

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}

/// Slow-path exposure of the matrix kernel for external micro-benchmarks.
pub fn bench_gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    kernels::gemm(m, k, n, a, b, c, false);
}
