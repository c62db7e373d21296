//! Dense row-major tensor storage.
//!
//! Values are immutable after creation; ops build new tensors. The autodiff
//! tape (see [`crate::autodiff`]) layers gradient tracking on top of this
//! type, so `Tensor` itself is plain data plus shape arithmetic.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    /// Gaussian init, `mean + std * N(0,1)`.
    pub fn randn<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data viewed under a different shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// NumPy-style broadcast of two shapes (right-aligned, 1 expands).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::dim(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides that read `shape` as if it were `target` rank/extent: broadcast
/// axes get stride 0.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let native = strides_for(shape);
    let offset = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..target.len() {
        if i < offset {
            out[i] = 0;
        } else {
            let d = shape[i - offset];
            out[i] = if d == 1 { 0 } else { native[i - offset] };
        }
    }
    out
}

/// Iterate flat indices of `shape` yielding the matching flat index into a
/// broadcast operand described by `bstrides`.
pub struct BroadcastIter<'a> {
    shape: &'a [usize],
    bstrides: &'a [usize],
    coords: Vec<usize>,
    flat: usize,
    src: usize,
    done: bool,
}

impl<'a> BroadcastIter<'a> {
    pub fn new(shape: &'a [usize], bstrides: &'a [usize]) -> Self {
        let done = shape.iter().product::<usize>() == 0;
        BroadcastIter {
            shape,
            bstrides,
            coords: vec![0; shape.len()],
            flat: 0,
            src: 0,
            done,
        }
    }
}

impl Iterator for BroadcastIter<'_> {
    /// (destination flat index, source flat index)
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.done {
            return None;
        }
        let item = (self.flat, self.src);
        self.flat += 1;
        // odometer increment
        let mut axis = self.shape.len();
        loop {
            if axis == 0 {
                self.done = true;
                break;
            }
            axis -= 1;
            self.coords[axis] += 1;
            self.src += self.bstrides[axis];
            if self.coords[axis] < self.shape[axis] {
                break;
            }
            self.src -= self.coords[axis] * self.bstrides[axis];
            self.coords[axis] = 0;
        }
        Some(item)
    }
}

const PAR_MATMUL_THRESHOLD: usize = 32 * 1024;

/// C[m,n] = A[m,k] * B[k,n], accumulating per output row in a fixed order so
/// results do not depend on the rayon thread count.
pub fn matmul2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    let row_work = k * n;
    let body = |(i, row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    };
    if m * row_work >= PAR_MATMUL_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T. Used for backward passes where the transposed
/// layout is already at hand.
pub fn matmul2d_bt(a: &[f64], b_t: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    let body = |(i, row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c_ij) in row.iter_mut().enumerate() {
            let b_row = &b_t[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij = acc;
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

pub fn transpose2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
