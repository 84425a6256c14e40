//! Dense row-major tensors.
//!
//! Every reduction in this module accumulates in ascending index order, and
//! the parallel matmul splits work by output row only, so results do not
//! depend on the number of threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Extents of a tensor. Always rank ≥ 1 with strictly positive dims.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::invalid("shape must have rank >= 1"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid(format!("shape {dims:?} has a zero extent")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid(format!("shape {dims:?} overflows usize")))?;
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn vector(len: usize) -> Result<Self> {
        Shape::new(vec![len])
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Shape::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(rows, cols)` for a rank-2 shape.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.0.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

pub type FloatTensor = Tensor<f32>;
pub type IntTensor = Tensor<i32>;

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Copy + Default> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape("from_vec", shape.dims(), &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let data = vec![T::default(); shape.numel()];
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    /// Builds a rank-2 tensor from nested rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(Shape::matrix(n_rows, n_cols)?, data)
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Tensor::from_vec(Shape::vector(data.len())?, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape("reshape", self.shape.dims(), shape.dims()));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// `(rows, cols)`, or a shape error if the tensor is not rank 2.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        self.shape
            .as_matrix()
            .ok_or_else(|| Error::shape(op, self.dims(), &[0, 0]))
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.dims()[self.shape.rank() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.matrix_dims("transpose")?;
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..cols {
            for r in 0..rows {
                out.push(self.data[r * cols + c]);
            }
        }
        Tensor::from_vec(Shape::matrix(cols, rows)?, out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, cols) = first.matrix_dims("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.matrix_dims("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", first.dims(), p.dims()));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(Shape::matrix(rows, cols)?, data)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.matrix_dims("slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} out of range for {rows} rows"
            )));
        }
        Tensor::from_vec(
            Shape::matrix(end - start, cols)?,
            self.data[start * cols..end * cols].to_vec(),
        )
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Which slices a 2-D reduction produces one value for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// One value per row (reduces across columns).
    Row,
    /// One value per column (reduces across rows).
    Column,
}

impl FloatTensor {
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.dims(), other.dims()));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f32) -> Self {
        self.map(|x| x + s)
    }

    pub fn mul_scalar(&self, s: f32) -> Self {
        self.map(|x| x * s)
    }

    pub fn div_scalar(&self, s: f32) -> Self {
        self.map(|x| x / s)
    }

    pub fn exp(&self) -> Self {
        self.map(f32::exp)
    }

    pub fn ln(&self) -> Result<Self> {
        if let Some(&bad) = self.data.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain { op: "ln", value: bad });
        }
        Ok(self.map(f32::ln))
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |acc, &x| acc.max(x.abs()))
    }

    pub fn max_abs_over_axis(&self, axis: Axis) -> Result<Self> {
        self.reduce_axis(axis, "max_abs_over_axis", 0.0, |acc, x| acc.max(x.abs()), |v, _| v)
    }

    pub fn mean_over_axis(&self, axis: Axis) -> Result<Self> {
        self.reduce_axis(axis, "mean_over_axis", 0.0, |acc, x| acc + x, |v, n| v / n as f32)
    }

    fn reduce_axis(
        &self,
        axis: Axis,
        op: &'static str,
        init: f32,
        step: impl Fn(f32, f32) -> f32,
        finish: impl Fn(f32, usize) -> f32,
    ) -> Result<Self> {
        let (rows, cols) = self.matrix_dims(op)?;
        let out = match axis {
            Axis::Row => (0..rows)
                .map(|r| finish(self.row(r).iter().fold(init, |a, &x| step(a, x)), cols))
                .collect(),
            Axis::Column => {
                let mut acc = vec![init; cols];
                for r in 0..rows {
                    for (a, &x) in acc.iter_mut().zip(self.row(r)) {
                        *a = step(*a, x);
                    }
                }
                acc.into_iter().map(|a| finish(a, rows)).collect()
            }
        };
        Tensor::vector(out)
    }

    /// `self[M×K] · other[K×N]`, accumulated per output in ascending `k`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.dims(), other.dims()));
        }
        let mut out = vec![0.0f32; m * n];
        let (a, b) = (&self.data[..], &other.data[..]);
        let kernel = |(blk, rows): (usize, &mut [f32])| matmul_rows(a, b, blk * MR, rows, k, n);
        if m * k * n >= PAR_THRESHOLD && m > MR {
            out.par_chunks_mut(MR * n).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(MR * n).enumerate().for_each(kernel);
        }
        Tensor::from_vec(Shape::matrix(m, n)?, out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// Computes `out` rows `i0..` of `a·b`. Every element is accumulated from
/// zero over ascending `k`, matching a plain triple loop bit for bit; the
/// `MR×NR` register tile only changes which elements are in flight.
fn matmul_rows(a: &[f32], b: &[f32], i0: usize, out: &mut [f32], k: usize, n: usize) {
    let rows = out.len() / n;
    let mut j = 0;
    while j + NR <= n && rows == MR {
        let mut acc = [[0.0f32; NR]; MR];
        for kk in 0..k {
            let br: &[f32; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("NR columns");
            for (r, acc_r) in acc.iter_mut().enumerate() {
                let av = a[(i0 + r) * k + kk];
                for (o, &bv) in acc_r.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            out[r * n + j..r * n + j + NR].copy_from_slice(acc_r);
        }
        j += NR;
    }
    // Edge rows and columns.
    for r in 0..rows {
        let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
        let o_row = &mut out[r * n + j..(r + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            for (o, &bv) in o_row.iter_mut().zip(&b[kk * n + j..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Work size (multiply-adds) above which row-parallel kernels are used.
pub(crate) const PAR_THRESHOLD: usize = 1 << 16;
