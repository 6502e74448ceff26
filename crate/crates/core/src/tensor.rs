//! Dense row-major tensors and the forward kernels used by the tape.
//!
//! Storage is always `f64`. A tensor tagged [`DType::F32`] holds only values
//! that are exactly representable in `f32`: every kernel rounds its output to
//! the storage precision, so an `F32` tensor behaves like `f32` storage with
//! wide accumulation inside reductions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive mask value standing in for negative infinity.
pub const NEG_SENTINEL: f64 = -1e30;

/// Inputs at or below this value are treated as masked by the softmax kernels.
pub const MASK_THRESHOLD: f64 = -1e29;

/// Work size (multiply-adds) above which matmul splits rows across threads.
const PAR_MATMUL_WORK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    /// The wider of the two; operations between mixed dtypes are rejected,
    /// this is only used for constants.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        let data = data.into_iter().map(|v| dtype.round(v)).collect();
        Ok(Tensor { shape, dtype, data })
    }

    /// Builds a 2-D tensor; panics if `data` does not hold `rows * cols` values.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>, dtype: DType) -> Self {
        Self::new(vec![rows, cols], data, dtype).expect("from_rows: length mismatch")
    }

    pub fn from_nested(rows: &[Vec<f64>], dtype: DType) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_rows(rows.len(), cols, data, dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![dtype.round(value); numel],
        }
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Tensor {
            shape: vec![],
            dtype,
            data: vec![dtype.round(value)],
        }
    }

    pub fn eye(n: usize, dtype: DType) -> Self {
        let mut t = Self::zeros(&[n, n], dtype);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Re-tags the tensor, rounding values when narrowing.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data: self.data.iter().map(|&v| dtype.round(v)).collect(),
        }
    }

    /// Overwrites the values in place, rounding to the tensor's dtype.
    pub fn assign(&mut self, values: impl IntoIterator<Item = f64>) {
        let dtype = self.dtype;
        for (dst, v) in self.data.iter_mut().zip(values) {
            *dst = dtype.round(v);
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn with_data(&self, data: Vec<f64>) -> Tensor {
        let dtype = self.dtype;
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data: round_all(data, dtype),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(op, self, other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            dtype: self.dtype,
            data: out,
        })
    }
}

fn round_all(mut data: Vec<f64>, dtype: DType) -> Vec<f64> {
    if dtype == DType::F32 {
        for v in &mut data {
            *v = *v as f32 as f64;
        }
    }
    data
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    if a.dtype != b.dtype {
        return Err(Error::DType { op });
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul")?;
    let (k2, n) = b.expect_2d("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    if a.dtype != b.dtype {
        return Err(Error::DType { op: "matmul" });
    }
    let dtype = a.dtype;
    let mut out = vec![0.0; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
        if dtype == DType::F32 {
            for o in out_row.iter_mut() {
                *o = *o as f32 as f64;
            }
        }
    };
    // Rows are independent, so the split never changes the result.
    if n > 0 && m * k * n >= PAR_MATMUL_WORK && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Ok(Tensor {
        shape: vec![m, n],
        dtype,
        data: out,
    })
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.expect_2d("matmul_t")?;
    let (_, k2) = b.expect_2d("matmul_t")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_t",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    matmul(a, &b.transpose()?)
}

/// Adds a `1×n` row vector to every row of `a: m×n`.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_2d("add_row")?;
    if bias.numel() != n {
        return Err(Error::Dimension {
            op: "add_row",
            left: a.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for i in 0..m {
        for (v, b) in data[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(a.with_data(data))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

fn is_masked(v: f64) -> bool {
    v <= MASK_THRESHOLD
}

/// Row-wise softmax. Entries at or below [`MASK_THRESHOLD`] (including `-inf`)
/// come out as exactly zero.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_2d("softmax_rows")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let max = row
            .iter()
            .copied()
            .filter(|&v| !is_masked(v))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: i });
        }
        let o = &mut out[i * n..(i + 1) * n];
        let mut z = 0.0;
        for (dst, &v) in o.iter_mut().zip(row) {
            if !is_masked(v) {
                *dst = (v - max).exp();
                z += *dst;
            }
        }
        for dst in o.iter_mut() {
            *dst /= z;
        }
    }
    Ok(a.with_data(out))
}

/// Row-wise log-softmax. Masked entries produce [`NEG_SENTINEL`].
pub fn log_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_2d("log_softmax_rows")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let max = row
            .iter()
            .copied()
            .filter(|&v| !is_masked(v))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: i });
        }
        let z: f64 = row
            .iter()
            .filter(|&&v| !is_masked(v))
            .map(|&v| (v - max).exp())
            .sum();
        let lse = max + z.ln();
        for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *dst = if is_masked(v) { NEG_SENTINEL } else { v - lse };
        }
    }
    Ok(a.with_data(out))
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_2d("l2_normalize_rows")?;
    let mut out = a.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding { row: i });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(a.with_data(out))
}

/// Rows of `a` selected by `rows`, in order.
pub fn gather_rows(a: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (m, n) = a.expect_2d("gather_rows")?;
    let mut data = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        if r >= m {
            return Err(Error::Index { index: r, len: m });
        }
        data.extend_from_slice(&a.data[r * n..(r + 1) * n]);
    }
    Ok(Tensor {
        shape: vec![rows.len(), n],
        dtype: a.dtype,
        data,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
