//! Dense 2-D tensor kernels: matrix multiply, elementwise activations,
//! softmax, cross-entropy and clipping.
//!
//! Everything is generic over the scalar type so the training path runs in
//! f32 while gradient checking re-runs the identical code in f64.

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar types the kernels accept. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + num_traits::NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major 2-D array with shape metadata.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// 1xN tensor from a slice.
    pub fn row_vector(values: &[F]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    /// `self += scale * other`, used by gradient accumulation and SGD.
    pub fn add_assign_scaled(&mut self, other: &Self, scale: F) -> Result<()> {
        self.check_same_shape(other, "add_assign_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product, shape (self.rows, other.cols).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, p, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ik * b;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self^T * other` without materializing the transpose. Shape
    /// (self.cols, other.cols); used for weight gradients.
    pub fn matmul_at_b(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_at_b dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, p, n) = (self.cols, self.rows, other.cols);
        let mut out = vec![F::zero(); m * n];
        for i in 0..p {
            let a_row = &self.data[i * m..(i + 1) * m];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * other^T` without materializing the transpose. Shape
    /// (self.rows, other.rows); used for input gradients.
    pub fn matmul_a_bt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_a_bt dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, p, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * p..(i + 1) * p];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * p..(j + 1) * p];
                let mut acc = F::zero();
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Adds a 1xC row vector to every row.
    pub fn add_row_vector(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape(format!(
                "row-vector broadcast mismatch: {}x{} plus {}x{}",
                self.rows, self.cols, bias.rows, bias.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            for (o, &b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Sums each column into a 1xC tensor.
    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &v) in out.data.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        out
    }

    /// Horizontal concatenation: [a ; b] along the feature axis.
    pub fn concat_cols(a: &Self, b: &Self) -> Result<Self> {
        if a.rows != b.rows {
            return Err(Error::Shape(format!(
                "concat_cols row mismatch: {}x{} with {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Self {
            rows: a.rows,
            cols,
            data,
        })
    }

    /// Copies the column range `[start, start + width)` of every row.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::Shape(format!(
                "column slice [{start}, {}) out of bounds for {}x{}",
                start + width,
                self.rows,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend_from_slice(&row[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the scalar type, e.g. f32 -> f64 for gradient checking.
    pub fn to_precision<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| G::from_f64(v.as_f64())).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{op} shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Elementwise logistic sigmoid 1 / (1 + e^-x).
pub fn sigmoid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| F::one() / (F::one() + (-v).exp()))
}

/// Elementwise hyperbolic tangent.
pub fn tanh_op<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.tanh())
}

/// Elementwise max(0, x).
pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Elementwise clamp to [-limit, limit].
pub fn clip<F: Scalar>(x: &Tensor<F>, limit: F) -> Result<Tensor<F>> {
    if !(limit > F::zero()) {
        return Err(Error::Config(format!(
            "clip limit must be positive, got {limit}"
        )));
    }
    Ok(x.map(|v| {
        if v > limit {
            limit
        } else if v < -limit {
            -limit
        } else {
            v
        }
    }))
}

/// Per-row softmax with max-subtraction for stability. Each output row
/// sums to 1 and every entry is strictly positive for finite logits.
pub fn softmax_rows<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let (rows, cols) = logits.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let row = logits.row(r);
        let mut max = F::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        let out_row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Mean negative log-likelihood of the target class per row, plus the
/// combined softmax + cross-entropy gradient with respect to the logits:
/// (probs - one_hot) / rows. Probabilities are clamped at 1e-12 before the
/// log. The loss itself is accumulated in f64.
pub fn cross_entropy<F: Scalar>(probs: &Tensor<F>, targets: &[usize]) -> Result<(F, Tensor<F>)> {
    let (rows, cols) = probs.shape();
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "cross_entropy expected {rows} targets, got {}",
            targets.len()
        )));
    }
    let floor = F::from_f64(1e-12);
    let inv_rows = F::one() / F::from_f64(rows as f64);
    let mut grad = probs.scale(inv_rows);
    let mut loss = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(Error::Label(format!(
                "target class {t} out of range for {cols} classes at row {r}"
            )));
        }
        let p = probs.get(r, t).max(floor);
        loss -= p.as_f64().ln();
        let g = grad.get(r, t);
        grad.set(r, t, g - inv_rows);
    }
    Ok((F::from_f64(loss / rows as f64), grad))
}

/// Per-row argmax; ties broken by the lowest index.
pub fn argmax_rows<F: Scalar>(x: &Tensor<F>) -> Vec<usize> {
    let (rows, cols) = x.shape();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mut best = 0usize;
        let mut best_v = row[0];
        for (c, &v) in row.iter().enumerate().skip(1).take(cols - 1) {
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.push(best);
    }
    out
}
