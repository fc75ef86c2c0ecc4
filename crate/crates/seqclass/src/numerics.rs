//! Dense row-major f64 matrices, activation kernels and a deterministic PRNG.
//!
//! Everything downstream (embedding, recurrent cells, training) is built on
//! these few primitives. Matrices are immutable value types; all operations
//! allocate fresh outputs except the `*_in_place` accumulators used by the
//! gradient code.

use crate::error::{Error, Result};

/// Largest value the activation kernels return; `1 - 2^-53`, the f64 just
/// below 1. Keeps sigmoid outputs strictly inside (0,1) and tanh outputs
/// strictly inside (-1,1) even for saturating inputs.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Dense row-major matrix of f64 values. Row vectors are 1xN matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. The length must equal
    /// `rows * cols` and every entry must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Param(format!("matrix dimensions {rows}x{cols} must be positive")));
        }
        if data.len() != rows * cols {
            return Err(Error::Param(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Param(format!("non-finite matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        debug_assert!(m.all_finite());
        m
    }

    /// 1xN row vector.
    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Matrix::from_vec(1, n, data)
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row index out of bounds");
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert!(i < self.rows, "row index out of bounds");
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub(crate) fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub(crate) fn add_in_place(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `scale * col^T . row` into self; `col` is 1xR and `row` is 1xC
    /// for an RxC target. Outer-product accumulation for weight gradients.
    pub(crate) fn add_outer_scaled(&mut self, col: &Matrix, row: &Matrix, scale: f64) -> Result<()> {
        if col.rows != 1 || row.rows != 1 || self.rows != col.cols || self.cols != row.cols {
            return Err(Error::shape("add_outer", self.shape(), (col.cols, row.cols)));
        }
        for i in 0..self.rows {
            let c = col.data[i] * scale;
            let out = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (o, r) in out.iter_mut().zip(&row.data) {
                *o += c * r;
            }
        }
        Ok(())
    }

    pub(crate) fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Matrix product; `a.cols` must equal `b.rows`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    debug_assert!(out.all_finite(), "matmul produced non-finite entries");
    Ok(out)
}

fn sigmoid_scalar(x: f64) -> f64 {
    // Stable branch for negative inputs; exp only ever over-/underflows
    // toward zero. Clamp keeps the output strictly inside (0,1).
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

fn tanh_scalar(x: f64) -> f64 {
    x.tanh().clamp(-ONE_MINUS_ULP, ONE_MINUS_ULP)
}

/// Elementwise logistic sigmoid. Outputs lie strictly in (0,1).
pub fn sigmoid(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// Elementwise hyperbolic tangent. Outputs lie strictly in (-1,1).
pub fn tanh_act(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| tanh_scalar(v)).collect(),
    }
}

/// Softmax over a 1xK row vector, computed with max-subtraction so large
/// logits cannot overflow. Outputs are nonnegative and sum to 1.
pub fn softmax(v: &Matrix) -> Matrix {
    assert_eq!(v.rows, 1, "softmax expects a 1xK row vector");
    let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = v.data.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = data.iter().sum();
    for d in &mut data {
        *d /= sum;
    }
    Matrix {
        rows: 1,
        cols: v.cols,
        data,
    }
}

/// Elementwise product of two identically shaped matrices.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape("hadamard", a.shape(), b.shape()));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Deterministic splitmix64 generator. The same seed yields the same draw
/// sequence on every platform, which is what makes training runs and
/// dropout masks replayable.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform draw in [0, n). Multiply-shift bounding; bias is far below
    /// anything observable at the sizes used here.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}
