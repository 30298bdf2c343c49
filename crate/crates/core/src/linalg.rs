//! Minimal dense linear algebra: row-major f64 matrices and the handful of
//! kernels the model math is built on.
//!
//! Everything here is pure and deterministic. `matmul` accumulates each entry
//! strictly left to right over the inner index so repeated runs produce
//! bitwise-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// Numerically stable logistic function. Uses the `exp(t)/(1+exp(t))` form
/// for negative arguments so large |t| never overflows.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn relu(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        0.0
    }
}

/// Dense 2-D array of f64 in row-major order.
///
/// Invariant: `data.len() == rows * cols`, and both dimensions are positive.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Wraps an existing row-major buffer. Panics if the length does not
    /// match `rows * cols`; callers validate data-driven sizes beforehand.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert_eq!(data.len(), rows * cols, "buffer length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "need at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "all rows must have the same length");
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies the given row range into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows, "row range out of bounds");
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Matrix product. Entry (i,j) is the sum over k of `a(i,k)*b(k,j)`,
    /// accumulated in ascending k for reproducibility.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let n = rhs.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
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

    /// Elementwise product.
    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("hadamard", self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("sub", self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    /// Adds a 1xN bias row to every row of the matrix.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Applies the activation elementwise.
    pub fn activate(&self, kind: Activation) -> Matrix {
        let f = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Relu => relu,
        };
        self.map(f)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// 1xN row of per-column sums, accumulated in ascending row order.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Index of the per-row maximum; the lowest index wins ties.
    pub fn argmax_row(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Prng;

    fn random_matrix(rng: &mut Prng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_identity_is_bitwise_passthrough() {
        let mut rng = Prng::new(7);
        let m = random_matrix(&mut rng, 3, 3);
        let i3 = Matrix::identity(3);
        assert_eq!(i3.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_one_by_one() {
        let a = Matrix::from_rows(&[&[2.0]]);
        let b = Matrix::from_rows(&[&[3.0]]);
        assert_eq!(a.matmul(&b).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Prng::new(42);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 4);
        let c = a.matmul(&b).unwrap();
        // Independent naive oracle, same left-to-right accumulation.
        for i in 0..7 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j), acc, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "got: {msg}");
    }

    #[test]
    fn matmul_is_associative_within_tolerance() {
        let mut rng = Prng::new(3);
        for _ in 0..5 {
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 3, 5);
            let c = random_matrix(&mut rng, 5, 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / denom < 1e-9);
            }
        }
    }

    #[test]
    fn sigmoid_basics_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        // Branch oracle: e^t/(1+e^t) for negative t.
        let t: f64 = -3.7;
        let oracle = t.exp() / (1.0 + t.exp());
        assert!((sigmoid(t) - oracle).abs() < 1e-16);
        assert!((sigmoid(500.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-500.0).abs() < 1e-15);
        assert!(sigmoid(500.0).is_finite() && sigmoid(-500.0).is_finite());
    }

    #[test]
    fn relu_definition() {
        let m = Matrix::from_rows(&[&[-3.2, 1.5, 0.0]]);
        let r = m.activate(Activation::Relu);
        assert_eq!(r.as_slice(), &[0.0, 1.5, 0.0]);
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval() {
        let mut rng = Prng::new(11);
        let m = random_matrix(&mut rng, 10, 10).scale(30.0);
        let s = m.activate(Activation::Sigmoid);
        for &v in s.as_slice() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn hadamard_identities() {
        let mut rng = Prng::new(5);
        let a = random_matrix(&mut rng, 3, 4);
        let ones = Matrix::filled(3, 4, 1.0);
        let zeros = Matrix::zeros(3, 4);
        assert_eq!(a.hadamard(&ones).unwrap(), a);
        assert_eq!(a.hadamard(&zeros).unwrap(), zeros);
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let expect = Matrix::from_rows(&[&[5.0, 12.0], &[21.0, 32.0]]);
        assert_eq!(x.hadamard(&y).unwrap(), expect);
        assert!(x.hadamard(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn add_and_broadcast() {
        let mut rng = Prng::new(9);
        let a = random_matrix(&mut rng, 4, 3);
        let zeros = Matrix::zeros(4, 3);
        assert_eq!(a.add(&zeros).unwrap(), a);

        let ones = Matrix::filled(2, 2, 1.0);
        let bias = Matrix::from_rows(&[&[1.0, 2.0]]);
        let out = ones.add_row_broadcast(&bias).unwrap();
        assert_eq!(out, Matrix::from_rows(&[&[2.0, 3.0], &[2.0, 3.0]]));

        // Loop oracle on a random pair.
        let b = random_matrix(&mut rng, 4, 3);
        let sum = a.add(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(sum.get(i, j), a.get(i, j) + b.get(i, j));
            }
        }
        assert!(a.add(&Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn operations_leave_inputs_unmodified() {
        let mut rng = Prng::new(13);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.matmul(&b).unwrap();
        let _ = a.hadamard(&b).unwrap();
        let _ = a.add(&b).unwrap();
        let _ = a.activate(Activation::Sigmoid);
        assert_eq!(a, a0);
        assert_eq!(b, b0);
        // Same inputs give bitwise-identical outputs.
        assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
    }
}
