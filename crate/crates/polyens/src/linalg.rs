//! Dense complex matrices and the random matrix samplers used throughout the crate.
//!
//! Matrices are stored row-major. Heavy lifting (QR, SVD, Hermitian eigen-decomposition)
//! is delegated to `nalgebra`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix dimension must be at least 1 (got {rows}x{cols})")]
    ZeroDimension { rows: usize, cols: usize },
    #[error("entry count {got} does not match {rows}x{cols}")]
    EntryCount { rows: usize, cols: usize, got: usize },
    #[error("non-finite matrix entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("shape mismatch: {0}x{1} times {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NotHermitian(f64),
    #[error("truncation {req_rows}x{req_cols} exceeds matrix size {rows}x{cols}")]
    OversizeTruncation { req_rows: usize, req_cols: usize, rows: usize, cols: usize },
}

/// Seeded random stream. Sub-streams obtained with [`RandomStream::split`] are
/// deterministic functions of the seed and the worker index.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for worker `index`; stream 0 is reserved for the parent.
    pub fn split(&self, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index.wrapping_add(1));
        RandomStream { seed: self.seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Standard complex normal: independent real and imaginary parts of variance 1/2.
    pub fn complex_normal(&mut self) -> Complex64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Complex64::new(s * self.normal(), s * self.normal())
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::ZeroDimension { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::EntryCount { rows, cols, got: data.len() });
        }
        if let Some(k) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(LinalgError::NonFinite(k / cols, k % cols));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> Complex64,
    ) -> Result<Self, LinalgError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn identity(n: usize) -> Result<Self, LinalgError> {
        Self::from_fn(n, n, |i, j| if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
    }

    /// `diag(√a_1, …, √a_n)`; its squared singular values are the `a_j`.
    pub fn diag_sqrt(a: &[f64]) -> Result<Self, LinalgError> {
        Self::from_fn(a.len(), a.len(), |i, j| {
            if i == j {
                Complex64::new(a[i].sqrt(), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    pub fn adjoint(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j).conj());
            }
        }
        ComplexMatrix { rows: self.cols, cols: self.rows, data }
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch(self.rows, self.cols, other.rows, other.cols));
        }
        let mut data = vec![Complex64::new(0.0, 0.0); self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let out = &mut data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(ComplexMatrix { rows: self.rows, cols: other.cols, data })
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest `|H_jk − conj(H_kj)|`; zero for exactly Hermitian input.
    pub fn hermitian_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut m = 0.0f64;
        for i in 0..self.rows {
            for j in i..self.cols {
                m = m.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        m
    }

    pub fn to_nalgebra(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<Complex64>) -> Result<Self, LinalgError> {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumKind {
    Eigenvalues,
    SquaredSingularValues,
}

/// An unordered particle configuration, stored in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSample {
    pub points: Vec<f64>,
    pub kind: SpectrumKind,
}

impl SpectrumSample {
    pub fn new(mut points: Vec<f64>, kind: SpectrumKind) -> Self {
        points.sort_by(|a, b| a.total_cmp(b));
        SpectrumSample { points, kind }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// GUE matrix with density proportional to `exp(−tr H²/2)`.
pub fn sample_gue(n: usize, rng: &mut RandomStream) -> Result<ComplexMatrix, LinalgError> {
    if n == 0 {
        return Err(LinalgError::ZeroDimension { rows: 0, cols: 0 });
    }
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        data[i * n + i] = Complex64::new(rng.normal(), 0.0);
        for j in i + 1..n {
            let z = rng.complex_normal();
            data[i * n + j] = z;
            data[j * n + i] = z.conj();
        }
    }
    ComplexMatrix::new(n, n, data)
}

pub fn sample_ginibre(rows: usize, cols: usize, rng: &mut RandomStream) -> Result<ComplexMatrix, LinalgError> {
    if rows == 0 || cols == 0 {
        return Err(LinalgError::ZeroDimension { rows, cols });
    }
    let data = (0..rows * cols).map(|_| rng.complex_normal()).collect();
    ComplexMatrix::new(rows, cols, data)
}

/// Haar unitary from the QR factorisation of a square Ginibre matrix, with the
/// phases of `diag(R)` moved into `Q`.
pub fn sample_haar_unitary(m: usize, rng: &mut RandomStream) -> Result<ComplexMatrix, LinalgError> {
    let g = sample_ginibre(m, m, rng)?.to_nalgebra();
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        let d = r[(j, j)];
        let norm = d.norm();
        let phase = if norm > 0.0 { d / norm } else { Complex64::new(1.0, 0.0) };
        for i in 0..m {
            q[(i, j)] *= phase;
        }
    }
    ComplexMatrix::from_nalgebra(&q)
}

/// Top-left `rows × cols` block.
pub fn truncate(u: &ComplexMatrix, rows: usize, cols: usize) -> Result<ComplexMatrix, LinalgError> {
    if rows > u.rows || cols > u.cols {
        return Err(LinalgError::OversizeTruncation { req_rows: rows, req_cols: cols, rows: u.rows, cols: u.cols });
    }
    ComplexMatrix::from_fn(rows, cols, |i, j| u.get(i, j))
}

/// Squared singular values, `min(rows, cols)` of them, ascending.
pub fn squared_singular_values(x: &ComplexMatrix) -> Result<SpectrumSample, LinalgError> {
    if let Some(k) = x.data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(LinalgError::NonFinite(k / x.cols, k % x.cols));
    }
    let svd = x.to_nalgebra().svd(false, false);
    let pts = svd.singular_values.iter().map(|s| s * s).collect();
    Ok(SpectrumSample::new(pts, SpectrumKind::SquaredSingularValues))
}

const HERMITIAN_TOL: f64 = 1e-12;

pub fn eigenvalues_hermitian(h: &ComplexMatrix) -> Result<SpectrumSample, LinalgError> {
    let defect = h.hermitian_defect();
    let scale = h.data.iter().fold(1.0f64, |m, z| m.max(z.norm()));
    if defect > HERMITIAN_TOL * scale {
        return Err(LinalgError::NotHermitian(defect));
    }
    let eig = h.to_nalgebra().symmetric_eigenvalues();
    Ok(SpectrumSample::new(eig.iter().copied().collect(), SpectrumKind::Eigenvalues))
}

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending, eigenvectors as columns.
pub fn eigen_hermitian(h: &ComplexMatrix) -> Result<(Vec<f64>, ComplexMatrix), LinalgError> {
    let defect = h.hermitian_defect();
    let scale = h.data.iter().fold(1.0f64, |m, z| m.max(z.norm()));
    if defect > HERMITIAN_TOL * scale {
        return Err(LinalgError::NotHermitian(defect));
    }
    let eig = h.to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = ComplexMatrix::from_fn(h.rows, h.rows, |i, j| eig.eigenvectors[(i, order[j])])?;
    Ok((vals, vecs))
}
