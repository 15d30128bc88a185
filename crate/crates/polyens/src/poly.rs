//! Polynomials in the monomial basis and the classical families used as base
//! biorthogonal systems: probabilists' Hermite, associated Laguerre and Jacobi on `[0, 1]`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::factorial;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("interpolation nodes must be distinct (a[{0}] and a[{1}] coincide)")]
    RepeatedNode(usize, usize),
    #[error("empty node list")]
    NoNodes,
}

/// `coefficients[j]` is the coefficient of `x^j`. The zero polynomial is `[0]`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    coefficients: Vec<Complex64>,
}

fn cz() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

impl Polynomial {
    pub fn new(mut coefficients: Vec<Complex64>) -> Self {
        while coefficients.len() > 1 && *coefficients.last().unwrap() == cz() {
            coefficients.pop();
        }
        if coefficients.is_empty() {
            coefficients.push(cz());
        }
        Polynomial { coefficients }
    }

    pub fn from_real(c: &[f64]) -> Self {
        Self::new(c.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn zero() -> Self {
        Self::from_real(&[0.0])
    }

    pub fn one() -> Self {
        Self::from_real(&[1.0])
    }

    pub fn monomial(k: usize) -> Self {
        let mut c = vec![cz(); k + 1];
        c[k] = Complex64::new(1.0, 0.0);
        Self::new(c)
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn coeff(&self, j: usize) -> Complex64 {
        self.coefficients.get(j).copied().unwrap_or_else(cz)
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.len() == 1 && self.coefficients[0] == cz()
    }

    pub fn leading(&self) -> Complex64 {
        *self.coefficients.last().unwrap()
    }

    pub fn is_monic(&self) -> bool {
        self.leading() == Complex64::new(1.0, 0.0)
    }

    pub fn has_real_coefficients(&self) -> bool {
        self.coefficients.iter().all(|c| c.im == 0.0)
    }

    /// Horner evaluation.
    pub fn eval(&self, z: Complex64) -> Complex64 {
        self.coefficients.iter().rev().fold(cz(), |acc, &c| acc * z + c)
    }

    /// Real part of `p(x)` for real `x`.
    pub fn eval_re(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c.re)
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self::new(self.coefficients.iter().map(|c| c * s).collect())
    }

    pub fn add(&self, other: &Polynomial) -> Self {
        let n = self.coefficients.len().max(other.coefficients.len());
        Self::new((0..n).map(|j| self.coeff(j) + other.coeff(j)).collect())
    }

    pub fn sub(&self, other: &Polynomial) -> Self {
        let n = self.coefficients.len().max(other.coefficients.len());
        Self::new((0..n).map(|j| self.coeff(j) - other.coeff(j)).collect())
    }

    pub fn mul(&self, other: &Polynomial) -> Self {
        let mut c = vec![cz(); self.coefficients.len() + other.coefficients.len() - 1];
        for (i, a) in self.coefficients.iter().enumerate() {
            for (j, b) in other.coefficients.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Self::new(c)
    }

    /// Multiply by `(x − root)`.
    pub fn mul_linear(&self, root: Complex64) -> Self {
        self.mul(&Polynomial::new(vec![-root, Complex64::new(1.0, 0.0)]))
    }

    pub fn derivative(&self) -> Self {
        if self.coefficients.len() == 1 {
            return Self::zero();
        }
        Self::new(
            self.coefficients
                .iter()
                .enumerate()
                .skip(1)
                .map(|(j, c)| c * j as f64)
                .collect(),
        )
    }

    /// Coefficient-wise product `Σ a_j b_j x^j`; `b` must cover the degree.
    pub fn hadamard(&self, b: &[f64]) -> Self {
        assert!(b.len() > self.degree(), "moment sequence shorter than degree + 1");
        Self::new(self.coefficients.iter().zip(b).map(|(a, bj)| a * bj).collect())
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self
            .coefficients
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if c.im == 0.0 {
                    format!("{}x^{}", c.re, j)
                } else {
                    format!("({})x^{}", c, j)
                }
            })
            .collect();
        write!(f, "Polynomial[{}]", terms.join(" + "))
    }
}

/// Monic Hermite polynomial `He_k`, orthogonal for `e^{−x²/2}` on ℝ.
pub fn hermite_monic(k: usize) -> Polynomial {
    let mut prev = Polynomial::zero();
    let mut cur = Polynomial::one();
    for j in 0..k {
        let next = cur.mul(&Polynomial::monomial(1)).sub(&prev.scale(Complex64::new(j as f64, 0.0)));
        prev = cur;
        cur = next;
    }
    cur
}

/// `∫ He_k² e^{−x²/2} dx = √(2π) k!`.
pub fn hermite_norm(k: usize) -> f64 {
    (2.0 * std::f64::consts::PI).sqrt() * factorial(k)
}

/// Monic associated Laguerre polynomial, orthogonal for `x^ν e^{−x}` on `[0, ∞)`.
pub fn laguerre_monic(k: usize, nu: u32) -> Polynomial {
    let nu = nu as f64;
    let mut prev = Polynomial::zero();
    let mut cur = Polynomial::one();
    for j in 0..k {
        let jf = j as f64;
        let shifted = Polynomial::from_real(&[-(2.0 * jf + nu + 1.0), 1.0]);
        let next = cur.mul(&shifted).sub(&prev.scale(Complex64::new(jf * (jf + nu), 0.0)));
        prev = cur;
        cur = next;
    }
    cur
}

/// `∫ p_k² x^ν e^{−x} dx = k! (k+ν)!` for the monic Laguerre polynomial.
pub fn laguerre_norm(k: usize, nu: u32) -> f64 {
    factorial(k) * factorial(k + nu as usize)
}

/// Monic Jacobi polynomial on `[0, 1]`, orthogonal for `x^α (1−x)^β`.
pub fn jacobi01_monic(k: usize, alpha: u32, beta: u32) -> Polynomial {
    let (a, b) = (alpha as f64, beta as f64);
    let kf = k as f64;
    // 2F1(−k, k+α+β+1; α+1; x) coefficients, rescaled afterwards
    let mut c = vec![1.0f64; k + 1];
    for j in 0..k {
        let jf = j as f64;
        c[j + 1] = c[j] * (jf - kf) * (jf + kf + a + b + 1.0) / ((jf + a + 1.0) * (jf + 1.0));
    }
    let lead = c[k];
    let mut coeffs: Vec<f64> = c.iter().map(|x| x / lead).collect();
    coeffs[k] = 1.0;
    Polynomial::from_real(&coeffs)
}

/// `∫₀¹ p_k² x^α (1−x)^β dx` for the monic Jacobi polynomial on `[0, 1]`.
pub fn jacobi01_norm(k: usize, alpha: u32, beta: u32) -> f64 {
    let (a, b) = (alpha as usize, beta as usize);
    factorial(k) * factorial(k + a) * factorial(k + b) * factorial(k + a + b)
        / (factorial(2 * k + a + b) * factorial(2 * k + a + b + 1))
}

fn check_distinct(a: &[f64]) -> Result<(), PolyError> {
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let scale = a[i].abs().max(a[j].abs()).max(1.0);
            if (a[i] - a[j]).abs() <= 1e-12 * scale {
                return Err(PolyError::RepeatedNode(i, j));
            }
        }
    }
    Ok(())
}

/// Lagrange basis `p̃_k(x) = ∏_{j≠k} (x − a_j)/(a_k − a_j)`.
pub fn lagrange_basis(a: &[f64]) -> Result<Vec<Polynomial>, PolyError> {
    if a.is_empty() {
        return Err(PolyError::NoNodes);
    }
    check_distinct(a)?;
    Ok((0..a.len())
        .map(|k| {
            let mut p = Polynomial::one();
            let mut denom = 1.0;
            for (j, &aj) in a.iter().enumerate() {
                if j != k {
                    p = p.mul_linear(Complex64::new(aj, 0.0));
                    denom *= a[k] - aj;
                }
            }
            p.scale(Complex64::new(1.0 / denom, 0.0))
        })
        .collect())
}

pub fn poly_from_roots(roots: &[f64]) -> Polynomial {
    roots
        .iter()
        .fold(Polynomial::one(), |p, &r| p.mul_linear(Complex64::new(r, 0.0)))
}

/// Interval with possibly infinite endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY };
    pub const HALF_LINE: Interval = Interval { lo: 0.0, hi: f64::INFINITY };
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

type RealFn = dyn Fn(f64) -> f64 + Send + Sync;

/// A real function with an explicit support; evaluates to zero off the support.
#[derive(Clone)]
pub struct WeightedFunction {
    evaluator: Arc<RealFn>,
    pub support: Interval,
    pub tag: String,
}

impl WeightedFunction {
    pub fn new(support: Interval, tag: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        WeightedFunction { evaluator: Arc::new(f), support, tag: tag.into() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.support.contains(x) {
            (self.evaluator)(x)
        } else {
            0.0
        }
    }
}

impl fmt::Debug for WeightedFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeightedFunction({}, [{}, {}])", self.tag, self.support.lo, self.support.hi)
    }
}
