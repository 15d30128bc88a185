//! Polynomial ensembles, biorthogonal systems and correlation kernels.
//!
//! A kernel is either a finite biorthogonal sum `Σ P_j(x) Q_j(y)` or an arbitrary evaluator
//! (double contour integrals). Kernels are compared through correlation determinants
//! `det[K(x_i, x_j)]`, which do not see gauge factors `c(x)/c(y)`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SpectrumSample;
use crate::poly::{
    hermite_monic, hermite_norm, jacobi01_monic, jacobi01_norm, lagrange_basis, laguerre_monic, laguerre_norm,
    Interval, PolyError, Polynomial, WeightedFunction,
};
use crate::quad::{integrate_real, QuadError};
use crate::special::{factorial, gamma, SpecialError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{0}")]
    Quadrature(#[from] QuadError),
    #[error("{0}")]
    Special(#[from] SpecialError),
    #[error("{0}")]
    Polynomial(#[from] PolyError),
    #[error("quadrature alarm: imaginary part {imag:e} against real part {real:e}")]
    ImaginaryResidue { real: f64, imag: f64 },
    #[error("non-finite kernel value at ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("kernel has atomic dual functions and cannot be evaluated pointwise")]
    Atomic,
    #[error("mismatched lengths: {0} polynomials, {1} dual functions")]
    LengthMismatch(usize, usize),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("degenerate ensemble: {0}")]
    Degenerate(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("quadrature did not converge (error estimate {0:e})")]
    NotConverged(f64),
    #[error("divergent integral: {0}")]
    Divergent(String),
}

/// Dirac combination `Σ w_j δ(y − a_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasureRow {
    pub atoms: Vec<(f64, f64)>,
}

impl AtomicMeasureRow {
    /// `∫ f dQ`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|&(a, w)| w * f(a)).sum()
    }
}

#[derive(Debug, Clone)]
pub enum DualFunction {
    Function(WeightedFunction),
    Atomic(AtomicMeasureRow),
}

impl DualFunction {
    pub fn is_atomic(&self) -> bool {
        matches!(self, DualFunction::Atomic(_))
    }
}

#[derive(Debug, Clone)]
pub struct BiorthogonalSystem {
    pub p: Vec<Polynomial>,
    pub q: Vec<DualFunction>,
    pub support: Interval,
    pub label: String,
}

impl BiorthogonalSystem {
    pub fn new(
        p: Vec<Polynomial>,
        q: Vec<DualFunction>,
        support: Interval,
        label: impl Into<String>,
    ) -> Result<Self, KernelError> {
        if p.len() != q.len() || p.is_empty() {
            return Err(KernelError::LengthMismatch(p.len(), q.len()));
        }
        Ok(BiorthogonalSystem { p, q, support, label: label.into() })
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn is_atomic(&self) -> bool {
        self.q.iter().any(DualFunction::is_atomic)
    }

    /// `G_{jk} = ∫ P_j Q_k` by quadrature on the support (exact sums for atomic rows).
    pub fn gram(&self, tol: f64) -> Result<DMatrix<f64>, KernelError> {
        let n = self.n();
        let mut g = DMatrix::zeros(n, n);
        for k in 0..n {
            match &self.q[k] {
                DualFunction::Atomic(row) => {
                    for j in 0..n {
                        g[(j, k)] = row.integrate(|a| self.p[j].eval_re(a));
                    }
                }
                DualFunction::Function(q) => {
                    for j in 0..n {
                        let r = integrate_real(|y| self.p[j].eval_re(y) * q.eval(y), q.support.lo, q.support.hi, tol)?;
                        if !r.converged {
                            return Err(KernelError::NotConverged(r.error_estimate));
                        }
                        g[(j, k)] = r.value.re;
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Largest deviation of a matrix from the identity, split into (off-diagonal, diagonal).
pub fn identity_defect(g: &DMatrix<f64>) -> (f64, f64) {
    let mut off: f64 = 0.0;
    let mut diag: f64 = 0.0;
    for j in 0..g.nrows() {
        for k in 0..g.ncols() {
            if j == k {
                diag = diag.max((g[(j, k)] - 1.0).abs());
            } else {
                off = off.max(g[(j, k)].abs());
            }
        }
    }
    (off, diag)
}

pub type KernelFn = dyn Fn(Complex64, f64) -> Result<Complex64, KernelError> + Send + Sync;

#[derive(Clone)]
pub enum KernelForm {
    /// `Σ_j P_j(x) Q_j(y)`.
    Sum { p: Vec<Polynomial>, q: Vec<DualFunction> },
    /// Arbitrary evaluator; the first argument may be complex where the kernel allows it.
    Evaluator(Arc<KernelFn>),
}

#[derive(Clone)]
pub struct CorrelationKernel {
    pub n: usize,
    pub support: Interval,
    /// Power `ν` of a conjugation factor `(y/x)^ν` relative to the reference normalization.
    pub gauge_exponent: i32,
    pub label: String,
    pub form: KernelForm,
    /// Interior points where the density may have a kink; `trace` integrates piecewise between them.
    pub breakpoints: Vec<f64>,
}

impl fmt::Debug for CorrelationKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.form {
            KernelForm::Sum { .. } => "sum",
            KernelForm::Evaluator(_) => "evaluator",
        };
        write!(f, "CorrelationKernel({}, n={}, {kind})", self.label, self.n)
    }
}

/// Relative size of the imaginary part tolerated before a kernel value is rejected.
pub const IMAGINARY_TOLERANCE: f64 = 1e-9;

impl CorrelationKernel {
    pub fn from_evaluator(
        n: usize,
        support: Interval,
        label: impl Into<String>,
        f: impl Fn(Complex64, f64) -> Result<Complex64, KernelError> + Send + Sync + 'static,
    ) -> Self {
        CorrelationKernel { n, support, gauge_exponent: 0, label: label.into(), form: KernelForm::Evaluator(Arc::new(f)), breakpoints: Vec::new() }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(&self.form, KernelForm::Sum { q, .. } if q.iter().any(DualFunction::is_atomic))
    }

    /// `K(s, y)` for complex `s` (polynomial in `s` for biorthogonal sums).
    pub fn eval_complex(&self, s: Complex64, y: f64) -> Result<Complex64, KernelError> {
        match &self.form {
            KernelForm::Sum { p, q } => {
                let mut acc = Complex64::new(0.0, 0.0);
                for (pj, qj) in p.iter().zip(q) {
                    match qj {
                        DualFunction::Function(f) => acc += pj.eval(s) * f.eval(y),
                        DualFunction::Atomic(_) => return Err(KernelError::Atomic),
                    }
                }
                Ok(acc)
            }
            KernelForm::Evaluator(f) => f(s, y),
        }
    }

    /// Real kernel value; imaginary parts above `1e-9·(1+|Re|)` raise an alarm.
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, KernelError> {
        if !self.support.contains(x) || !self.support.contains(y) {
            return Ok(0.0);
        }
        let v = self.eval_complex(Complex64::new(x, 0.0), y)?;
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(KernelError::NonFinite(x, y));
        }
        if v.im.abs() > IMAGINARY_TOLERANCE * (1.0 + v.re.abs()) {
            return Err(KernelError::ImaginaryResidue { real: v.re, imag: v.im });
        }
        Ok(v.re)
    }

    /// One-point function `K(x, x)`.
    pub fn density(&self, x: f64) -> Result<f64, KernelError> {
        self.eval(x, x)
    }

    /// Atoms of `K(x, ·)` for kernels with atomic dual rows: `(a_i, Σ_j P_j(x) w_{j,i})`.
    pub fn atoms(&self, x: f64) -> Result<Vec<(f64, f64)>, KernelError> {
        let KernelForm::Sum { p, q } = &self.form else {
            return Err(KernelError::Unsupported("atoms of a non-sum kernel".into()));
        };
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (pj, qj) in p.iter().zip(q) {
            let DualFunction::Atomic(row) = qj else {
                return Err(KernelError::Unsupported("mixed atomic and function rows".into()));
            };
            let px = pj.eval_re(x);
            for &(a, w) in &row.atoms {
                match out.iter_mut().find(|(b, _)| *b == a) {
                    Some(entry) => entry.1 += px * w,
                    None => out.push((a, px * w)),
                }
            }
        }
        out.sort_by(|u, v| u.0.total_cmp(&v.0));
        Ok(out)
    }

    /// `det[K(x_i, x_j)]`.
    pub fn correlation_determinant(&self, points: &[f64]) -> Result<f64, KernelError> {
        let k = points.len();
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] = self.eval(points[i], points[j])?;
            }
        }
        Ok(m.determinant())
    }

    /// `∫ K(x, x) dx` over the support.
    pub fn trace(&self, tol: f64) -> Result<f64, KernelError> {
        let failure: RefCell<Option<KernelError>> = RefCell::new(None);
        let (lo, hi) = (self.support.lo, self.support.hi);
        let mut cuts: Vec<f64> = self.breakpoints.iter().copied().filter(|&b| b > lo && b < hi).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut edges = vec![lo];
        edges.extend(cuts);
        edges.push(hi);
        let mut total = 0.0;
        for w in edges.windows(2) {
            let r = integrate_real(
                |x| match self.density(x) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        0.0
                    }
                },
                w[0],
                w[1],
                tol,
            )?;
            total += r.value.re;
        }
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        Ok(total)
    }

    /// Multiply by `c(x)/c(y)`; correlation determinants are unchanged.
    pub fn conjugated(&self, c: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static) -> CorrelationKernel {
        let inner = self.clone();
        let mut out = CorrelationKernel::from_evaluator(self.n, self.support, format!("{}-conj", self.label), move |s, y| {
            Ok(inner.eval_complex(s, y)? * c(s) / c(Complex64::new(y, 0.0)))
        });
        out.gauge_exponent = self.gauge_exponent;
        out.breakpoints = self.breakpoints.clone();
        out
    }
}

/// `k_n(x, y) = Σ p_j(x) q_j(y)`.
pub fn kernel_from_system(sys: &BiorthogonalSystem) -> Result<CorrelationKernel, KernelError> {
    if sys.p.len() != sys.q.len() {
        return Err(KernelError::LengthMismatch(sys.p.len(), sys.q.len()));
    }
    Ok(CorrelationKernel {
        n: sys.n(),
        support: sys.support,
        gauge_exponent: 0,
        label: sys.label.clone(),
        form: KernelForm::Sum { p: sys.p.clone(), q: sys.q.clone() },
        breakpoints: Vec::new(),
    })
}

/// Largest discrepancy of `det[K(x_i,x_j)]` between two kernels over the point sets, relative to
/// `max(|det|, 1e-6·B)` with `B` the larger of `∏ K(x_i,x_i)` and the Hadamard bounds
/// `∏_i ‖K(x_i,·)‖` of both matrices. The floor keeps sets with more points than the rank of the
/// kernel (determinants that vanish up to rounding) meaningful.
pub fn max_determinant_discrepancy(
    a: &CorrelationKernel,
    b: &CorrelationKernel,
    point_sets: &[Vec<f64>],
) -> Result<f64, KernelError> {
    let hadamard = |k: &CorrelationKernel, pts: &[f64]| -> Result<f64, KernelError> {
        let mut h = 1.0;
        for &x in pts {
            let mut row = 0.0;
            for &y in pts {
                row += k.eval(x, y)?.powi(2);
            }
            h *= row.sqrt();
        }
        Ok(h)
    };
    let mut worst: f64 = 0.0;
    for pts in point_sets {
        let da = a.correlation_determinant(pts)?;
        let db = b.correlation_determinant(pts)?;
        let diag: f64 = pts.iter().map(|&x| a.density(x).map(f64::abs)).product::<Result<f64, _>>()?;
        let bound = diag.max(hadamard(a, pts)?).max(hadamard(b, pts)?);
        let scale = da.abs().max(db.abs()).max(1e-6 * bound).max(f64::MIN_POSITIVE);
        worst = worst.max((da - db).abs() / scale);
    }
    Ok(worst)
}

/// Serializable description of a base ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleDescriptor {
    Gue { n: usize },
    Laguerre { n: usize, nu: u32 },
    Jacobi { n: usize, nu: u32, m: usize },
    Degenerate { a: Vec<f64>, #[serde(default)] variant: DegenerateVariant },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateVariant {
    #[default]
    Monic,
    Lagrange,
}

impl EnsembleDescriptor {
    pub fn n(&self) -> usize {
        match self {
            EnsembleDescriptor::Gue { n } | EnsembleDescriptor::Laguerre { n, .. } | EnsembleDescriptor::Jacobi { n, .. } => *n,
            EnsembleDescriptor::Degenerate { a, .. } => a.len(),
        }
    }

    pub fn system(&self) -> Result<BiorthogonalSystem, KernelError> {
        match self {
            EnsembleDescriptor::Gue { n } => Ok(gue_ensemble(*n)?.1),
            EnsembleDescriptor::Laguerre { n, nu } => Ok(laguerre_ensemble(*n, *nu)?.1),
            EnsembleDescriptor::Jacobi { n, nu, m } => Ok(jacobi_ensemble(*n, *nu, *m)?.1),
            EnsembleDescriptor::Degenerate { a, variant } => degenerate_ensemble(a, *variant),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolynomialEnsemble {
    pub n: usize,
    pub support: Interval,
    pub f: Vec<WeightedFunction>,
    /// `Z_n` when known in closed form.
    pub normalization: Option<f64>,
    pub descriptor: Option<EnsembleDescriptor>,
}

impl PolynomialEnsemble {
    /// Numerical rank of the moment matrix `∫ x^j f_k(x) dx`, after column scaling.
    pub fn moment_rank(&self, tol: f64) -> Result<usize, KernelError> {
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            for j in 0..n {
                let f = &self.f[k];
                let r = integrate_real(|x| x.powi(j as i32) * f.eval(x), f.support.lo, f.support.hi, tol)?;
                m[(j, k)] = r.value.re;
            }
            let norm = m.column(k).norm();
            if norm > 0.0 {
                m.column_mut(k).scale_mut(1.0 / norm);
            }
        }
        for j in 0..n {
            let norm = m.row(j).norm();
            if norm > 0.0 {
                m.row_mut(j).scale_mut(1.0 / norm);
            }
        }
        let sv = m.singular_values();
        let top = sv.max();
        Ok(sv.iter().filter(|&&s| s > 1e-10 * top).count())
    }

    pub fn check_nondegenerate(&self) -> Result<(), KernelError> {
        let rank = self.moment_rank(1e-12)?;
        if rank < self.n {
            return Err(KernelError::Degenerate(format!("moment matrix has rank {rank} < n = {}", self.n)));
        }
        Ok(())
    }
}

fn weighted_dual(p: &Polynomial, norm: f64, support: Interval, tag: String, w: impl Fn(f64) -> f64 + Send + Sync + 'static) -> DualFunction {
    let p = p.clone();
    DualFunction::Function(WeightedFunction::new(support, tag, move |y| {
        // far in the tail the weight underflows before the polynomial overflows
        let wy = w(y);
        if wy == 0.0 { 0.0 } else { p.eval_re(y) * wy / norm }
    }))
}

/// GUE: `f_k = x^k e^{−x²/2}`, monic Hermite `p_k` and `q_k = p_k e^{−x²/2}/h_k`.
pub fn gue_ensemble(n: usize) -> Result<(PolynomialEnsemble, BiorthogonalSystem), KernelError> {
    if n == 0 {
        return Err(KernelError::Precondition("n must be at least 1".into()));
    }
    let f = (0..n)
        .map(|k| WeightedFunction::new(Interval::REAL_LINE, format!("x^{k}e^(-x^2/2)"), move |x| x.powi(k as i32) * (-x * x / 2.0).exp()))
        .collect();
    let z = (2.0 * PI).powf(n as f64 / 2.0) * (1..=n).map(factorial).product::<f64>();
    let p: Vec<Polynomial> = (0..n).map(hermite_monic).collect();
    let q = (0..n)
        .map(|k| weighted_dual(&p[k], hermite_norm(k), Interval::REAL_LINE, format!("q{k}-hermite"), |y| (-y * y / 2.0).exp()))
        .collect();
    let ens = PolynomialEnsemble { n, support: Interval::REAL_LINE, f, normalization: Some(z), descriptor: Some(EnsembleDescriptor::Gue { n }) };
    Ok((ens, BiorthogonalSystem::new(p, q, Interval::REAL_LINE, format!("gue(n={n})"))?))
}

/// Christoffel–Darboux form of the GUE kernel.
pub fn gue_christoffel_darboux(n: usize, x: f64, y: f64) -> f64 {
    let pn = hermite_monic(n);
    let pm = hermite_monic(n - 1);
    let h = hermite_norm(n - 1);
    let w = (-y * y / 2.0).exp();
    if (x - y).abs() < 1e-7 * (1.0 + x.abs()) {
        let (dn, dm) = (pn.derivative(), pm.derivative());
        return w * (dn.eval_re(x) * pm.eval_re(x) - pn.eval_re(x) * dm.eval_re(x)) / h;
    }
    w * (pn.eval_re(x) * pm.eval_re(y) - pn.eval_re(y) * pm.eval_re(x)) / (h * (x - y))
}

/// Laguerre: `f_k = x^{ν+k} e^{−x}` on `[0, ∞)`.
pub fn laguerre_ensemble(n: usize, nu: u32) -> Result<(PolynomialEnsemble, BiorthogonalSystem), KernelError> {
    if n == 0 {
        return Err(KernelError::Precondition("n must be at least 1".into()));
    }
    let nf = nu as f64;
    let f = (0..n)
        .map(|k| WeightedFunction::new(Interval::HALF_LINE, format!("x^{}e^-x", nu as usize + k), move |x| {
                if x == 0.0 { if nu as usize + k == 0 { 1.0 } else { 0.0 } } else { ((nf + k as f64) * x.ln() - x).exp() }
            }))
        .collect();
    let z = (1..=n).map(|k| factorial(k) * gamma(k as f64 + nf)).product();
    let p: Vec<Polynomial> = (0..n).map(|k| laguerre_monic(k, nu)).collect();
    let q = (0..n)
        .map(|k| {
            weighted_dual(&p[k], laguerre_norm(k, nu), Interval::HALF_LINE, format!("q{k}-laguerre"), move |y| {
                if y == 0.0 { if nu == 0 { 1.0 } else { 0.0 } } else { (nf * y.ln() - y).exp() }
            })
        })
        .collect();
    let ens = PolynomialEnsemble {
        n,
        support: Interval::HALF_LINE,
        f,
        normalization: Some(z),
        descriptor: Some(EnsembleDescriptor::Laguerre { n, nu }),
    };
    Ok((ens, BiorthogonalSystem::new(p, q, Interval::HALF_LINE, format!("laguerre(n={n},nu={nu})"))?))
}

/// Jacobi ensemble of the squared singular values of an `(n+ν)×n` truncation of an `m×m`
/// Haar unitary: weight `x^ν (1−x)^{m−2n−ν}` on `[0, 1]`. Requires `μ = m−n−ν ≥ n`.
pub fn jacobi_ensemble(n: usize, nu: u32, m: usize) -> Result<(PolynomialEnsemble, BiorthogonalSystem), KernelError> {
    if n == 0 {
        return Err(KernelError::Precondition("n must be at least 1".into()));
    }
    let mu = m as i64 - n as i64 - nu as i64;
    if mu < n as i64 {
        return Err(KernelError::Precondition(format!(
            "μ = m−n−ν = {mu} < n = {n}: the truncation has singular values at 1 and its squared singular values are not a Jacobi ensemble"
        )));
    }
    let beta = (mu - n as i64) as u32;
    let (a, b) = (nu as f64, beta as f64);
    let f = (0..n)
        .map(|k| {
            WeightedFunction::new(Interval::UNIT, format!("x^{}(1-x)^{beta}", nu as usize + k), move |x| {
                x.powf(a + k as f64) * (1.0 - x).powf(b)
            })
        })
        .collect();
    let z = (1..=n)
        .map(|k| {
            let kf = k as f64;
            factorial(k) * gamma(kf + a) * gamma(kf + m as f64 - 2.0 * n as f64 - a) / gamma(kf + m as f64 - n as f64)
        })
        .product();
    let p: Vec<Polynomial> = (0..n).map(|k| jacobi01_monic(k, nu, beta)).collect();
    let q = (0..n)
        .map(|k| {
            weighted_dual(&p[k], jacobi01_norm(k, nu, beta), Interval::UNIT, format!("q{k}-jacobi"), move |y| {
                y.powf(a) * (1.0 - y).powf(b)
            })
        })
        .collect();
    let ens = PolynomialEnsemble {
        n,
        support: Interval::UNIT,
        f,
        normalization: Some(z),
        descriptor: Some(EnsembleDescriptor::Jacobi { n, nu, m }),
    };
    Ok((ens, BiorthogonalSystem::new(p, q, Interval::UNIT, format!("jacobi(n={n},nu={nu},m={m})"))?))
}

/// Limiting biorthogonal system for the deterministic matrix `diag(√a_1, …, √a_n)`.
///
/// Monic variant: `p_k = ∏_{j≤k}(x − a_j)` with atomic duals solving `Σ_i w_{k,i} p_j(a_i) = δ_{jk}`.
/// Lagrange variant: Lagrange basis polynomials with `q_k = δ(y − a_k)`.
pub fn degenerate_ensemble(a: &[f64], variant: DegenerateVariant) -> Result<BiorthogonalSystem, KernelError> {
    if a.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(KernelError::Precondition("source values a_j must be positive".into()));
    }
    let n = a.len();
    let (p, q) = match variant {
        DegenerateVariant::Lagrange => {
            let p = lagrange_basis(a)?;
            let q = a.iter().map(|&ak| DualFunction::Atomic(AtomicMeasureRow { atoms: vec![(ak, 1.0)] })).collect();
            (p, q)
        }
        DegenerateVariant::Monic => {
            lagrange_basis(a)?; // distinctness check
            let p: Vec<Polynomial> = (0..n).map(|k| crate::poly::poly_from_roots(&a[..k])).collect();
            // M_{j,i} = p_j(a_i) is upper triangular with nonzero diagonal; W = M^{-1}
            let m = DMatrix::from_fn(n, n, |j, i| p[j].eval_re(a[i]));
            let w = m.clone().try_inverse().ok_or_else(|| KernelError::Degenerate("singular evaluation matrix".into()))?;
            let q = (0..n)
                .map(|k| DualFunction::Atomic(AtomicMeasureRow { atoms: (0..n).map(|i| (a[i], w[(i, k)])).collect() }))
                .collect();
            (p, q)
        }
    };
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(0.0, f64::max);
    BiorthogonalSystem::new(p, q, Interval { lo, hi }, format!("degenerate({a:?})"))
}

/// Monte Carlo average of `∏(x − x_j)` over spectra, with jackknife standard errors.
pub fn average_char_poly_mc(samples: &[SpectrumSample], grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>), KernelError> {
    let n = samples.len();
    if n == 0 {
        return Err(KernelError::Precondition("empty sample list".into()));
    }
    let mut est = Vec::with_capacity(grid.len());
    let mut err = Vec::with_capacity(grid.len());
    for &x in grid {
        let vals: Vec<f64> = samples.iter().map(|s| s.points.iter().map(|p| x - p).product()).collect();
        let total: f64 = vals.iter().sum();
        let mean = total / n as f64;
        if n < 2 {
            est.push(mean);
            err.push(f64::INFINITY);
            continue;
        }
        // leave-one-out means θ_(i) and the jackknife variance (n−1)/n Σ (θ_(i) − θ̄)²
        let loo: Vec<f64> = vals.iter().map(|v| (total - v) / (n - 1) as f64).collect();
        let loo_mean = loo.iter().sum::<f64>() / n as f64;
        let var = (n - 1) as f64 / n as f64 * loo.iter().map(|t| (t - loo_mean).powi(2)).sum::<f64>();
        est.push(mean);
        err.push(var.sqrt());
    }
    Ok((est, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigenvalues_hermitian, sample_gue, RandomStream, SpectrumKind};
    use proptest::prelude::*;

    #[test]
    fn gue_one_kernel_value() {
        let (_, sys) = gue_ensemble(1).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        assert!((k.eval(0.0, 0.0).unwrap() - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gue_normalization_and_christoffel_darboux() {
        let (ens, sys) = gue_ensemble(2).unwrap();
        assert!((ens.normalization.unwrap() - 4.0 * PI).abs() < 1e-12);
        let (_, sys4) = gue_ensemble(4).unwrap();
        let k = kernel_from_system(&sys4).unwrap();
        for &(x, y) in &[(0.3, -0.7), (1.1, 1.1), (-2.0, 0.5)] {
            assert!((k.eval(x, y).unwrap() - gue_christoffel_darboux(4, x, y)).abs() < 1e-10);
        }
        assert_eq!(sys.n(), 2);
    }

    #[test]
    fn gram_identity_for_base_ensembles() {
        for n in 1..=6 {
            let (_, sys) = gue_ensemble(n).unwrap();
            let (off, diag) = identity_defect(&sys.gram(1e-13).unwrap());
            assert!(off < 1e-9 && diag < 1e-9, "gue n={n}: {off:e} {diag:e}");
        }
        for nu in [0, 2] {
            let (_, sys) = laguerre_ensemble(5, nu).unwrap();
            let (off, diag) = identity_defect(&sys.gram(1e-13).unwrap());
            assert!(off < 1e-9 && diag < 1e-9, "laguerre nu={nu}: {off:e} {diag:e}");
        }
        let (_, sys) = jacobi_ensemble(4, 1, 10).unwrap();
        let (off, diag) = identity_defect(&sys.gram(1e-13).unwrap());
        assert!(off < 1e-9 && diag < 1e-9);
    }

    #[test]
    fn laguerre_examples() {
        let (ens, _) = laguerre_ensemble(2, 0).unwrap();
        assert!((ens.normalization.unwrap() - 2.0).abs() < 1e-12);
        let (_, sys) = laguerre_ensemble(1, 0).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        assert!((k.eval(1.0, 1.0).unwrap() - (-1f64).exp()).abs() < 1e-12);
        let (_, sys) = laguerre_ensemble(2, 0).unwrap();
        assert!((kernel_from_system(&sys).unwrap().trace(1e-11).unwrap() - 2.0).abs() < 1e-8);
        let (_, sys) = laguerre_ensemble(3, 2).unwrap();
        assert!((kernel_from_system(&sys).unwrap().trace(1e-11).unwrap() - 3.0).abs() < 1e-8);
    }

    #[test]
    fn jacobi_examples() {
        let (ens, _) = jacobi_ensemble(1, 0, 3).unwrap();
        assert!((ens.normalization.unwrap() - 0.5).abs() < 1e-12);
        let (_, sys) = jacobi_ensemble(2, 1, 6).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        assert_eq!(k.eval(1.3, 0.4).unwrap(), 0.0);
        assert_eq!(k.eval(0.4, 1.3).unwrap(), 0.0);
        assert!((k.trace(1e-12).unwrap() - 2.0).abs() < 1e-8);
        assert!(matches!(jacobi_ensemble(3, 0, 5), Err(KernelError::Precondition(_))));
    }

    #[test]
    fn trace_identity_for_all_base_kernels() {
        let systems = vec![
            gue_ensemble(3).unwrap().1,
            laguerre_ensemble(4, 1).unwrap().1,
            jacobi_ensemble(3, 2, 12).unwrap().1,
        ];
        for sys in systems {
            let t = kernel_from_system(&sys).unwrap().trace(1e-11).unwrap();
            assert!((t - sys.n() as f64).abs() < 1e-7, "{}: {t}", sys.label);
        }
    }

    #[test]
    fn reproducing_property() {
        let mut rng = RandomStream::new(3);
        for sys in [gue_ensemble(3).unwrap().1, laguerre_ensemble(4, 1).unwrap().1] {
            let k = kernel_from_system(&sys).unwrap();
            for _ in 0..5 {
                let (x, y) = if sys.support.lo < 0.0 {
                    (4.0 * rng.uniform() - 2.0, 4.0 * rng.uniform() - 2.0)
                } else {
                    (6.0 * rng.uniform(), 6.0 * rng.uniform())
                };
                let r = integrate_real(
                    |t| k.eval(x, t).unwrap() * k.eval(t, y).unwrap(),
                    sys.support.lo,
                    sys.support.hi,
                    1e-12,
                )
                .unwrap();
                assert!((r.value.re - k.eval(x, y).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gauge_conjugation_preserves_determinants() {
        let (_, sys) = laguerre_ensemble(3, 1).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        let g = k.conjugated(|s| s.powi(2) * (s * 0.3).exp());
        let sets = vec![vec![0.5, 1.7], vec![0.2, 2.0, 4.5], vec![3.3]];
        assert!(max_determinant_discrepancy(&k, &g, &sets).unwrap() < 1e-8);
        assert!((k.eval(0.5, 1.7).unwrap() - g.eval(0.5, 1.7).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn degenerate_variants() {
        let sys = degenerate_ensemble(&[1.0], DegenerateVariant::Monic).unwrap();
        assert_eq!(sys.p[0].coefficients()[0].re, 1.0);
        match &sys.q[0] {
            DualFunction::Atomic(row) => assert_eq!(row.atoms, vec![(1.0, 1.0)]),
            _ => panic!("expected atom"),
        }
        let a = [1.0, 2.0, 3.5];
        let monic = degenerate_ensemble(&a, DegenerateVariant::Monic).unwrap();
        let lagrange = degenerate_ensemble(&a, DegenerateVariant::Lagrange).unwrap();
        for sys in [&monic, &lagrange] {
            let (off, diag) = identity_defect(&sys.gram(1e-12).unwrap());
            assert!(off < 1e-12 && diag < 1e-12);
        }
        let km = kernel_from_system(&monic).unwrap();
        let kl = kernel_from_system(&lagrange).unwrap();
        for &x in &[0.3, 1.0, 2.7] {
            let am = km.atoms(x).unwrap();
            let al = kl.atoms(x).unwrap();
            assert_eq!(am.len(), 3);
            for (u, v) in am.iter().zip(&al) {
                assert_eq!(u.0, v.0);
                assert!((u.1 - v.1).abs() < 1e-12);
            }
        }
        assert!(kl.atoms(0.5).unwrap().iter().map(|p| p.0).eq(a.iter().cloned()));
        assert!(matches!(km.eval(1.0, 1.0), Err(KernelError::Atomic)));
        assert!(degenerate_ensemble(&[1.0, 1.0], DegenerateVariant::Monic).is_err());
    }

    #[test]
    fn descriptor_json_round_trip() {
        let d = EnsembleDescriptor::Laguerre { n: 3, nu: 2 };
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"family":"laguerre","n":3,"nu":2}"#);
        assert_eq!(serde_json::from_str::<EnsembleDescriptor>(&s).unwrap(), d);
        assert!(serde_json::from_str::<EnsembleDescriptor>(r#"{"family":"gue","n":2,"extra":1}"#).is_err());
        let sys = serde_json::from_str::<EnsembleDescriptor>(r#"{"family":"degenerate","a":[1,2]}"#).unwrap().system().unwrap();
        assert!(sys.is_atomic());
    }

    #[test]
    fn nondegeneracy_check() {
        let (ens, _) = laguerre_ensemble(3, 1).unwrap();
        ens.check_nondegenerate().unwrap();
        let mut bad = ens.clone();
        bad.f[2] = bad.f[1].clone();
        assert!(matches!(bad.check_nondegenerate(), Err(KernelError::Degenerate(_))));
    }

    #[test]
    fn char_poly_deterministic_samples() {
        let s: Vec<SpectrumSample> = (0..100).map(|_| SpectrumSample::new(vec![0.7], SpectrumKind::Eigenvalues)).collect();
        let (est, se) = average_char_poly_mc(&s, &[0.0, 2.0]).unwrap();
        assert!((est[0] + 0.7).abs() < 1e-14 && (est[1] - 1.3).abs() < 1e-14);
        assert!(se.iter().all(|&e| e < 1e-12));
        assert!(average_char_poly_mc(&[], &[1.0]).is_err());
    }

    #[test]
    fn char_poly_gue_monte_carlo() {
        let mut rng = RandomStream::new(11);
        let one: Vec<SpectrumSample> = (0..100_000)
            .map(|_| eigenvalues_hermitian(&sample_gue(1, &mut rng).unwrap()).unwrap())
            .collect();
        let (est, se) = average_char_poly_mc(&one, &[2.0]).unwrap();
        assert!((est[0] - 2.0).abs() < 3.0 * se[0]);
        // GUE(2): E∏(x − x_j) = He₂(x) = x² − 1
        let two: Vec<SpectrumSample> = (0..100_000)
            .map(|_| eigenvalues_hermitian(&sample_gue(2, &mut rng).unwrap()).unwrap())
            .collect();
        let (est, se) = average_char_poly_mc(&two, &[0.0, 1.5]).unwrap();
        assert!((est[0] + 1.0).abs() < 3.0 * se[0]);
        assert!((est[1] - 1.25).abs() < 3.0 * se[1]);
    }

    proptest! {
        #[test]
        fn jackknife_matches_sample_standard_error(vals in proptest::collection::vec(-5.0f64..5.0, 3..40)) {
            let s: Vec<SpectrumSample> = vals.iter().map(|&v| SpectrumSample::new(vec![v], SpectrumKind::Eigenvalues)).collect();
            let (est, se) = average_char_poly_mc(&s, &[0.0]).unwrap();
            let n = vals.len() as f64;
            let mean = -vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (-v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assert!((est[0] - mean).abs() < 1e-12);
            prop_assert!((se[0] - (var / n).sqrt()).abs() < 1e-10);
        }
    }
}
