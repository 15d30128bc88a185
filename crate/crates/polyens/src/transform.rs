//! Transformations of polynomial ensembles.
//!
//! Three concrete transforms are supported: addition of an independent GUE matrix and
//! left multiplication by a Ginibre or a truncated unitary matrix. The multiplicative ones
//! are instances of a general Mellin-convolution transform with weight `φ`, moments
//! `b_j = 1/∫ t^j φ(t) dt` and a Laurent series `ψ(s) = Σ b_j s^j`:
//!
//! * `P_k = L p_k` with `L(Σ a_j x^j) = Σ a_j b_j x^j`, equivalently `(1/2πi)∮ ψ(s) p_k(x/s) ds/s`;
//! * `Q_k = M q_k` with `M q(y) = ∫ φ(t) q(y/t) dt/t`;
//! * `K_n(x,y) = (1/2πi)∮ ds/s ∫ dt/t ψ(s) φ(t) k_n(x/s, y/t)`.
//!
//! For GUE addition the roles of `L` and `M` are played by the inverse Weierstrass transform
//! and the Weierstrass transform `W q(y) = (2π)^{-1/2} ∫ q(t) e^{-(y-t)²/2} dt`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    AtomicMeasureRow, BiorthogonalSystem, CorrelationKernel, DualFunction, KernelError, KernelForm, PolynomialEnsemble,
};
use crate::poly::{Interval, Polynomial, WeightedFunction};
use crate::quad::{integrate, integrate_adaptive, integrate_double, integrate_real, Contour, ContourKind};
use crate::special::{binomial, factorial, log_factorial, meijer_g, MeijerGSpec};

/// Absolute tolerance of the inner (Mellin, Weierstrass) integrals.
pub const INNER_TOL: f64 = 1e-13;
/// Relative tolerance of contour integrals in `s`.
pub const CONTOUR_TOL: f64 = 1e-13;

type MomentFn = dyn Fn(usize) -> f64 + Send + Sync;
type SeriesFn = dyn Fn(Complex64) -> Complex64 + Send + Sync;

/// Inverse moments `b_j`, stored for `j < n` and optionally extended by a closed form.
#[derive(Clone)]
pub struct MomentSequence {
    values: Vec<f64>,
    extension: Option<Arc<MomentFn>>,
}

impl fmt::Debug for MomentSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MomentSequence({:?}, extendable: {})", self.values, self.extension.is_some())
    }
}

impl MomentSequence {
    pub fn new(values: Vec<f64>) -> Result<Self, KernelError> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(KernelError::Precondition(format!("moment b_j = {v} is not positive and finite")));
        }
        Ok(MomentSequence { values, extension: None })
    }

    /// First `n` values from `f`, with `f` used for any larger index.
    pub fn closed_form(n: usize, f: impl Fn(usize) -> f64 + Send + Sync + 'static) -> Result<Self, KernelError> {
        let mut seq = Self::new((0..n).map(&f).collect())?;
        seq.extension = Some(Arc::new(f));
        Ok(seq)
    }

    /// `b_j = 1/∫ t^j φ(t) dt` by quadrature for `j < n`.
    pub fn from_phi(phi: &WeightedFunction, n: usize) -> Result<Self, KernelError> {
        let mut values = Vec::with_capacity(n);
        for j in 0..n {
            let r = integrate_real(|t| t.powi(j as i32) * phi.eval(t), phi.support.lo, phi.support.hi, INNER_TOL)?;
            if !r.converged {
                return Err(KernelError::NotConverged(r.error_estimate));
            }
            values.push(1.0 / r.value.re);
        }
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, j: usize) -> Result<f64, KernelError> {
        if let Some(v) = self.values.get(j) {
            return Ok(*v);
        }
        match &self.extension {
            Some(f) => {
                let v = f(j);
                if v > 0.0 && v.is_finite() {
                    Ok(v)
                } else {
                    Err(KernelError::Precondition(format!("b_{j} = {v} is not positive and finite")))
                }
            }
            None => Err(KernelError::Precondition(format!("b_{j} requested but only {} moments are known", self.values.len()))),
        }
    }
}

/// Laurent series `ψ(s) = Σ_{j ≥ j_min} c_j s^j` convergent on `r < |s| < R`.
#[derive(Clone)]
pub struct LaurentSeries {
    pub j_min: i64,
    /// `c_{j_min}, c_{j_min+1}, …` (a finite prefix).
    pub coeffs: Vec<f64>,
    pub annulus: (f64, f64),
    evaluator: Arc<SeriesFn>,
}

impl fmt::Debug for LaurentSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LaurentSeries(j_min={}, annulus={:?})", self.j_min, self.annulus)
    }
}

/// Number of stored Laurent coefficients.
const LAURENT_PREFIX: usize = 64;

impl LaurentSeries {
    pub fn new(
        j_min: i64,
        coeff: impl Fn(i64) -> f64,
        annulus: (f64, f64),
        evaluator: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static,
    ) -> Result<Self, KernelError> {
        if !(annulus.0 >= 0.0 && annulus.0 < annulus.1) {
            return Err(KernelError::Precondition(format!("empty annulus {annulus:?}")));
        }
        let coeffs = (0..LAURENT_PREFIX as i64).map(|i| coeff(j_min + i)).collect();
        Ok(LaurentSeries { j_min, coeffs, annulus, evaluator: Arc::new(evaluator) })
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        (self.evaluator)(s)
    }

    /// Stored coefficient of `s^j`; zero below `j_min`, `None` past the stored prefix.
    pub fn coeff(&self, j: i64) -> Option<f64> {
        if j < self.j_min {
            return Some(0.0);
        }
        self.coeffs.get((j - self.j_min) as usize).copied()
    }

    /// Checks `c_j = b_j` for `0 ≤ j < n`.
    pub fn check_moments(&self, b: &MomentSequence, n: usize) -> Result<(), KernelError> {
        for j in 0..n {
            let bj = b.get(j)?;
            let cj = self.coeff(j as i64).ok_or_else(|| KernelError::Precondition(format!("ψ coefficient {j} not stored")))?;
            if (cj - bj).abs() > 1e-12 * bj.abs() {
                return Err(KernelError::Precondition(format!("ψ coefficient {j} is {cj}, moment is {bj}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, s: Complex64) -> bool {
        let r = s.norm();
        r > self.annulus.0 && r < self.annulus.1
    }
}

/// Serializable transform description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformDescriptor {
    GueAdd {},
    Ginibre { nu: u32 },
    Truncated { nu: u32, mu: u32 },
    IteratedGinibre { nu: Vec<u32> },
    IteratedTruncated { nu: Vec<u32>, mu: Vec<u32> },
}

impl TransformDescriptor {
    pub fn build(&self) -> Result<TransformSpec, KernelError> {
        match self {
            TransformDescriptor::GueAdd {} => Ok(TransformSpec::gue_add()),
            TransformDescriptor::Ginibre { nu } => TransformSpec::ginibre(*nu),
            TransformDescriptor::Truncated { nu, mu } => TransformSpec::truncated(*nu, *mu),
            TransformDescriptor::IteratedGinibre { nu } => iterated_spec(IteratedKind::Ginibre, nu, &[]),
            TransformDescriptor::IteratedTruncated { nu, mu } => iterated_spec(IteratedKind::Truncated, nu, mu),
        }
    }
}

/// A `φ/ψ` transform.
#[derive(Clone, Debug)]
pub struct PhiTransform {
    pub phi: WeightedFunction,
    pub b: MomentSequence,
    pub psi: LaurentSeries,
    /// Contour `Σ` for the `s`-integrals; must lie in the annulus of `ψ`.
    pub sigma: Contour,
    pub label: String,
}

#[derive(Clone, Debug)]
pub enum TransformSpec {
    /// `H + M` with `H` from the GUE; `line` is the vertical contour of the inverse Weierstrass transform.
    GueAdd { line: Contour },
    Multiplicative(PhiTransform),
}

/// Vertical line `Re s = 0`, `|Im s| ≤ 12`.
fn default_line() -> Contour {
    Contour::vertical_line(0.0, 12.0, 64).expect("valid line")
}

fn circle(radius: f64) -> Contour {
    Contour::circle(Complex64::new(0.0, 0.0), radius, 32).expect("valid circle")
}

fn b_truncated(j: usize, nu: u32, mu: u32) -> f64 {
    // (j+ν+μ)!/((μ−1)!(j+ν)!)
    let rising: f64 = (1..=mu as usize).map(|i| (j + nu as usize + i) as f64).product();
    rising / factorial(mu as usize - 1)
}

impl TransformSpec {
    pub fn gue_add() -> Self {
        TransformSpec::GueAdd { line: default_line() }
    }

    /// `φ(t) = t^ν e^{−t}`, `b_j = 1/(j+ν)!`, `ψ(s) = s^{−ν} e^s`, `Σ` the unit circle.
    pub fn ginibre(nu: u32) -> Result<Self, KernelError> {
        let nf = nu as f64;
        let phi = WeightedFunction::new(Interval::HALF_LINE, format!("t^{nu}e^-t"), move |t| {
            if t == 0.0 { if nu == 0 { 1.0 } else { 0.0 } } else { (nf * t.ln() - t).exp() }
        });
        let b = MomentSequence::closed_form(64, move |j| (-log_factorial(j + nu as usize)).exp())?;
        let psi = LaurentSeries::new(
            -(nu as i64),
            move |j| {
                let k = j + nu as i64;
                if k < 0 { 0.0 } else { (-log_factorial(k as usize)).exp() }
            },
            (0.0, f64::INFINITY),
            move |s| s.powi(-(nu as i32)) * s.exp(),
        )?;
        Ok(TransformSpec::Multiplicative(PhiTransform { phi, b, psi, sigma: circle(1.0), label: format!("ginibre(nu={nu})") }))
    }

    /// `φ(t) = t^ν (1−t)^{μ−1}` on `[0,1]`, `ψ(s) = μ s^{−ν} (1−s)^{−μ−1}`, `Σ` the circle of radius 1/2.
    pub fn truncated(nu: u32, mu: u32) -> Result<Self, KernelError> {
        if mu < 1 {
            return Err(KernelError::Precondition("truncation requires μ = m−n−ν ≥ 1".into()));
        }
        let (nf, mf) = (nu as f64, mu as f64);
        let phi = WeightedFunction::new(Interval::UNIT, format!("t^{nu}(1-t)^{}", mu - 1), move |t| {
            t.powf(nf) * (1.0 - t).powf(mf - 1.0)
        });
        let b = MomentSequence::closed_form(64, move |j| b_truncated(j, nu, mu))?;
        let psi = LaurentSeries::new(
            -(nu as i64),
            move |j| {
                let k = j + nu as i64;
                if k < 0 { 0.0 } else { mf * binomial(k as usize + mu as usize, mu as usize) }
            },
            (0.0, 1.0),
            move |s| mf * s.powi(-(nu as i32)) * (1.0 - s).powi(-(mu as i32) - 1),
        )?;
        Ok(TransformSpec::Multiplicative(PhiTransform {
            phi,
            b,
            psi,
            sigma: circle(0.5),
            label: format!("truncated(nu={nu},mu={mu})"),
        }))
    }

    /// Arbitrary `φ/b/ψ` triple; `ψ` must reproduce `b_j` for `j < n` and contain `Σ` in its annulus.
    pub fn general(
        phi: WeightedFunction,
        b: MomentSequence,
        psi: LaurentSeries,
        sigma: Contour,
        label: impl Into<String>,
    ) -> Result<Self, KernelError> {
        if phi.support.lo < 0.0 {
            return Err(KernelError::Precondition("φ must be supported in [0, ∞)".into()));
        }
        psi.check_moments(&b, b.len().min(LAURENT_PREFIX))?;
        Ok(TransformSpec::Multiplicative(PhiTransform { phi, b, psi, sigma, label: label.into() }))
    }

    pub fn label(&self) -> &str {
        match self {
            TransformSpec::GueAdd { .. } => "gue-add",
            TransformSpec::Multiplicative(t) => &t.label,
        }
    }

    /// Replaces `Σ` (multiplicative) or the vertical line (GUE addition).
    pub fn with_contour(self, c: Contour) -> Self {
        match self {
            TransformSpec::GueAdd { .. } => TransformSpec::GueAdd { line: c },
            TransformSpec::Multiplicative(mut t) => {
                t.sigma = c;
                TransformSpec::Multiplicative(t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IteratedKind {
    Ginibre,
    Truncated,
}

/// Sums `Σ_{j ≥ 0} c_j s^j` given the ratio `c_{j+1}/c_j`.
fn ratio_series(c0: f64, ratio: impl Fn(usize) -> f64, s: Complex64) -> Complex64 {
    let mut term = Complex64::new(c0, 0.0);
    let mut sum = term;
    for j in 0..20_000 {
        term *= s * ratio(j);
        sum += term;
        if j > 8 && term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    sum
}

/// Single `φ/ψ` pair for a product of `r` Ginibre or truncated unitary factors.
///
/// Ginibre: `φ = G^{r,0}_{0,r}(−; ν | t)`, `ψ(s) = Σ_{j≥0} s^j / ∏(j+ν_k)!`.
/// Truncated: `φ = G^{r,0}_{r,r}(ν+μ; ν | t)`, `ψ(s) = Σ_{j≥0} ∏(j+ν_k+μ_k)!/(j+ν_k)! s^j`.
pub fn iterated_spec(kind: IteratedKind, nu: &[u32], mu: &[u32]) -> Result<TransformSpec, KernelError> {
    if nu.is_empty() {
        return Err(KernelError::Precondition("empty ν list".into()));
    }
    let nu_v: Vec<u32> = nu.to_vec();
    let nu_f: Vec<f64> = nu.iter().map(|&v| v as f64).collect();
    match kind {
        IteratedKind::Ginibre => {
            let g = MeijerGSpec::ginibre_phi(&nu_f);
            let phi = WeightedFunction::new(Interval::HALF_LINE, format!("G^{{{0},0}}_{{0,{0}}}", nu.len()), move |t| {
                if t <= 0.0 { 0.0 } else { meijer_g(&g, t).unwrap_or(f64::NAN) }
            });
            let nb = nu_v.clone();
            let bj = move |j: usize| (-nb.iter().map(|&v| log_factorial(j + v as usize)).sum::<f64>()).exp();
            let b = MomentSequence::closed_form(64, bj.clone())?;
            let (nr, c0) = (nu_v.clone(), bj(0));
            let psi = LaurentSeries::new(
                0,
                move |j| if j < 0 { 0.0 } else { bj(j as usize) },
                (0.0, f64::INFINITY),
                move |s| ratio_series(c0, |j| 1.0 / nr.iter().map(|&v| (j + 1 + v as usize) as f64).product::<f64>(), s),
            )?;
            Ok(TransformSpec::Multiplicative(PhiTransform {
                phi,
                b,
                psi,
                sigma: circle(1.0),
                label: format!("iterated-ginibre(nu={nu:?})"),
            }))
        }
        IteratedKind::Truncated => {
            if mu.len() != nu.len() {
                return Err(KernelError::Precondition("ν and μ lists differ in length".into()));
            }
            if mu.iter().any(|&m| m < 1) {
                return Err(KernelError::Precondition("every μ_k must be at least 1".into()));
            }
            let mu_f: Vec<f64> = mu.iter().map(|&v| v as f64).collect();
            let g = MeijerGSpec::truncated_phi(&nu_f, &mu_f);
            let phi = WeightedFunction::new(Interval::UNIT, format!("G^{{{0},0}}_{{{0},{0}}}", nu.len()), move |t| {
                if t <= 0.0 || t >= 1.0 { 0.0 } else { meijer_g(&g, t).unwrap_or(f64::NAN) }
            });
            let pairs: Vec<(usize, usize)> = nu.iter().zip(mu).map(|(&v, &m)| (v as usize, m as usize)).collect();
            let pb = pairs.clone();
            let bj = move |j: usize| -> f64 {
                pb.iter().map(|&(v, m)| (1..=m).map(|i| (j + v + i) as f64).product::<f64>()).product()
            };
            let b = MomentSequence::closed_form(64, bj.clone())?;
            let c0 = bj(0);
            let pr = pairs.clone();
            let psi = LaurentSeries::new(
                0,
                move |j| if j < 0 { 0.0 } else { bj(j as usize) },
                (0.0, 1.0),
                move |s| {
                    ratio_series(
                        c0,
                        |j| pr.iter().map(|&(v, m)| (j + 1 + v + m) as f64 / (j + 1 + v) as f64).product::<f64>(),
                        s,
                    )
                },
            )?;
            Ok(TransformSpec::Multiplicative(PhiTransform {
                phi,
                b,
                psi,
                sigma: circle(0.5),
                label: format!("iterated-truncated(nu={nu:?},mu={mu:?})"),
            }))
        }
    }
}

/// `L p = Σ a_j b_j x^j`.
pub fn op_l(p: &Polynomial, b: &MomentSequence) -> Result<Polynomial, KernelError> {
    let bs: Vec<f64> = (0..=p.degree()).map(|j| b.get(j)).collect::<Result<_, _>>()?;
    Ok(p.hadamard(&bs))
}

fn check_contour_in_annulus(psi: &LaurentSeries, sigma: &Contour) -> Result<(), KernelError> {
    if let Some((s, _)) = sigma.rule(sigma.node_count).into_iter().find(|(s, _)| !psi.contains(*s)) {
        return Err(KernelError::Precondition(format!(
            "contour node {s} lies outside the annulus {:?} of ψ",
            psi.annulus
        )));
    }
    Ok(())
}

/// `(1/2πi)∮_Σ ψ(s) p(x/s) ds/s`, with `x` complex.
pub fn op_l_contour_at(p: &Polynomial, psi: &LaurentSeries, sigma: &Contour, x: Complex64) -> Result<Complex64, KernelError> {
    let scale: f64 = 1.0
        + p.coefficients()
            .iter()
            .enumerate()
            .map(|(j, a)| a.norm() * psi.coeff(j as i64).unwrap_or(1.0).abs() * x.norm().powi(j as i32))
            .sum::<f64>();
    let r = integrate(|s| psi.eval(s) * p.eval(x / s) / s, sigma, CONTOUR_TOL * scale)?;
    if !r.converged {
        return Err(KernelError::NotConverged(r.error_estimate));
    }
    Ok(r.value / Complex64::new(0.0, 2.0 * PI))
}

/// `L p` through the contour integral, recovered from values at the `(d+1)`-th roots of unity.
pub fn op_l_contour(p: &Polynomial, psi: &LaurentSeries, sigma: &Contour) -> Result<Polynomial, KernelError> {
    check_contour_in_annulus(psi, sigma)?;
    let n = p.degree() + 1;
    let omega = |k: usize| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64);
    let values: Vec<Complex64> = (0..n).map(|k| op_l_contour_at(p, psi, sigma, omega(k))).collect::<Result<_, _>>()?;
    let coeffs = (0..n)
        .map(|j| values.iter().enumerate().map(|(k, v)| v * omega(k).powi(-(j as i32))).sum::<Complex64>() / n as f64)
        .collect();
    Ok(Polynomial::new(coeffs))
}

/// `E p(x + iZ)` for a standard normal `Z`: the inverse Weierstrass transform in closed form.
pub fn inv_weierstrass(p: &Polynomial) -> Polynomial {
    gaussian_smoothing(p, -1.0)
}

/// `E p(x + Z)`: the Weierstrass transform restricted to polynomials.
pub fn weierstrass_poly(p: &Polynomial) -> Polynomial {
    gaussian_smoothing(p, 1.0)
}

fn gaussian_smoothing(p: &Polynomial, sign: f64) -> Polynomial {
    // x^k ↦ Σ_{m even} C(k,m) (m−1)!! sign^{m/2} x^{k−m}
    let d = p.degree();
    let mut out = vec![Complex64::new(0.0, 0.0); d + 1];
    for (k, a) in p.coefficients().iter().enumerate() {
        let mut moment = 1.0;
        for m in (0..=k).step_by(2) {
            if m > 0 {
                moment *= (m - 1) as f64 * sign;
            }
            out[k - m] += a * binomial(k, m) * moment;
        }
    }
    Polynomial::new(out)
}

/// `(2π)^{-1/2} i^{-1} ∫_line p(s) e^{(x−s)²/2} ds`, the line-integral form of `inv_weierstrass`.
/// A vertical line is translated to the saddle `Re s = Re x`, where the integrand is
/// `p(x + iτ) e^{−τ²/2}` without oscillation; the value does not depend on the abscissa.
pub fn inv_weierstrass_line(p: &Polynomial, x: Complex64, line: &Contour) -> Result<Complex64, KernelError> {
    let centered;
    let line = match line.kind {
        ContourKind::VerticalLine { half_height, .. } => {
            centered = Contour {
                kind: ContourKind::VerticalLine { abscissa: x.re, half_height },
                node_count: line.node_count,
                max_nodes: line.max_nodes,
            };
            &centered
        }
        _ => line,
    };
    let scale = 1.0 + p.coefficients().iter().enumerate().map(|(j, a)| a.norm() * (x.norm() + 3.0).powi(j as i32)).sum::<f64>();
    let r = integrate(|s| p.eval(s) * ((x - s) * (x - s) / 2.0).exp(), line, CONTOUR_TOL * scale)?;
    if !r.converged {
        return Err(KernelError::NotConverged(r.error_estimate));
    }
    Ok(r.value / Complex64::new(0.0, (2.0 * PI).sqrt()))
}

fn weierstrass_at(q: &WeightedFunction, y: f64) -> Result<f64, KernelError> {
    let (lo, hi) = (q.support.lo, q.support.hi);
    let c = y.clamp(lo, hi);
    let g = |t: f64| q.eval(t) * (-(y - t) * (y - t) / 2.0).exp();
    let mut total = 0.0;
    for (a, b) in [(lo, c), (c, hi)] {
        if a < b {
            let r = integrate_real(g, a, b, INNER_TOL)?;
            if !r.converged {
                return Err(KernelError::NotConverged(r.error_estimate));
            }
            total += r.value.re;
        }
    }
    Ok(total / (2.0 * PI).sqrt())
}

/// `W q(y) = (2π)^{-1/2} ∫ q(t) e^{-(y-t)²/2} dt`; evaluates to NaN where the quadrature fails.
pub fn weierstrass(q: &WeightedFunction) -> WeightedFunction {
    let q = q.clone();
    WeightedFunction::new(Interval::REAL_LINE, format!("W[{}]", q.tag), move |y| weierstrass_at(&q, y).unwrap_or(f64::NAN))
}

fn transform_dual_gaussian(q: &DualFunction) -> DualFunction {
    match q {
        DualFunction::Function(f) => DualFunction::Function(weierstrass(f)),
        DualFunction::Atomic(row) => {
            let atoms = row.atoms.clone();
            DualFunction::Function(WeightedFunction::new(Interval::REAL_LINE, "W[atoms]", move |y| {
                atoms.iter().map(|&(a, w)| w * (-(y - a) * (y - a) / 2.0).exp()).sum::<f64>() / (2.0 * PI).sqrt()
            }))
        }
    }
}

/// Range of `t` with `t ∈ supp φ` and `y/t ∈ supp f`, for `y > 0`.
fn mellin_range(f: Interval, phi: Interval, y: f64) -> (f64, f64) {
    let lo = if f.hi.is_finite() { y / f.hi } else { 0.0 };
    let hi = if f.lo > 0.0 { y / f.lo } else { f64::INFINITY };
    (lo.max(phi.lo), hi.min(phi.hi))
}

/// `∫ φ(t) f(y/t) dt/t` at one point, computed in `u = ln t`. Integrals whose integrand
/// `φ(t) f(y/t)` does not vanish at an unbounded end of the `u`-range are flagged as divergent.
pub fn mellin_convolve_at(f: &WeightedFunction, phi: &WeightedFunction, y: f64) -> Result<f64, KernelError> {
    if y <= 0.0 {
        return Ok(0.0);
    }
    let (lo, hi) = mellin_range(f.support, phi.support, y);
    if !(lo < hi) {
        return Ok(0.0);
    }
    let h = |u: f64| {
        let t = u.exp();
        let a = phi.eval(t);
        if a == 0.0 { 0.0 } else { a * f.eval(y / t) }
    };
    let (a, b) = (lo.ln(), hi.ln());
    for u in [(a == f64::NEG_INFINITY, -230.0), (b == f64::INFINITY, 230.0)].iter().filter(|e| e.0).map(|e| e.1) {
        let v = h(u);
        if v != 0.0 && v.is_finite() {
            let near = h(u / 2.0);
            if v.abs() >= 1e-3 * near.abs() {
                return Err(KernelError::Divergent(format!("φ(t)f(y/t) = {v:e} at ln t = {u} for y = {y}")));
            }
        }
    }
    // |ln t| ≤ 700 keeps t and y/t representable; the tails beyond were checked above
    let (a, b) = (a.max(-700.0), b.min(700.0));
    let (a, b) = effective_range(&h, a, b, (0.5 * y.ln()).clamp(a, b));
    let r = integrate_adaptive(h, a, b, INNER_TOL, 1.0)?;
    if !r.converged {
        return Err(KernelError::NotConverged(r.error_estimate));
    }
    let total = r.value.re;
    Ok(total)
}

/// Sub-interval of `[a, b]` outside which `|h|` stays below `1e-24` of its largest sampled value,
/// found by stepping outward from `c` in steps of 1/2.
fn effective_range(h: &impl Fn(f64) -> f64, a: f64, b: f64, c: f64) -> (f64, f64) {
    const STEP: f64 = 0.5;
    const QUIET: usize = 8;
    let mut peak = h(c).abs();
    let scan = |dir: f64, end: f64, peak: &mut f64| -> f64 {
        let mut u = c;
        let mut last_loud = c;
        let mut quiet = 0;
        while (end - u) * dir > 0.0 {
            u = if (end - u) * dir > STEP { u + dir * STEP } else { end };
            let v = h(u).abs();
            if v > *peak {
                *peak = v;
            }
            if v > 1e-24 * *peak || !v.is_finite() {
                last_loud = u;
                quiet = 0;
            } else {
                quiet += 1;
                if quiet >= QUIET {
                    return last_loud + dir * STEP;
                }
            }
        }
        end
    };
    let hi = scan(1.0, b, &mut peak);
    let lo = scan(-1.0, a, &mut peak);
    (lo.max(a), hi.min(b))
}

/// Mellin convolution `∫ φ(t) f(y/t) dt/t`. Atomic arguments are handled exactly:
/// `δ_a` against `φ` gives `φ(y/a)/a`, and `δ_a ∗ δ_b = δ_{ab}`.
pub fn mellin_convolve(f: &DualFunction, phi: &DualFunction) -> Result<DualFunction, KernelError> {
    let check = |s: Interval| {
        if s.lo < 0.0 {
            Err(KernelError::Precondition("Mellin convolution needs functions on [0, ∞)".into()))
        } else {
            Ok(())
        }
    };
    let support = |a: Interval, b: Interval| Interval { lo: 0.0, hi: a.hi * b.hi };
    Ok(match (f, phi) {
        (DualFunction::Function(f), DualFunction::Function(phi)) => {
            check(f.support)?;
            check(phi.support)?;
            let (f, phi) = (f.clone(), phi.clone());
            DualFunction::Function(WeightedFunction::new(
                support(f.support, phi.support),
                format!("{}*{}", phi.tag, f.tag),
                move |y| mellin_convolve_at(&f, &phi, y).unwrap_or(f64::NAN),
            ))
        }
        (DualFunction::Atomic(row), DualFunction::Function(g)) | (DualFunction::Function(g), DualFunction::Atomic(row)) => {
            check(g.support)?;
            if row.atoms.iter().any(|&(a, _)| a <= 0.0) {
                return Err(KernelError::Precondition("atoms must be positive".into()));
            }
            let hi = row.atoms.iter().fold(0.0f64, |m, &(a, _)| m.max(a)) * g.support.hi;
            let (row, g) = (row.clone(), g.clone());
            DualFunction::Function(WeightedFunction::new(Interval { lo: 0.0, hi }, format!("{}*atoms", g.tag), move |y| {
                row.atoms.iter().map(|&(a, w)| w * g.eval(y / a) / a).sum()
            }))
        }
        (DualFunction::Atomic(r1), DualFunction::Atomic(r2)) => {
            let mut atoms = Vec::new();
            for &(a, w) in &r1.atoms {
                for &(b, v) in &r2.atoms {
                    atoms.push((a * b, w * v));
                }
            }
            DualFunction::Atomic(AtomicMeasureRow { atoms })
        }
    })
}

/// `Q_k` from `q_k` under the transform.
pub fn transform_dual(q: &DualFunction, spec: &TransformSpec) -> Result<DualFunction, KernelError> {
    match spec {
        TransformSpec::GueAdd { .. } => Ok(transform_dual_gaussian(q)),
        TransformSpec::Multiplicative(t) => mellin_convolve(q, &DualFunction::Function(t.phi.clone())),
    }
}

/// `P_k` from `p_k`: inverse Weierstrass transform or `L`.
pub fn transform_polynomial(p: &Polynomial, spec: &TransformSpec) -> Result<Polynomial, KernelError> {
    match spec {
        TransformSpec::GueAdd { .. } => {
            if !p.has_real_coefficients() {
                return Err(KernelError::Precondition("GUE addition needs real polynomials".into()));
            }
            Ok(inv_weierstrass(p))
        }
        TransformSpec::Multiplicative(t) => op_l(p, &t.b),
    }
}

fn transformed_support(base: Interval, spec: &TransformSpec) -> Result<Interval, KernelError> {
    match spec {
        TransformSpec::GueAdd { .. } => Ok(Interval::REAL_LINE),
        TransformSpec::Multiplicative(t) => {
            if base.lo < 0.0 {
                return Err(KernelError::Precondition(format!(
                    "multiplicative transforms need an ensemble on [0, ∞), got [{}, {}]",
                    base.lo, base.hi
                )));
            }
            Ok(Interval { lo: 0.0, hi: base.hi * t.phi.support.hi })
        }
    }
}

/// Biorthogonal system of the transformed ensemble.
pub fn transform_system(sys: &BiorthogonalSystem, spec: &TransformSpec) -> Result<BiorthogonalSystem, KernelError> {
    let support = transformed_support(sys.support, spec)?;
    let p = sys.p.iter().map(|p| transform_polynomial(p, spec)).collect::<Result<Vec<_>, _>>()?;
    let q = sys.q.iter().map(|q| transform_dual(q, spec)).collect::<Result<Vec<_>, _>>()?;
    BiorthogonalSystem::new(p, q, support, format!("{}∘{}", spec.label(), sys.label))
}

/// Functions `F_k` of the transformed ensemble; `Z_n` is left unknown.
pub fn transformed_density(ens: &PolynomialEnsemble, spec: &TransformSpec) -> Result<PolynomialEnsemble, KernelError> {
    let support = transformed_support(ens.support, spec)?;
    let f = ens
        .f
        .iter()
        .map(|fk| match spec {
            TransformSpec::GueAdd { .. } => {
                // F_k = √(2π) W f_k
                let w = weierstrass(fk);
                Ok(WeightedFunction::new(Interval::REAL_LINE, format!("F[{}]", fk.tag), move |y| (2.0 * PI).sqrt() * w.eval(y)))
            }
            TransformSpec::Multiplicative(t) => match mellin_convolve(&DualFunction::Function(fk.clone()), &DualFunction::Function(t.phi.clone()))? {
                DualFunction::Function(g) => Ok(g),
                DualFunction::Atomic(_) => unreachable!("function inputs give a function"),
            },
        })
        .collect::<Result<Vec<_>, KernelError>>()?;
    Ok(PolynomialEnsemble { n: ens.n, support, f, normalization: None, descriptor: None })
}

/// Average characteristic polynomial of the transformed ensemble from the monic `p_n` of the base.
pub fn avg_char_poly_transformed(p_n: &Polynomial, spec: &TransformSpec) -> Result<Polynomial, KernelError> {
    if !p_n.is_monic() {
        return Err(KernelError::Precondition("p_n must be monic".into()));
    }
    match spec {
        TransformSpec::GueAdd { .. } => transform_polynomial(p_n, spec),
        TransformSpec::Multiplicative(t) => {
            // (1/b_n) L p_n, written with ratios so the leading coefficient is exactly 1
            let n = p_n.degree();
            let bn = t.b.get(n)?;
            let ratios: Vec<f64> = (0..=n).map(|j| Ok(t.b.get(j)? / bn)).collect::<Result<_, KernelError>>()?;
            Ok(p_n.hadamard(&ratios))
        }
    }
}

/// The same, through the contour integral with `ψ` and the normalizing factor `1/b_n`.
pub fn avg_char_poly_contour(p_n: &Polynomial, t: &PhiTransform) -> Result<Polynomial, KernelError> {
    let bn = t.b.get(p_n.degree())?;
    Ok(op_l_contour(p_n, &t.psi, &t.sigma)?.scale(Complex64::new(1.0 / bn, 0.0)))
}

/// How `transform_kernel` evaluates the double integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelRoute {
    /// Separable kernels: the `t`-integrals are done per dual function, then one `s`-integral.
    #[default]
    Factorized,
    /// Full tensor-product quadrature of the double integral.
    DoubleIntegral,
}

/// Correlation kernel of the transformed ensemble from the base kernel.
pub fn transform_kernel(k: &CorrelationKernel, spec: &TransformSpec) -> Result<CorrelationKernel, KernelError> {
    transform_kernel_with(k, spec, KernelRoute::Factorized)
}

pub fn transform_kernel_with(
    k: &CorrelationKernel,
    spec: &TransformSpec,
    route: KernelRoute,
) -> Result<CorrelationKernel, KernelError> {
    let support = transformed_support(k.support, spec)?;
    if let TransformSpec::Multiplicative(t) = spec {
        check_contour_in_annulus(&t.psi, &t.sigma)?;
    }
    let label = format!("{}∘{}", spec.label(), k.label);
    let atomic = k.is_atomic();
    let mut out = match (&k.form, route) {
        (KernelForm::Sum { p, q }, KernelRoute::Factorized) | (KernelForm::Sum { p, q }, KernelRoute::DoubleIntegral)
            if atomic || route == KernelRoute::Factorized =>
        {
            factorized_kernel(p.clone(), q, spec, k.n, support, label)?
        }
        _ => double_integral_kernel(k.clone(), spec.clone(), support, label),
    };
    out.gauge_exponent = k.gauge_exponent;
    if let (TransformSpec::Multiplicative(t), KernelForm::Sum { q, .. }) = (spec, &k.form) {
        // image of an atom a under y ↦ a·t has kinks at a·(ends of supp φ)
        for row in q.iter().filter_map(|qj| match qj {
            DualFunction::Atomic(r) => Some(r),
            DualFunction::Function(_) => None,
        }) {
            for &(a, _) in &row.atoms {
                out.breakpoints.extend([a * t.phi.support.lo, a * t.phi.support.hi].into_iter().filter(|b| b.is_finite()));
            }
        }
    }
    Ok(out)
}

fn factorized_kernel(
    p: Vec<Polynomial>,
    q: &[DualFunction],
    spec: &TransformSpec,
    n: usize,
    support: Interval,
    label: String,
) -> Result<CorrelationKernel, KernelError> {
    let tq: Vec<WeightedFunction> = q
        .iter()
        .map(|qj| match transform_dual(qj, spec)? {
            DualFunction::Function(f) => Ok(f),
            DualFunction::Atomic(_) => Err(KernelError::Unsupported("atomic φ".into())),
        })
        .collect::<Result<_, KernelError>>()?;
    let spec = spec.clone();
    Ok(CorrelationKernel::from_evaluator(n, support, label, move |x, y| {
        let mut combo = Polynomial::zero();
        for (pj, qj) in p.iter().zip(&tq) {
            let v = qj.eval(y);
            if !v.is_finite() {
                return Err(KernelError::NotConverged(f64::NAN));
            }
            combo = combo.add(&pj.scale(Complex64::new(v, 0.0)));
        }
        match &spec {
            TransformSpec::GueAdd { line } => inv_weierstrass_line(&combo, x, line),
            TransformSpec::Multiplicative(t) => op_l_contour_at(&combo, &t.psi, &t.sigma, x),
        }
    }))
}

fn t_contour(lo: f64, hi: f64) -> Result<Contour, KernelError> {
    Ok(if hi.is_finite() { Contour::tanh_sinh(lo, hi, 64)? } else { Contour::exp_sinh(lo, 64)? })
}

fn double_integral_kernel(k: CorrelationKernel, spec: TransformSpec, support: Interval, label: String) -> CorrelationKernel {
    let n = k.n;
    CorrelationKernel::from_evaluator(n, support, label, move |x, y| {
        let failure: RefCell<Option<KernelError>> = RefCell::new(None);
        let record = |e: KernelError| {
            failure.borrow_mut().get_or_insert(e);
            Complex64::new(0.0, 0.0)
        };
        let r = match &spec {
            TransformSpec::GueAdd { line } => {
                let tline = Contour::new(ContourKind::RealLine { center: y, half_width: 16.0 }, 64)?;
                integrate_double(
                    |s, t| match k.eval_complex(s, t.re) {
                        Ok(v) => v * (((x - s) * (x - s) - (y - t) * (y - t)) / 2.0).exp(),
                        Err(e) => record(e),
                    },
                    line,
                    &tline,
                    1e-12,
                    false,
                )?
            }
            TransformSpec::Multiplicative(tr) => {
                if y <= 0.0 {
                    return Ok(Complex64::new(0.0, 0.0));
                }
                let (lo, hi) = mellin_range(k.support, tr.phi.support, y);
                if !(lo < hi) {
                    return Ok(Complex64::new(0.0, 0.0));
                }
                integrate_double(
                    |s, t| match k.eval_complex(x / s, y / t.re) {
                        Ok(v) => v * tr.psi.eval(s) * tr.phi.eval(t.re) / (s * t.re),
                        Err(e) => record(e),
                    },
                    &tr.sigma,
                    &t_contour(lo, hi)?,
                    1e-12,
                    false,
                )?
            }
        };
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        if !r.converged {
            return Err(KernelError::NotConverged(r.error_estimate));
        }
        Ok(r.value / Complex64::new(0.0, 2.0 * PI))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{
        degenerate_ensemble, gue_ensemble, identity_defect, jacobi_ensemble, kernel_from_system, laguerre_ensemble,
        max_determinant_discrepancy, DegenerateVariant,
    };
    use crate::linalg::RandomStream;
    use crate::poly::{hermite_monic, laguerre_monic};
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn phi_of(spec: &TransformSpec) -> &PhiTransform {
        match spec {
            TransformSpec::Multiplicative(t) => t,
            _ => panic!("multiplicative transform expected"),
        }
    }

    fn max_coeff_diff(a: &Polynomial, b: &Polynomial) -> f64 {
        (0..=a.degree().max(b.degree())).map(|j| (a.coeff(j) - b.coeff(j)).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn mellin_convolution_examples() {
        let phi = DualFunction::Function(WeightedFunction::new(Interval::HALF_LINE, "e^-t", |t| (-t).exp()));
        let delta = DualFunction::Atomic(AtomicMeasureRow { atoms: vec![(2.0, 1.0)] });
        let DualFunction::Function(f) = mellin_convolve(&delta, &phi).unwrap() else { panic!() };
        assert!((f.eval(0.0) - 0.5).abs() < 1e-15);
        assert!((f.eval(1.0) - (-0.5f64).exp() / 2.0).abs() < 1e-15);

        // identity element δ_1
        let g = WeightedFunction::new(Interval::HALF_LINE, "x e^-x", |x| x * (-x).exp());
        let one = DualFunction::Atomic(AtomicMeasureRow { atoms: vec![(1.0, 1.0)] });
        let DualFunction::Function(h) = mellin_convolve(&DualFunction::Function(g.clone()), &one).unwrap() else { panic!() };
        for y in [0.3, 1.0, 4.0] {
            assert_eq!(h.eval(y), g.eval(y));
        }

        // moments: ∫ y^k (φ ∗ f)(y) dy = b_k^{-1} ∫ x^k f(x) dx
        let phi1 = WeightedFunction::new(Interval::HALF_LINE, "t e^-t", |t| t * (-t).exp());
        let DualFunction::Function(m) = mellin_convolve(&DualFunction::Function(g.clone()), &DualFunction::Function(phi1)).unwrap() else {
            panic!()
        };
        let r = integrate_real(|y| y * m.eval(y), 0.0, f64::INFINITY, 1e-12).unwrap();
        assert!((r.value.re - 2.0 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn mellin_divergence_is_flagged() {
        let f = WeightedFunction::new(Interval::HALF_LINE, "x", |x| x);
        let phi = WeightedFunction::new(Interval::HALF_LINE, "t e^-t", |t| t * (-t).exp());
        assert!(matches!(mellin_convolve_at(&f, &phi, 1.0), Err(KernelError::Divergent(_))));
        let DualFunction::Function(g) = mellin_convolve(&DualFunction::Function(f), &DualFunction::Function(phi)).unwrap() else {
            panic!()
        };
        assert!(g.eval(1.0).is_nan());
    }

    #[test]
    fn op_l_examples() {
        let TransformSpec::Multiplicative(g0) = TransformSpec::ginibre(0).unwrap() else { panic!() };
        let p = op_l(&Polynomial::monomial(2), &g0.b).unwrap();
        assert!((p.coeff(2).re - 0.5).abs() < 1e-15 && p.degree() == 2);
        assert!((op_l(&Polynomial::one(), &g0.b).unwrap().coeff(0).re - 1.0).abs() < 1e-15);
        let TransformSpec::Multiplicative(t) = TransformSpec::truncated(0, 2).unwrap() else { panic!() };
        assert!((op_l(&Polynomial::monomial(1), &t.b).unwrap().coeff(1).re - 6.0).abs() < 1e-13);
        assert!(MomentSequence::new(vec![1.0]).unwrap().get(3).is_err());
        assert!(MomentSequence::new(vec![0.0]).is_err());
    }

    #[test]
    fn op_l_contour_matches_coefficients() {
        let g1 = TransformSpec::ginibre(1).unwrap();
        let t = phi_of(&g1);
        let x = Polynomial::monomial(1);
        let pc = op_l_contour(&x, &t.psi, &t.sigma).unwrap();
        assert!(max_coeff_diff(&pc, &Polynomial::from_real(&[0.0, 0.5])) < 1e-10);
        let one = op_l_contour(&Polynomial::one(), &t.psi, &t.sigma).unwrap();
        assert!((one.coeff(0) - c(1.0)).norm() < 1e-10);

        let tr = TransformSpec::truncated(1, 1).unwrap();
        let t = phi_of(&tr);
        let p = Polynomial::from_real(&[1.0, -2.0, 1.0]);
        assert!(max_coeff_diff(&op_l_contour(&p, &t.psi, &t.sigma).unwrap(), &op_l(&p, &t.b).unwrap()) < 1e-9);

        for spec in [TransformSpec::ginibre(2).unwrap(), TransformSpec::truncated(2, 3).unwrap()] {
            let t = phi_of(&spec);
            for k in 0..6 {
                let p = laguerre_monic(k, 1);
                let d = max_coeff_diff(&op_l_contour(&p, &t.psi, &t.sigma).unwrap(), &op_l(&p, &t.b).unwrap());
                let scale = op_l(&p, &t.b).unwrap().coefficients().iter().map(|z| z.norm()).fold(1.0, f64::max);
                assert!(d < 1e-9 * scale, "{} k={k}: {d:e}", t.label);
            }
        }
    }

    #[test]
    fn contour_outside_annulus_is_rejected() {
        let tr = TransformSpec::truncated(0, 2).unwrap().with_contour(circle(1.5));
        let t = phi_of(&tr);
        assert!(matches!(op_l_contour(&Polynomial::monomial(1), &t.psi, &t.sigma), Err(KernelError::Precondition(_))));
    }

    #[test]
    fn psi_beyond_known_moments_is_irrelevant() {
        // altering ψ in powers s^j with j < 0 or j ≥ n leaves P_k (deg < n) unchanged
        let g = TransformSpec::ginibre(1).unwrap();
        let t = phi_of(&g);
        let base = t.psi.clone();
        let coeffs = base.clone();
        let altered = LaurentSeries::new(-3, |j| coeffs.coeff(j).unwrap_or(0.0), base.annulus, move |s| {
            base.eval(s) + 7.0 * s.powi(-3) - 2.5 * s.powi(4)
        })
        .unwrap();
        for k in 0..4 {
            let p = laguerre_monic(k, 0);
            let d = max_coeff_diff(&op_l_contour(&p, &altered, &t.sigma).unwrap(), &op_l(&p, &t.b).unwrap());
            assert!(d < 1e-10);
        }
    }

    #[test]
    fn inverse_weierstrass_examples() {
        let x2 = Polynomial::monomial(2);
        assert_eq!(inv_weierstrass(&x2), Polynomial::from_real(&[-1.0, 0.0, 1.0]));
        assert_eq!(inv_weierstrass(&Polynomial::one()), Polynomial::one());
        assert_eq!(inv_weierstrass(&Polynomial::monomial(1)), Polynomial::monomial(1));
        let line = default_line();
        for k in 0..7 {
            let p = hermite_monic(k).add(&Polynomial::from_real(&[0.3, -1.0]));
            assert!(max_coeff_diff(&weierstrass_poly(&inv_weierstrass(&p)), &p) < 1e-12);
            assert!(inv_weierstrass(&p).is_monic() || k < 2);
            for x in [-1.5, 0.0, 0.7, 2.2] {
                let v = inv_weierstrass_line(&p, c(x), &line).unwrap();
                assert!((v - inv_weierstrass(&p).eval(c(x))).norm() < 1e-10 * (1.0 + x.abs()).powi(k as i32));
            }
        }
    }

    #[test]
    fn line_abscissa_does_not_matter() {
        let p = hermite_monic(4);
        for a in [-1.0, 0.5, 2.0] {
            let line = Contour::vertical_line(a, 14.0, 64).unwrap();
            let v = inv_weierstrass_line(&p, c(1.3), &line).unwrap();
            assert!((v - inv_weierstrass(&p).eval(c(1.3))).norm() < 1e-9);
        }
    }

    #[test]
    fn weierstrass_examples() {
        let gauss = WeightedFunction::new(Interval::REAL_LINE, "N(0,1)", |t| (-t * t / 2.0).exp() / (2.0 * PI).sqrt());
        assert!((weierstrass(&gauss).eval(0.0) - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-10);
        let one = WeightedFunction::new(Interval::REAL_LINE, "1", |_| 1.0);
        for y in [-3.0, 0.0, 5.0] {
            assert!((weierstrass(&one).eval(y) - 1.0).abs() < 1e-10);
        }
        let atom = DualFunction::Atomic(AtomicMeasureRow { atoms: vec![(0.5, 1.0)] });
        let DualFunction::Function(w) = transform_dual(&atom, &TransformSpec::gue_add()).unwrap() else { panic!() };
        assert_eq!(w.eval(1.5), (-0.5f64).exp() / (2.0 * PI).sqrt());
    }

    fn assert_gram_identity(sys: &BiorthogonalSystem, tol: f64) {
        let (off, diag) = identity_defect(&sys.gram(1e-12).unwrap());
        assert!(off < tol && diag < tol, "{}: off {off:e}, diag {diag:e}", sys.label);
    }

    #[test]
    fn gram_preserved_by_gue_addition() {
        for n in [1, 3, 5] {
            let (_, sys) = gue_ensemble(n).unwrap();
            let t = transform_system(&sys, &TransformSpec::gue_add()).unwrap();
            assert!(t.p.iter().all(Polynomial::is_monic));
            assert_gram_identity(&t, 1e-8);
        }
    }

    #[test]
    fn gram_preserved_by_multiplicative_transforms() {
        let (_, sys) = laguerre_ensemble(3, 0).unwrap();
        assert_gram_identity(&transform_system(&sys, &TransformSpec::ginibre(1).unwrap()).unwrap(), 1e-8);
        let (_, sys) = laguerre_ensemble(4, 2).unwrap();
        assert_gram_identity(&transform_system(&sys, &TransformSpec::truncated(1, 2).unwrap()).unwrap(), 1e-8);
        let (_, sys) = jacobi_ensemble(3, 1, 9).unwrap();
        assert_gram_identity(&transform_system(&sys, &TransformSpec::truncated(0, 3).unwrap()).unwrap(), 1e-8);
        let sys = degenerate_ensemble(&[1.0, 2.0, 4.0], DegenerateVariant::Monic).unwrap();
        assert_gram_identity(&transform_system(&sys, &TransformSpec::ginibre(0).unwrap()).unwrap(), 1e-8);
    }

    #[test]
    fn gue_plus_gue_is_rescaled_gue() {
        let (_, sys) = gue_ensemble(2).unwrap();
        let k = transform_kernel(&kernel_from_system(&sys).unwrap(), &TransformSpec::gue_add()).unwrap();
        let base = kernel_from_system(&sys).unwrap();
        let scaled = CorrelationKernel::from_evaluator(2, Interval::REAL_LINE, "sqrt2-gue", move |x, y| {
            let r = 2f64.sqrt();
            Ok(c(base.eval(x.re / r, y / r)? / r))
        });
        let sets = vec![vec![0.3, -1.2], vec![1.9, 0.1], vec![-0.4, 0.8, 2.5], vec![0.0]];
        assert!(max_determinant_discrepancy(&k, &scaled, &sets).unwrap() < 1e-7);
    }

    #[test]
    fn transformed_kernel_routes_agree() {
        let (_, sys) = laguerre_ensemble(2, 0).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        let spec = TransformSpec::ginibre(1).unwrap();
        let fact = transform_kernel(&k, &spec).unwrap();
        let dbl = transform_kernel_with(&k, &spec, KernelRoute::DoubleIntegral).unwrap();
        let sum = kernel_from_system(&transform_system(&sys, &spec).unwrap()).unwrap();
        let sets = vec![vec![0.5, 2.0], vec![1.3], vec![0.2, 1.1, 3.7]];
        assert!(max_determinant_discrepancy(&fact, &sum, &sets).unwrap() < 1e-6);
        assert!(max_determinant_discrepancy(&dbl, &sum, &sets).unwrap() < 1e-6);
        assert!((fact.trace(1e-9).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gue_double_integral_route() {
        let (_, sys) = gue_ensemble(2).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        let spec = TransformSpec::gue_add();
        let dbl = transform_kernel_with(&k, &spec, KernelRoute::DoubleIntegral).unwrap();
        let fact = transform_kernel(&k, &spec).unwrap();
        let sets = vec![vec![0.4, -1.0], vec![1.2]];
        assert!(max_determinant_discrepancy(&dbl, &fact, &sets).unwrap() < 1e-6);
    }

    #[test]
    fn atomic_base_kernel_transforms() {
        let sys = degenerate_ensemble(&[1.0, 2.0], DegenerateVariant::Lagrange).unwrap();
        let k = kernel_from_system(&sys).unwrap();
        let spec = TransformSpec::truncated(0, 2).unwrap();
        let kt = transform_kernel(&k, &spec).unwrap();
        let sum = kernel_from_system(&transform_system(&sys, &spec).unwrap()).unwrap();
        let sets = vec![vec![0.3, 1.1], vec![0.8], vec![0.1, 0.9, 1.6]];
        assert!(max_determinant_discrepancy(&kt, &sum, &sets).unwrap() < 1e-8);
        assert_eq!(kt.eval(2.5, 0.4).unwrap(), 0.0);
        assert!((kt.trace(1e-10).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn transformed_density_examples() {
        let (ens, _) = laguerre_ensemble(1, 0).unwrap();
        let t = transformed_density(&ens, &TransformSpec::ginibre(0).unwrap()).unwrap();
        let direct = integrate_real(|s| (-s).exp() * (-1.0 / s).exp() / s, 0.0, f64::INFINITY, 1e-14).unwrap().value.re;
        assert!((t.f[0].eval(1.0) - direct).abs() < 1e-9);
        assert!((t.f[0].eval(1.0) - 0.2277877454990670).abs() < 1e-9);
        assert!(t.normalization.is_none());

        let (ens, _) = gue_ensemble(3).unwrap();
        let t = transformed_density(&ens, &TransformSpec::gue_add()).unwrap();
        for x in [-4.0, -1.0, 0.0, 2.5] {
            assert!(t.f.iter().all(|f| f.eval(x).is_finite()));
        }
        // f_0 = e^{-x²/2} ↦ √(2π) W f_0 = √π e^{-y²/4}
        assert!((t.f[0].eval(1.0) - PI.sqrt() * (-0.25f64).exp()).abs() < 1e-10);

        let (ens, _) = jacobi_ensemble(2, 0, 5).unwrap();
        let t = transformed_density(&ens, &TransformSpec::truncated(0, 1).unwrap()).unwrap();
        assert_eq!(t.support.hi, 1.0);
        assert_eq!(t.f[1].eval(1.2), 0.0);
        assert!(t.f[1].eval(0.5) > 0.0);
        assert!(transformed_density(&gue_ensemble(2).unwrap().0, &TransformSpec::ginibre(0).unwrap()).is_err());
    }

    #[test]
    fn average_characteristic_polynomial() {
        let g = TransformSpec::ginibre(0).unwrap();
        let p = Polynomial::from_real(&[-1.0, 1.0]);
        assert_eq!(avg_char_poly_transformed(&p, &g).unwrap(), Polynomial::from_real(&[-1.0, 1.0]));
        assert!(avg_char_poly_transformed(&Polynomial::from_real(&[1.0, 2.0]), &g).is_err());
        let specs = [TransformSpec::gue_add(), g.clone(), TransformSpec::truncated(1, 2).unwrap()];
        for n in 1..=5 {
            let p = laguerre_monic(n, 1);
            for spec in &specs {
                let pn = avg_char_poly_transformed(&p, spec).unwrap();
                assert_eq!(pn.leading(), c(1.0));
                if let TransformSpec::Multiplicative(t) = spec {
                    let pc = avg_char_poly_contour(&p, t).unwrap();
                    let scale = pn.coefficients().iter().map(|z| z.norm()).fold(1.0, f64::max);
                    assert!(max_coeff_diff(&pc, &pn) < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn iterated_single_factor_reduces() {
        for nu in [0u32, 2] {
            let it = iterated_spec(IteratedKind::Ginibre, &[nu], &[]).unwrap();
            let (ti, tg) = (phi_of(&it), phi_of(&TransformSpec::ginibre(nu).unwrap()).clone());
            for t in [0.1, 1.0, 3.5] {
                assert!((ti.phi.eval(t) - tg.phi.eval(t)).abs() < 1e-10 * (1.0 + tg.phi.eval(t)));
            }
            for j in 0..10 {
                assert!((ti.b.get(j).unwrap() - tg.b.get(j).unwrap()).abs() < 1e-15);
            }
            // the iterated ψ keeps only the powers j ≥ 0 of s^{-ν}e^s
            let s = Complex64::from_polar(1.0, 0.7);
            let tail: Complex64 = (-(nu as i32)..0).map(|j| s.powi(j) / factorial((j + nu as i32) as usize)).sum();
            assert!((ti.psi.eval(s) + tail - tg.psi.eval(s)).norm() < 1e-12);
            let p = laguerre_monic(3, 0);
            let d = max_coeff_diff(&op_l_contour(&p, &ti.psi, &ti.sigma).unwrap(), &op_l_contour(&p, &tg.psi, &tg.sigma).unwrap());
            assert!(d < 1e-10);
        }
    }

    #[test]
    fn iterated_psi_matches_meijer() {
        use crate::special::meijer_g_complex;
        let it = iterated_spec(IteratedKind::Ginibre, &[0, 1], &[]).unwrap();
        let t = phi_of(&it);
        assert_eq!(t.b.get(1).unwrap(), 0.5);
        let it0 = iterated_spec(IteratedKind::Ginibre, &[0, 0], &[]).unwrap();
        assert_eq!(phi_of(&it0).b.get(1).unwrap(), 1.0);
        let g = MeijerGSpec::ginibre_psi(&[0.0, 1.0]);
        for s in [Complex64::new(0.4, 0.2), Complex64::new(-0.7, 0.6)] {
            assert!((t.psi.eval(s) - meijer_g_complex(&g, -s).unwrap()).norm() < 1e-10);
        }
        let tr = iterated_spec(IteratedKind::Truncated, &[0, 1], &[2, 1]).unwrap();
        let t = phi_of(&tr);
        let g = MeijerGSpec::truncated_psi(&[0.0, 1.0], &[2.0, 1.0]);
        for s in [Complex64::new(0.3, 0.1), Complex64::new(-0.2, -0.4)] {
            let v = t.psi.eval(s);
            assert!((v - meijer_g_complex(&g, -s).unwrap()).norm() < 1e-10 * v.norm());
        }
    }

    #[test]
    fn iterated_truncated_moments() {
        let spec = iterated_spec(IteratedKind::Truncated, &[0, 1], &[2, 2]).unwrap();
        let t = phi_of(&spec);
        let quad = MomentSequence::from_phi(&t.phi, 4).unwrap();
        for j in 0..4 {
            let (a, b) = (quad.get(j).unwrap(), t.b.get(j).unwrap());
            assert!((a - b).abs() < 1e-8 * b, "j={j}: {a} vs {b}");
        }
        assert!(iterated_spec(IteratedKind::Truncated, &[0, 1], &[2]).is_err());
    }

    #[test]
    fn chained_transforms_equal_iterated() {
        let (_, sys) = laguerre_ensemble(2, 0).unwrap();
        let g = TransformSpec::ginibre(0).unwrap();
        let chained = transform_system(&transform_system(&sys, &g).unwrap(), &g).unwrap();
        let it = transform_system(&sys, &iterated_spec(IteratedKind::Ginibre, &[0, 0], &[]).unwrap()).unwrap();
        for k in 0..2 {
            assert!(max_coeff_diff(&chained.p[k], &it.p[k]) < 1e-14);
            let (DualFunction::Function(a), DualFunction::Function(b)) = (&chained.q[k], &it.q[k]) else { panic!() };
            for y in [0.3, 1.0, 2.5] {
                assert!((a.eval(y) - b.eval(y)).abs() < 1e-9, "k={k} y={y}");
            }
        }
    }

    #[test]
    fn descriptor_round_trip() {
        let d = TransformDescriptor::Truncated { nu: 1, mu: 2 };
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"kind":"truncated","nu":1,"mu":2}"#);
        assert_eq!(serde_json::from_str::<TransformDescriptor>(&s).unwrap(), d);
        assert!(serde_json::from_str::<TransformDescriptor>(r#"{"kind":"gue-add","x":1}"#).is_err());
        assert!(TransformDescriptor::Truncated { nu: 0, mu: 0 }.build().is_err());
    }

    fn exchange_defect(spec: &TransformSpec, q: &DualFunction, p: &Polynomial) -> f64 {
        let t = phi_of(spec);
        let DualFunction::Function(qf) = q else { panic!() };
        let lp = op_l(p, &t.b).unwrap();
        let DualFunction::Function(mq) = transform_dual(q, spec).unwrap() else { panic!() };
        let lhs = integrate_real(|x| lp.eval_re(x) * mq.eval(x), mq.support.lo, mq.support.hi, 1e-11).unwrap().value.re;
        let rhs = integrate_real(|x| p.eval_re(x) * qf.eval(x), qf.support.lo, qf.support.hi, 1e-12).unwrap().value.re;
        (lhs - rhs).abs()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn exchange_identity(coeffs in proptest::collection::vec(-1.0f64..1.0, 1..=6), k in 0usize..4, family in 0usize..3) {
            let p = Polynomial::from_real(&coeffs);
            let (spec, sys) = match family {
                0 => (TransformSpec::ginibre(1).unwrap(), laguerre_ensemble(4, 0).unwrap().1),
                1 => (TransformSpec::truncated(1, 2).unwrap(), laguerre_ensemble(4, 2).unwrap().1),
                _ => (TransformSpec::truncated(0, 1).unwrap(), jacobi_ensemble(4, 0, 9).unwrap().1),
            };
            prop_assert!(exchange_defect(&spec, &sys.q[k], &p) < 1e-8);
        }
    }

    #[test]
    fn random_stream_polynomials_exchange() {
        let mut rng = RandomStream::new(8);
        let spec = TransformSpec::ginibre(0).unwrap();
        let (_, sys) = laguerre_ensemble(3, 1).unwrap();
        for _ in 0..3 {
            let p = Polynomial::from_real(&(0..6).map(|_| rng.normal()).collect::<Vec<_>>());
            assert!(exchange_defect(&spec, &sys.q[2], &p) < 1e-8);
        }
    }
}
