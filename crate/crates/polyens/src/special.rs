//! Log-Gamma, generalized hypergeometric series and the Meijer G-function classes
//! that occur for products with Ginibre and truncated unitary matrices.
//!
//! Supported Meijer G classes (parameters paired `a_i ↔ b_i` where relevant):
//!
//! * `G^{q,0}_{0,q}(−; b | z)`: Mellin–Barnes integral on a vertical line through the saddle point.
//! * `G^{1,p}_{p,q}(a; b | z)` with `p ≤ q`: the residue series at the poles of `Γ(b_1 + s)`,
//!   which is a `pF_{q−1}` series.
//! * `G^{p,0}_{p,p}(a; b | x)` and `G^{0,p}_{p,p}(a; b | x)` with integer differences `a_i − b_i`:
//!   the Mellin–Barnes integrand is rational times `x^{−s}`, so the function is a finite sum of residues.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialError {
    #[error("Gamma function pole at z = {0}")]
    Pole(Complex64),
    #[error("non-finite argument {0}")]
    NonFinite(Complex64),
    #[error("hypergeometric series diverges at x = {0}")]
    Divergent(Complex64),
    #[error("hypergeometric series did not converge within {0} terms")]
    CapReached(usize),
    #[error("lower parameter {0} is a non-positive integer")]
    BadLowerParameter(f64),
    #[error("unsupported Meijer G class G^{{{m},{n}}}_{{{p},{q}}}: {reason}")]
    UnsupportedClass { m: usize, n: usize, p: usize, q: usize, reason: String },
    #[error("Mellin-Barnes integral not converged at z = {z} (estimate {estimate:e})")]
    MellinBarnes { z: Complex64, estimate: f64 },
    #[error("argument {0} outside the domain of this evaluation path")]
    Domain(Complex64),
}

/// `n!` as a float; exact up to `22!`, correctly rounded up to `170!`.
pub fn factorial(n: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let t = TABLE.get_or_init(|| {
        let mut v = vec![1.0f64; 171];
        for k in 1..171 {
            v[k] = v[k - 1] * k as f64;
        }
        v
    });
    if n < t.len() {
        t[n]
    } else {
        f64::INFINITY
    }
}

pub fn log_factorial(n: usize) -> f64 {
    if n < 171 {
        factorial(n).ln()
    } else {
        log_gamma(Complex64::new(n as f64 + 1.0, 0.0)).unwrap().re
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64).round()
}

const BERNOULLI_TERMS: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
];

/// Principal branch of `log Γ(z)`, continuous off the non-positive real axis.
pub fn log_gamma(z: Complex64) -> Result<Complex64, SpecialError> {
    if !z.re.is_finite() || !z.im.is_finite() {
        return Err(SpecialError::NonFinite(z));
    }
    if z.re <= 0.5 && z.im.abs() < 1e-12 && (z.re - z.re.round()).abs() < 1e-12 {
        return Err(SpecialError::Pole(z));
    }
    let mut w = z;
    let mut shift = Complex64::new(0.0, 0.0);
    while w.re < 15.0 {
        shift += w.ln();
        w += 1.0;
    }
    let inv = w.inv();
    let inv2 = inv * inv;
    let mut series = Complex64::new(0.0, 0.0);
    let mut pw = inv;
    for c in BERNOULLI_TERMS {
        series += pw * c;
        pw *= inv2;
    }
    let stirling = (w - 0.5) * w.ln() - w + 0.5 * (2.0 * PI).ln() + series;
    Ok(stirling - shift)
}

/// Real Gamma function (off the poles).
pub fn gamma(x: f64) -> f64 {
    if x > 0.0 && x.fract() == 0.0 && x < 171.0 {
        return factorial(x as usize - 1);
    }
    match log_gamma(Complex64::new(x, 0.0)) {
        Ok(l) => {
            let sign = if x > 0.0 || (x.floor() as i64) % 2 == 0 { 1.0 } else { -1.0 };
            sign * l.re.exp()
        }
        Err(_) => f64::NAN,
    }
}

/// Digamma function for real `x` off the poles.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let i2 = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x - i2 * (1.0 / 12.0 - i2 * (1.0 / 120.0 - i2 * (1.0 / 252.0 - i2 / 240.0)))
}

/// Polygamma `ψ^{(n)}(x)` for `n ≥ 1` and real `x` off the poles.
pub fn polygamma(n: u32, mut x: f64) -> f64 {
    let nf = factorial(n as usize);
    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
    let mut acc = 0.0;
    while x < 20.0 {
        acc += sign * nf / x.powi(n as i32 + 1);
        x += 1.0;
    }
    // B_{2k} for k = 1..6
    const B: [f64; 6] = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0];
    let mut asym = factorial(n as usize - 1) / x.powi(n as i32) + nf / (2.0 * x.powi(n as i32 + 1));
    for (k, b) in B.iter().enumerate() {
        let k2 = 2 * (k + 1);
        asym += b * factorial(k2 + n as usize - 1) / (factorial(k2) * x.powi((k2 + n as usize) as i32));
    }
    acc + sign * asym
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergeometricSpec {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub cap: usize,
}

pub const SERIES_CAP: usize = 500;

impl HypergeometricSpec {
    pub fn new(upper: Vec<f64>, lower: Vec<f64>) -> Self {
        HypergeometricSpec { upper, lower, cap: SERIES_CAP }
    }
}

fn nonpositive_integer(x: f64) -> Option<usize> {
    if x <= 0.0 && x.fract() == 0.0 {
        Some((-x) as usize)
    } else {
        None
    }
}

/// `pFq(upper; lower; x)` by direct summation.
pub fn hyper_pfq(spec: &HypergeometricSpec, x: Complex64) -> Result<Complex64, SpecialError> {
    let terminate = spec.upper.iter().filter_map(|&a| nonpositive_integer(a)).min();
    for &b in &spec.lower {
        if let Some(m) = nonpositive_integer(b) {
            if terminate.map_or(true, |t| t > m) {
                return Err(SpecialError::BadLowerParameter(b));
            }
        }
    }
    let (p, q) = (spec.upper.len(), spec.lower.len());
    if terminate.is_none() && (p > q + 1 || (p == q + 1 && x.norm() >= 1.0)) && x.norm() > 0.0 {
        return Err(SpecialError::Divergent(x));
    }
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    let mut growing = 0usize;
    let mut small = 0usize;
    for k in 0..spec.cap {
        if terminate == Some(k) {
            return Ok(sum);
        }
        let kf = k as f64;
        let num: f64 = spec.upper.iter().map(|a| a + kf).product();
        let den: f64 = spec.lower.iter().map(|b| b + kf).product();
        let next = term * x * (num / (den * (kf + 1.0)));
        if next.norm() > term.norm() {
            growing += 1;
        } else {
            growing = 0;
        }
        if growing >= 20 && p > q && next.norm() >= term.norm() * (1.0 - 1e-3) && x.norm() >= 1.0 {
            return Err(SpecialError::Divergent(x));
        }
        term = next;
        sum += term;
        if term.norm() <= 1e-16 * sum.norm() {
            small += 1;
            if small >= 2 {
                return Ok(sum);
            }
        } else {
            small = 0;
        }
        if !sum.re.is_finite() || !sum.im.is_finite() {
            return Err(SpecialError::Divergent(x));
        }
    }
    if terminate.is_some() {
        return Ok(sum);
    }
    Err(SpecialError::CapReached(spec.cap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeijerGSpec {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GClass {
    MellinLine,
    Series,
    RationalLeft,
    RationalRight,
}

impl MeijerGSpec {
    pub fn new(m: usize, n: usize, a: Vec<f64>, b: Vec<f64>) -> Self {
        MeijerGSpec { m, n, p: a.len(), q: b.len(), a, b }
    }

    /// `G^{r,0}_{0,r}(−; ν_1..ν_r | t)`, the density of a product of Gamma variables.
    pub fn ginibre_phi(nu: &[f64]) -> Self {
        Self::new(nu.len(), 0, vec![], nu.to_vec())
    }

    /// `G^{1,1}_{1,r+1}(0; 0, −ν_1..−ν_r | ·)`.
    pub fn ginibre_psi(nu: &[f64]) -> Self {
        let mut b = vec![0.0];
        b.extend(nu.iter().map(|v| -v));
        Self::new(1, 1, vec![0.0], b)
    }

    /// `G^{r,0}_{r,r}(ν+μ; ν | t)`, supported on `[0, 1]`.
    pub fn truncated_phi(nu: &[f64], mu: &[f64]) -> Self {
        let a = nu.iter().zip(mu).map(|(v, m)| v + m).collect();
        Self::new(nu.len(), 0, a, nu.to_vec())
    }

    /// `G^{1,r+1}_{r+1,r+1}(0, −ν−μ; 0, −ν | ·)`.
    pub fn truncated_psi(nu: &[f64], mu: &[f64]) -> Self {
        let mut a = vec![0.0];
        a.extend(nu.iter().zip(mu).map(|(v, m)| -v - m));
        let mut b = vec![0.0];
        b.extend(nu.iter().map(|v| -v));
        Self::new(1, a.len(), a, b)
    }

    fn unsupported(&self, reason: &str) -> SpecialError {
        SpecialError::UnsupportedClass { m: self.m, n: self.n, p: self.p, q: self.q, reason: reason.into() }
    }

    fn integer_pairs(&self) -> bool {
        self.a.iter().zip(&self.b).all(|(a, b)| (a - b).fract() == 0.0)
    }

    fn classify(&self) -> Result<GClass, SpecialError> {
        if self.a.len() != self.p || self.b.len() != self.q || self.m > self.q || self.n > self.p {
            return Err(self.unsupported("inconsistent parameter counts"));
        }
        if self.p == 0 && self.n == 0 && self.m == self.q && self.q >= 1 {
            return Ok(GClass::MellinLine);
        }
        if self.m == 1 && self.n == self.p && self.p <= self.q && self.q >= 1 {
            return Ok(GClass::Series);
        }
        if self.p == self.q && self.p >= 1 && self.integer_pairs() {
            if self.n == 0 && self.m == self.p {
                let d: f64 = self.a.iter().zip(&self.b).map(|(a, b)| a - b).sum();
                if d < 0.0 {
                    return Err(self.unsupported("parameter excess Σ(a−b) must be nonnegative"));
                }
                return Ok(GClass::RationalLeft);
            }
            if self.m == 0 && self.n == self.p {
                return Ok(GClass::RationalRight);
            }
        }
        Err(self.unsupported("not one of the supported classes"))
    }
}

/// Meijer G-function at a positive real argument.
pub fn meijer_g(spec: &MeijerGSpec, x: f64) -> Result<f64, SpecialError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(SpecialError::Domain(Complex64::new(x, 0.0)));
    }
    match spec.classify()? {
        GClass::RationalLeft => {
            // with excess below 1 the function carries a singular part at x = 1
            let d: f64 = spec.a.iter().zip(&spec.b).map(|(a, b)| a - b).sum();
            if d < 1.0 && x == 1.0 {
                return Err(SpecialError::Domain(Complex64::new(x, 0.0)));
            }
            Ok(rational_left(spec, x))
        }
        GClass::RationalRight => Ok(rational_right(spec, x)),
        _ => meijer_g_complex(spec, Complex64::new(x, 0.0)).map(|z| z.re),
    }
}

/// Meijer G-function at a complex argument, for the series and Mellin–Barnes classes.
/// The Mellin–Barnes class requires `|arg z| ≤ 1`.
pub fn meijer_g_complex(spec: &MeijerGSpec, z: Complex64) -> Result<Complex64, SpecialError> {
    match spec.classify()? {
        GClass::Series => g_series(spec, z),
        GClass::MellinLine => {
            if z.norm() <= 1.0 {
                return gamma_product_residues(&spec.b, z);
            }
            let mb = mellin_barnes_for(&spec.b);
            mb.eval(z)
        }
        _ => Err(SpecialError::Domain(z)),
    }
}

fn g_series(spec: &MeijerGSpec, z: Complex64) -> Result<Complex64, SpecialError> {
    let b1 = spec.b[0];
    let upper: Vec<f64> = spec.a.iter().map(|a| 1.0 - a + b1).collect();
    let lower: Vec<f64> = spec.b[1..].iter().map(|b| 1.0 - b + b1).collect();
    let mut log_c = Complex64::new(0.0, 0.0);
    for &u in &upper {
        log_c += log_gamma(Complex64::new(u, 0.0))?;
    }
    for &l in &lower {
        if nonpositive_integer(l).is_some() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        log_c -= log_gamma(Complex64::new(l, 0.0))?;
    }
    let series = hyper_pfq(&HypergeometricSpec::new(upper, lower), -z)?;
    let zb = if b1 == 0.0 { Complex64::new(1.0, 0.0) } else { z.powf(b1) };
    Ok(log_c.exp() * zb * series)
}

/// Number of left pole families summed per parameter in the small-argument expansion.
const LEFT_POLES: usize = 40;

/// `G^{m,0}_{0,m}(−; b | z)` as the sum of residues at the poles of `∏Γ(b_k + s)`, for `|z| ≤ 1`.
fn gamma_product_residues(b: &[f64], z: Complex64) -> Result<Complex64, SpecialError> {
    if z.norm() == 0.0 {
        return Err(SpecialError::Domain(z));
    }
    let lz = z.ln();
    let mut poles: Vec<f64> = b.iter().flat_map(|bk| (0..LEFT_POLES).map(move |l| -bk - l as f64)).collect();
    poles.sort_by(|x, y| y.total_cmp(x));
    let mut grouped: Vec<(f64, usize)> = Vec::new();
    for p in poles {
        match grouped.last_mut() {
            Some((q, m)) if (*q - p).abs() < 1e-12 => *m += 1,
            _ => grouped.push((p, 1)),
        }
    }
    // keep only poles where every parameter family is still represented
    let cutoff = b.iter().map(|bk| -bk - (LEFT_POLES - 1) as f64).fold(f64::NEG_INFINITY, f64::max);
    let mut total = Complex64::new(0.0, 0.0);
    for &(z0, mult) in grouped.iter().filter(|g| g.0 >= cutoff - 1e-9) {
        let mut series = vec![Complex64::new(0.0, 0.0); mult];
        series[0] = Complex64::new(1.0, 0.0);
        let mut log_coeffs = vec![0.0f64; mult];
        let mut prefactor = 1.0f64;
        let mut rational: Vec<f64> = Vec::new();
        for &bk in b {
            let a = bk + z0;
            let (base, rounded) = (a, a.round());
            if (base - rounded).abs() < 1e-12 && rounded <= 0.0 {
                // ε·Γ(−j+ε) = Γ(1+ε)/∏_{i=1}^{j}(ε−i)
                for i in 1..mult {
                    log_coeffs[i] += log_gamma_taylor(1.0, i);
                }
                for i in 1..=(-rounded) as usize {
                    rational.push(-(i as f64));
                }
            } else {
                prefactor *= gamma(a);
                for i in 1..mult {
                    log_coeffs[i] += log_gamma_taylor(a, i);
                }
            }
        }
        let mut g = exp_series(&log_coeffs);
        for c in rational {
            g.div_linear(c);
        }
        // z^{−z0−ε}
        let mut e = vec![Complex64::new(0.0, 0.0); mult];
        let mut t = (-z0 * lz).exp();
        for (i, v) in e.iter_mut().enumerate() {
            *v = t;
            t *= -lz / (i + 1) as f64;
        }
        for i in 0..mult {
            series[i] = Complex64::new(0.0, 0.0);
            for j in 0..=i {
                series[i] += e[i - j] * g.0[j];
            }
        }
        total += series[mult - 1] * prefactor;
    }
    Ok(total)
}

/// `[ε^i] log Γ(a + ε)` for `i ≥ 1`.
fn log_gamma_taylor(a: f64, i: usize) -> f64 {
    if i == 1 {
        digamma(a)
    } else {
        polygamma(i as u32 - 1, a) / factorial(i)
    }
}

/// `exp` of a series with zero constant term.
fn exp_series(c: &[f64]) -> Taylor {
    let n = c.len();
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    for k in 1..n {
        e[k] = (1..=k).map(|j| j as f64 * c[j] * e[k - j]).sum::<f64>() / k as f64;
    }
    Taylor(e)
}

/// Truncated Taylor series in `ε` with real coefficients.
#[derive(Clone)]
struct Taylor(Vec<f64>);

impl Taylor {
    fn one(order: usize) -> Self {
        let mut v = vec![0.0; order];
        v[0] = 1.0;
        Taylor(v)
    }

    fn mul(&mut self, other: &[f64]) {
        let n = self.0.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            for j in 0..n - i {
                out[i + j] += self.0[i] * other[j];
            }
        }
        self.0 = out;
    }

    /// Multiply by `(c + ε)`.
    fn mul_linear(&mut self, c: f64) {
        let n = self.0.len();
        for i in (0..n).rev() {
            let lower = if i > 0 { self.0[i - 1] } else { 0.0 };
            self.0[i] = self.0[i] * c + lower;
        }
    }

    /// Multiply by `1/(c + ε)`.
    fn div_linear(&mut self, c: f64) {
        let n = self.0.len();
        let mut inv = vec![0.0; n];
        let mut t = 1.0 / c;
        for v in inv.iter_mut() {
            *v = t;
            t *= -1.0 / c;
        }
        self.mul(&inv);
    }
}

/// Poles and zeros of the rational Mellin–Barnes integrand, as multisets of real points.
fn rational_structure(spec: &MeijerGSpec, left: bool) -> (Vec<(f64, usize)>, Vec<f64>) {
    let mut poles: Vec<f64> = Vec::new();
    let mut zeros: Vec<f64> = Vec::new();
    for (&a, &b) in spec.a.iter().zip(&spec.b) {
        let d = (a - b).round() as i64;
        if left {
            // Γ(b+s)/Γ(a+s)
            if d >= 0 {
                poles.extend((0..d).map(|l| -b - l as f64));
            } else {
                zeros.extend((d..0).map(|l| -b - l as f64));
            }
        } else {
            // Γ(1−a−s)/Γ(1−b−s)
            if d >= 0 {
                poles.extend((0..d).map(|l| 1.0 - a + l as f64));
            } else {
                zeros.extend((0..-d).map(|l| 1.0 - b + l as f64));
            }
        }
    }
    // cancel coinciding zeros and poles
    let mut kept_zeros = Vec::new();
    for z in zeros {
        if let Some(pos) = poles.iter().position(|p| (p - z).abs() < 1e-12) {
            poles.swap_remove(pos);
        } else {
            kept_zeros.push(z);
        }
    }
    poles.sort_by(|a, b| a.total_cmp(b));
    let mut grouped: Vec<(f64, usize)> = Vec::new();
    for p in poles {
        match grouped.last_mut() {
            Some((q, m)) if (*q - p).abs() < 1e-12 => *m += 1,
            _ => grouped.push((p, 1)),
        }
    }
    (grouped, kept_zeros)
}

fn residue_sum(poles: &[(f64, usize)], zeros: &[f64], x: f64) -> f64 {
    let lx = x.ln();
    let mut total = 0.0;
    for (k, &(z0, mult)) in poles.iter().enumerate() {
        let mut g = Taylor::one(mult);
        for &zeta in zeros {
            g.mul_linear(z0 - zeta);
        }
        for (j, &(pj, mj)) in poles.iter().enumerate() {
            if j != k {
                for _ in 0..mj {
                    g.div_linear(z0 - pj);
                }
            }
        }
        let mut e = vec![0.0; mult];
        let mut t = x.powf(-z0);
        for (i, v) in e.iter_mut().enumerate() {
            *v = t;
            t *= -lx / (i + 1) as f64;
        }
        g.mul(&e);
        total += g.0[mult - 1];
    }
    total
}

fn rational_left(spec: &MeijerGSpec, x: f64) -> f64 {
    if x > 1.0 {
        return 0.0;
    }
    let (poles, zeros) = rational_structure(spec, true);
    residue_sum(&poles, &zeros, x)
}

fn rational_right(spec: &MeijerGSpec, x: f64) -> f64 {
    let (poles, zeros) = rational_structure(spec, false);
    // Γ(1−a−s)/Γ(1−b−s) has linear factors (c − s); flip each to (s − c).
    let n_pole: usize = poles.iter().map(|p| p.1).sum();
    let sign = if (n_pole + zeros.len()) % 2 == 0 { 1.0 } else { -1.0 };
    // the contour is closed to the right, clockwise
    -sign * residue_sum(&poles, &zeros, x)
}

/// Vertical-line Mellin–Barnes evaluator for `G^{q,0}_{0,q}(−; b | z)`, with node tables
/// cached per abscissa.
pub struct MellinBarnes {
    b: Vec<f64>,
    tables: Mutex<HashMap<i64, Arc<LineTable>>>,
}

struct LineTable {
    c: f64,
    /// `(y_j, log(h/(2π) ∏Γ(b_k + c + i y_j)))` for `j ≥ 0`; negative nodes follow by conjugation.
    nodes: Vec<(f64, Complex64)>,
}

const MB_ARG_MAX: f64 = 1.0;
const MB_BUCKET: f64 = 0.125;
/// Below this log-magnitude the Mellin–Barnes value underflows and is returned as zero.
const MB_UNDERFLOW: f64 = -700.0;

fn mellin_barnes_for(b: &[f64]) -> Arc<MellinBarnes> {
    static CACHE: OnceLock<Mutex<HashMap<Vec<u64>, Arc<MellinBarnes>>>> = OnceLock::new();
    let key: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
    let mut map = CACHE.get_or_init(|| Mutex::new(HashMap::new())).lock().unwrap();
    map.entry(key).or_insert_with(|| Arc::new(MellinBarnes::new(b.to_vec()))).clone()
}

impl MellinBarnes {
    pub fn new(b: Vec<f64>) -> Self {
        MellinBarnes { b, tables: Mutex::new(HashMap::new()) }
    }

    fn b_min(&self) -> f64 {
        self.b.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Abscissa near the saddle point of `∏Γ(b_k+s) |z|^{−s}` on the real axis.
    fn abscissa(&self, logz: f64) -> f64 {
        let bmin = self.b_min();
        let f = |c: f64| self.b.iter().map(|b| digamma(b + c)).sum::<f64>() - logz;
        let lo0 = -bmin + 0.5;
        if f(lo0) >= 0.0 {
            return lo0;
        }
        let (mut lo, mut hi) = (lo0, lo0 + 1.0);
        while f(hi) < 0.0 {
            hi = lo0 + 2.0 * (hi - lo0);
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn table(&self, c_wanted: f64) -> Arc<LineTable> {
        let bmin = self.b_min();
        let c_min = -bmin + 0.5;
        // bucket width grows like √c; the value is insensitive to the exact abscissa
        let idx = (((c_wanted - c_min + 1.0).max(1.0).sqrt() - 1.0) / MB_BUCKET).round() as i64;
        if let Some(t) = self.tables.lock().unwrap().get(&idx) {
            return t.clone();
        }
        let u = 1.0 + idx as f64 * MB_BUCKET;
        let c = c_min + u * u - 1.0;
        let delta = c + bmin;
        let h = (delta / 8.0).min(0.125);
        let log_abs = |y: f64| -> Complex64 {
            self.b
                .iter()
                .map(|bk| log_gamma(Complex64::new(bk + c, y)).unwrap())
                .sum()
        };
        let peak = log_abs(0.0).re;
        let mut nodes = Vec::new();
        let mut j = 0usize;
        loop {
            let y = j as f64 * h;
            let l = log_abs(y);
            nodes.push((y, l + (h / (2.0 * PI)).ln()));
            if l.re + y * MB_ARG_MAX < peak - 45.0 && j > 16 {
                break;
            }
            j += 1;
        }
        let t = Arc::new(LineTable { c, nodes });
        self.tables.lock().unwrap().insert(idx, t.clone());
        t
    }

    pub fn eval(&self, z: Complex64) -> Result<Complex64, SpecialError> {
        if z.norm() == 0.0 || !z.re.is_finite() || !z.im.is_finite() || z.arg().abs() > MB_ARG_MAX {
            return Err(SpecialError::Domain(z));
        }
        let lz = z.ln();
        let c_star = self.abscissa(lz.re);
        let peak: f64 = self.b.iter().map(|b| log_gamma(Complex64::new(b + c_star, 0.0)).unwrap().re).sum();
        if peak - c_star * lz.re < MB_UNDERFLOW {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let t = self.table(c_star);
        let mut full = Complex64::new(0.0, 0.0);
        let mut half = Complex64::new(0.0, 0.0);
        let mut scale = 0.0;
        for (j, &(y, lw)) in t.nodes.iter().enumerate() {
            let mut term = (lw - Complex64::new(t.c, y) * lz).exp();
            if j > 0 {
                term += (lw.conj() - Complex64::new(t.c, -y) * lz).exp();
            }
            full += term;
            scale += term.norm();
            if j % 2 == 0 {
                half += term;
            }
        }
        let half = half * 2.0;
        let estimate = (full - half).norm();
        if scale < 1e-290 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        if !full.re.is_finite() || estimate > 1e-6 * full.norm() + 1e-13 * scale {
            return Err(SpecialError::MellinBarnes { z, estimate });
        }
        Ok(full)
    }
}
