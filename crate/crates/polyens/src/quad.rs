//! Quadrature on circles, ellipses, vertical lines, Hankel contours and real intervals.
//!
//! `integrate` returns the plain line integral `∫_C f(s) ds`; factors such as `1/(2πi)` are
//! left to the caller. The Gauss–Laguerre and Gauss–Jacobi kinds integrate against their
//! weight, so `integrate(f, GaussLaguerre{α})` is `∫₀^∞ f(t) t^α e^{−t} dt`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::log_gamma;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("integrand is not finite at s = {0}")]
    NonFinite(Complex64),
    #[error("contours collide: minimal node distance {0:e}")]
    Collision(f64),
    #[error("invalid contour: {0}")]
    InvalidContour(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ContourKind {
    Circle { center: Complex64, radius: f64 },
    /// `center + a cos θ + i b sin θ`, positively oriented.
    Ellipse { center: Complex64, semi_re: f64, semi_im: f64 },
    /// Upward line `abscissa + i y`, `|y| ≤ half_height`.
    VerticalLine { abscissa: f64, half_height: f64 },
    /// Loop of radius `loop_radius` around `vertex` with arms along `Im s = ±loop_radius`
    /// reaching `Re s = vertex − arm_length`; positively oriented around `(−∞, vertex]`.
    /// With `closed` the arms are joined by a vertical segment, giving a closed curve.
    Hankel { vertex: f64, loop_radius: f64, arm_length: f64, closed: bool },
    /// `∫₀^∞ f(t) t^α e^{−t} dt`.
    HalfLineGaussLaguerre { weight_exponent: f64 },
    /// `∫₀¹ f(t) t^α (1−t)^β dt`.
    UnitIntervalGaussJacobi { alpha: f64, beta: f64 },
    /// Straight segments through the given points, in order.
    Polyline { points: Vec<Complex64> },
    /// Double-exponential rule on a finite real interval; tolerates endpoint singularities.
    TanhSinh { lo: f64, hi: f64 },
    /// Double-exponential rule on `[lo, ∞)`.
    ExpSinh { lo: f64 },
    /// Trapezoid rule on `[center − half_width, center + half_width]` for integrands
    /// decaying at both ends.
    RealLine { center: f64, half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub kind: ContourKind,
    pub node_count: usize,
    pub max_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    pub value: Complex64,
    pub error_estimate: f64,
    pub nodes_used: usize,
    pub converged: bool,
}

/// Nodes and weights such that `Σ w_k f(s_k)` approximates the integral.
pub type Rule = Vec<(Complex64, Complex64)>;

impl Contour {
    pub fn new(kind: ContourKind, node_count: usize) -> Result<Self, QuadError> {
        let c = Contour { kind, node_count: node_count.max(8), max_nodes: 1024.max(node_count * 16) };
        c.validate()?;
        Ok(c)
    }

    pub fn circle(center: Complex64, radius: f64, nodes: usize) -> Result<Self, QuadError> {
        Self::new(ContourKind::Circle { center, radius }, nodes)
    }

    pub fn ellipse(center: Complex64, semi_re: f64, semi_im: f64, nodes: usize) -> Result<Self, QuadError> {
        Self::new(ContourKind::Ellipse { center, semi_re, semi_im }, nodes)
    }

    pub fn vertical_line(abscissa: f64, half_height: f64, nodes: usize) -> Result<Self, QuadError> {
        Self::new(ContourKind::VerticalLine { abscissa, half_height }, nodes)
    }

    pub fn gauss_laguerre(weight_exponent: f64, nodes: usize) -> Result<Self, QuadError> {
        let mut c = Self::new(ContourKind::HalfLineGaussLaguerre { weight_exponent }, nodes)?;
        c.max_nodes = 1024;
        Ok(c)
    }

    pub fn gauss_jacobi(alpha: f64, beta: f64, nodes: usize) -> Result<Self, QuadError> {
        let mut c = Self::new(ContourKind::UnitIntervalGaussJacobi { alpha, beta }, nodes)?;
        c.max_nodes = 1024;
        Ok(c)
    }

    pub fn tanh_sinh(lo: f64, hi: f64, nodes: usize) -> Result<Self, QuadError> {
        Self::new(ContourKind::TanhSinh { lo, hi }, nodes)
    }

    pub fn exp_sinh(lo: f64, nodes: usize) -> Result<Self, QuadError> {
        Self::new(ContourKind::ExpSinh { lo }, nodes)
    }

    pub fn real_line(center: f64, half_width: f64, nodes: usize) -> Result<Self, QuadError> {
        Self::new(ContourKind::RealLine { center, half_width }, nodes)
    }

    pub fn with_max_nodes(mut self, max_nodes: usize) -> Self {
        self.max_nodes = max_nodes.max(self.node_count);
        self
    }

    fn validate(&self) -> Result<(), QuadError> {
        let bad = |m: &str| Err(QuadError::InvalidContour(m.into()));
        match &self.kind {
            ContourKind::Circle { radius, .. } if !(*radius > 0.0) => bad("circle radius must be positive"),
            ContourKind::Ellipse { semi_re, semi_im, .. } if !(*semi_re > 0.0 && *semi_im > 0.0) => {
                bad("ellipse semi-axes must be positive")
            }
            ContourKind::VerticalLine { half_height, .. } if !(*half_height > 0.0) => {
                bad("half-height must be positive")
            }
            ContourKind::Hankel { loop_radius, arm_length, .. }
                if !(*loop_radius > 0.0 && *arm_length > *loop_radius) =>
            {
                bad("Hankel contour needs loop radius > 0 and arm length > loop radius")
            }
            ContourKind::HalfLineGaussLaguerre { weight_exponent } if !(*weight_exponent > -1.0) => {
                bad("Gauss-Laguerre exponent must exceed -1")
            }
            ContourKind::UnitIntervalGaussJacobi { alpha, beta } if !(*alpha > -1.0 && *beta > -1.0) => {
                bad("Gauss-Jacobi exponents must exceed -1")
            }
            ContourKind::Polyline { points } if points.len() < 2 => bad("polyline needs two points"),
            ContourKind::TanhSinh { lo, hi } if !(hi > lo) => bad("empty interval"),
            ContourKind::RealLine { half_width, .. } if !(*half_width > 0.0) => bad("empty interval"),
            _ => Ok(()),
        }
    }

    /// Leftmost real part reached by the path (for Hankel contours, the arm ends).
    pub fn leftmost(&self) -> f64 {
        match &self.kind {
            ContourKind::Hankel { vertex, arm_length, .. } => vertex - arm_length,
            _ => self.rule(self.node_count).iter().map(|p| p.0.re).fold(f64::INFINITY, f64::min),
        }
    }

    /// Whether this contour's rule integrates against a built-in weight.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self.kind,
            ContourKind::HalfLineGaussLaguerre { .. } | ContourKind::UnitIntervalGaussJacobi { .. }
        )
    }

    /// Quadrature rule with (roughly) `n` nodes.
    pub fn rule(&self, n: usize) -> Rule {
        let n = n.max(8);
        match &self.kind {
            ContourKind::Circle { center, radius } => (0..n)
                .map(|k| {
                    let e = Complex64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64);
                    (center + radius * e, Complex64::i() * radius * e * (2.0 * PI / n as f64))
                })
                .collect(),
            ContourKind::Ellipse { center, semi_re, semi_im } => (0..n)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / n as f64;
                    let s = center + Complex64::new(semi_re * th.cos(), semi_im * th.sin());
                    let ds = Complex64::new(-semi_re * th.sin(), semi_im * th.cos());
                    (s, ds * (2.0 * PI / n as f64))
                })
                .collect(),
            ContourKind::VerticalLine { abscissa, half_height } => {
                let h = 2.0 * half_height / n as f64;
                (0..n)
                    .map(|k| {
                        let y = -half_height + (k as f64 + 0.5) * h;
                        (Complex64::new(*abscissa, y), Complex64::new(0.0, h))
                    })
                    .collect()
            }
            ContourKind::Hankel { vertex, loop_radius, arm_length, closed } => {
                hankel_rule(*vertex, *loop_radius, *arm_length, *closed, n)
            }
            ContourKind::HalfLineGaussLaguerre { weight_exponent } => {
                let r = cached_rule(RuleKey::Laguerre(weight_exponent.to_bits()), n);
                r.iter().map(|&(x, w)| (Complex64::new(x, 0.0), Complex64::new(w, 0.0))).collect()
            }
            ContourKind::UnitIntervalGaussJacobi { alpha, beta } => {
                let r = cached_rule(RuleKey::Jacobi(alpha.to_bits(), beta.to_bits()), n);
                r.iter().map(|&(x, w)| (Complex64::new(x, 0.0), Complex64::new(w, 0.0))).collect()
            }
            ContourKind::Polyline { points } => {
                let per = n.div_ceil(points.len() - 1).max(2);
                let mut out = Vec::new();
                for seg in points.windows(2) {
                    push_segment(&mut out, seg[0], seg[1], 1, per);
                }
                out
            }
            ContourKind::TanhSinh { lo, hi } => tanh_sinh_rule(*lo, *hi, n),
            ContourKind::ExpSinh { lo } => exp_sinh_rule(*lo, n),
            ContourKind::RealLine { center, half_width } => {
                let h = 2.0 * half_width / n as f64;
                (0..=n)
                    .map(|k| {
                        let w = if k == 0 || k == n { 0.5 * h } else { h };
                        (Complex64::new(center - half_width + k as f64 * h, 0.0), Complex64::new(w, 0.0))
                    })
                    .collect()
            }
        }
    }
}

/// Hankel contour around the negative real axis: `(−∞, 0]`.
pub fn hankel_contour(loop_radius: f64, arm_length: f64, nodes: usize) -> Result<Contour, QuadError> {
    hankel_contour_at(0.0, loop_radius, arm_length, false, nodes)
}

/// Hankel contour around `(−∞, vertex]`.
pub fn hankel_contour_at(
    vertex: f64,
    loop_radius: f64,
    arm_length: f64,
    closed: bool,
    nodes: usize,
) -> Result<Contour, QuadError> {
    Contour::new(ContourKind::Hankel { vertex, loop_radius, arm_length, closed }, nodes)
}

/// Gauss–Legendre panels on the straight segment `a → b`.
fn push_segment(out: &mut Rule, a: Complex64, b: Complex64, panels: usize, per_panel: usize) {
    let gl = cached_rule(RuleKey::Legendre, per_panel);
    for p in 0..panels {
        let pa = a + (b - a) * (p as f64 / panels as f64);
        let pb = a + (b - a) * ((p + 1) as f64 / panels as f64);
        let half = (pb - pa) * 0.5;
        let mid = (pa + pb) * 0.5;
        for &(x, w) in gl.iter() {
            out.push((mid + half * x, half * w));
        }
    }
}

fn hankel_rule(vertex: f64, rho: f64, arm: f64, closed: bool, n: usize) -> Rule {
    let per = (n / 16).max(4);
    // geometric panels along each arm: [0, ρ], [ρ, 2ρ], [2ρ, 4ρ], ...
    let mut breaks = vec![0.0, rho];
    while *breaks.last().unwrap() < arm {
        let next = (breaks.last().unwrap() * 2.0).min(arm);
        breaks.push(next);
    }
    let up = Complex64::new(0.0, rho);
    let v = Complex64::new(vertex, 0.0);
    let mut out = Vec::new();
    // lower arm, left to right
    for w in breaks.windows(2).rev() {
        push_segment(&mut out, v - w[1] - up, v - w[0] - up, 1, per);
    }
    // right half circle through vertex + ρ
    let gl = cached_rule(RuleKey::Legendre, per);
    for q in 0..4 {
        let t0 = -PI / 2.0 + q as f64 * PI / 4.0;
        let t1 = t0 + PI / 4.0;
        for &(x, w) in gl.iter() {
            let th = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x;
            let e = Complex64::from_polar(1.0, th);
            out.push((v + rho * e, Complex64::i() * rho * e * (0.5 * (t1 - t0) * w)));
        }
    }
    // upper arm, right to left
    for w in breaks.windows(2) {
        push_segment(&mut out, v - w[0] + up, v - w[1] + up, 1, per);
    }
    if closed {
        push_segment(&mut out, v - arm + up, v - arm - up, 1, per);
    }
    out
}

fn tanh_sinh_rule(lo: f64, hi: f64, n: usize) -> Rule {
    let umax = 3.2;
    let h = 2.0 * umax / n as f64;
    let half = 0.5 * (hi - lo);
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let u = -umax + k as f64 * h;
        let s = 0.5 * PI * u.sinh();
        let e = (-2.0 * s.abs()).exp();
        // distance of the node to the nearer endpoint, in units of `half`
        let gap = 2.0 * e / (1.0 + e);
        let t = if s < 0.0 { lo + half * gap } else { hi - half * gap };
        let ch = s.cosh();
        let w = h * half * 0.5 * PI * u.cosh() / (ch * ch);
        if gap > 0.0 && t > lo && t < hi && w > 0.0 {
            out.push((Complex64::new(t, 0.0), Complex64::new(w, 0.0)));
        }
    }
    out
}

fn exp_sinh_rule(lo: f64, n: usize) -> Rule {
    let (umin, umax) = (-4.5, 3.5);
    let h = (umax - umin) / n as f64;
    (0..=n)
        .filter_map(|k| {
            let u: f64 = umin + k as f64 * h;
            let e = (0.5 * PI * u.sinh()).exp();
            let w = h * 0.5 * PI * u.cosh() * e;
            (e > 0.0 && e.is_finite()).then(|| (Complex64::new(lo + e, 0.0), Complex64::new(w, 0.0)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum RuleKey {
    Legendre,
    Laguerre(u64),
    Jacobi(u64, u64),
}

fn cached_rule(key: RuleKey, n: usize) -> Arc<Vec<(f64, f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<(RuleKey, usize), Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&(key, n)) {
        return r.clone();
    }
    let rule = Arc::new(match key {
        RuleKey::Legendre => jacobi_gauss(0.0, 0.0, n),
        RuleKey::Laguerre(a) => laguerre_gauss(f64::from_bits(a), n),
        RuleKey::Jacobi(a, b) => {
            let (alpha, beta) = (f64::from_bits(a), f64::from_bits(b));
            // t = (1+x)/2 maps (1−x)^β(1+x)^α on [−1,1] to t^α(1−t)^β on [0,1]
            let scale = 0.5f64.powf(alpha + beta + 1.0);
            jacobi_gauss(beta, alpha, n).into_iter().map(|(x, w)| (0.5 * (1.0 + x), w * scale)).collect()
        }
    });
    cache.lock().unwrap().insert((key, n), rule.clone());
    rule
}

/// Golub–Welsch for a symmetric tridiagonal Jacobi matrix.
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> Vec<(f64, f64)> {
    let n = diag.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag[i];
        if i + 1 < n {
            m[(i, i + 1)] = off[i];
            m[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut out: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .map(|&x0| {
            // polish the node by Newton's method and take the weight from the Christoffel sum,
            // which stays accurate for the tiny weights where eigenvectors do not
            let mut x = x0;
            for _ in 0..3 {
                let (p, dp, _) = three_term(diag, off, x);
                let step = p / dp;
                if step.is_finite() && step.abs() < 1e-6 * (1.0 + x.abs()) {
                    x -= step;
                }
            }
            let (_, _, log_sum) = three_term(diag, off, x);
            (x, mu0 * (-log_sum).exp())
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Runs the orthonormal three-term recurrence (with `r_0 = 1`) at `x`; returns a rescaled
/// `b_n r_n(x)`, its derivative (same scale) and `log Σ_{j<n} r_j(x)²`.
fn three_term(diag: &[f64], off: &[f64], x: f64) -> (f64, f64, f64) {
    let n = diag.len();
    let (mut r_prev, mut r) = (0.0f64, 1.0f64);
    let (mut d_prev, mut d) = (0.0f64, 0.0f64);
    let mut sum = 0.0f64;
    let mut log_scale = 0.0f64;
    for j in 0..n {
        sum += r * r;
        let b_j = if j == 0 { 0.0 } else { off[j - 1] };
        let b_next = if j + 1 < n { off[j] } else { 1.0 };
        let r_next = ((x - diag[j]) * r - b_j * r_prev) / b_next;
        let d_next = (r + (x - diag[j]) * d - b_j * d_prev) / b_next;
        r_prev = r;
        r = r_next;
        d_prev = d;
        d = d_next;
        if r.abs() > 1e150 {
            r *= 1e-150;
            r_prev *= 1e-150;
            d *= 1e-150;
            d_prev *= 1e-150;
            sum *= 1e-300;
            log_scale += 300.0 * std::f64::consts::LN_10;
        }
    }
    (r, d, sum.ln() + log_scale)
}

fn gamma_real(x: f64) -> f64 {
    log_gamma(Complex64::new(x, 0.0)).map(|l| l.re.exp()).unwrap_or(f64::NAN)
}

/// Gauss–Jacobi on `[−1, 1]` with weight `(1−x)^a (1+x)^b`.
fn jacobi_gauss(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let ab = a + b;
    let diag: Vec<f64> = (0..n)
        .map(|k| {
            let k = k as f64;
            let d = (2.0 * k + ab) * (2.0 * k + ab + 2.0);
            if d == 0.0 {
                (b - a) / (ab + 2.0)
            } else {
                (b * b - a * a) / d
            }
        })
        .collect();
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            let s = 2.0 * k + ab;
            (4.0 * k * (k + a) * (k + b) * (k + ab) / (s * s * (s + 1.0) * (s - 1.0))).sqrt()
        })
        .collect();
    let mu0 = 2f64.powf(ab + 1.0) * gamma_real(a + 1.0) * gamma_real(b + 1.0) / gamma_real(ab + 2.0);
    golub_welsch(&diag, &off, mu0)
}

/// Generalized Gauss–Laguerre with weight `t^α e^{−t}`.
fn laguerre_gauss(alpha: f64, n: usize) -> Vec<(f64, f64)> {
    let diag: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + alpha + 1.0).collect();
    let off: Vec<f64> = (1..n).map(|k| (k as f64 * (k as f64 + alpha)).sqrt()).collect();
    golub_welsch(&diag, &off, gamma_real(alpha + 1.0))
}

/// Gauss–Legendre nodes and weights on `[lo, hi]`.
pub fn gauss_legendre(lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let half = 0.5 * (hi - lo);
    cached_rule(RuleKey::Legendre, n)
        .iter()
        .map(|&(x, w)| (lo + half * (1.0 + x), half * w))
        .collect()
}

fn apply<F>(f: &F, rule: &Rule) -> Result<Complex64, QuadError>
where
    F: Fn(Complex64) -> Complex64 + ?Sized,
{
    let mut acc = Complex64::new(0.0, 0.0);
    for &(s, w) in rule {
        let v = f(s);
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(QuadError::NonFinite(s));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Integral of `f` along `c` with node doubling until two successive values differ by less
/// than `tol`; if the node cap is reached first the result is returned with `converged = false`.
pub fn integrate<F>(f: F, c: &Contour, tol: f64) -> Result<QuadratureResult, QuadError>
where
    F: Fn(Complex64) -> Complex64,
{
    let mut n = c.node_count;
    let mut prev = apply(&f, &c.rule(n))?;
    loop {
        let n2 = 2 * n;
        let rule = c.rule(n2);
        let cur = apply(&f, &rule)?;
        let err = (cur - prev).norm();
        if err < tol || n2 * 2 > c.max_nodes {
            return Ok(QuadratureResult { value: cur, error_estimate: err, nodes_used: rule.len(), converged: err < tol });
        }
        prev = cur;
        n = n2;
    }
}

/// `∫_lo^hi f(t) dt` on a real interval with possibly infinite endpoints, using
/// double-exponential rules.
pub fn integrate_real<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<QuadratureResult, QuadError>
where
    F: Fn(f64) -> f64,
{
    let re = |v: f64| Complex64::new(v, 0.0);
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => integrate(|t| re(f(t.re)), &Contour::tanh_sinh(lo, hi, 64)?, tol),
        (true, false) => integrate(|t| re(f(t.re)), &Contour::exp_sinh(lo, 64)?, tol),
        (false, true) => integrate(|u| re(f(hi - u.re)), &Contour::exp_sinh(0.0, 64)?, tol),
        (false, false) => integrate(|u| re(f(u.re) + f(-u.re)), &Contour::exp_sinh(0.0, 64)?, tol),
    }
}

/// Evaluation budget of `integrate_adaptive`.
pub const ADAPTIVE_NODE_CAP: usize = 200_000;

/// Adaptive composite Gauss–Legendre on a finite interval: panels no wider than `panel`
/// are compared at 16 and 32 nodes and bisected until the difference is below their share
/// of `tol`.
pub fn integrate_adaptive<F>(f: F, lo: f64, hi: f64, tol: f64, panel: f64) -> Result<QuadratureResult, QuadError>
where
    F: Fn(f64) -> f64,
{
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(QuadError::InvalidContour(format!("adaptive rule needs a finite interval, got [{lo}, {hi}]")));
    }
    let width = hi - lo;
    if width == 0.0 {
        return Ok(QuadratureResult { value: Complex64::new(0.0, 0.0), error_estimate: 0.0, nodes_used: 0, converged: true });
    }
    // returns (Σ w f, Σ w |f|)
    let gl = |a: f64, b: f64, n: usize| -> Result<(f64, f64), QuadError> {
        let (mut acc, mut mag) = (0.0, 0.0);
        for (x, w) in gauss_legendre(a, b, n) {
            let v = f(x);
            if !v.is_finite() {
                return Err(QuadError::NonFinite(Complex64::new(x, 0.0)));
            }
            acc += w * v;
            mag += w * v.abs();
        }
        Ok((acc, mag))
    };
    let panels = ((width / panel).ceil() as usize).max(1);
    let mut stack: Vec<(f64, f64, u32)> =
        (0..panels).rev().map(|i| (lo + width * i as f64 / panels as f64, lo + width * (i + 1) as f64 / panels as f64, 0)).collect();
    let (mut total, mut err, mut nodes, mut converged) = (0.0, 0.0, 0, true);
    while let Some((a, b, depth)) = stack.pop() {
        let (coarse, _) = gl(a, b, 16)?;
        let (fine, mag) = gl(a, b, 32)?;
        nodes += 48;
        let diff = (fine - coarse).abs();
        // below the rounding level of the panel no refinement can help
        let share = (tol * (b - a) / width).max(64.0 * f64::EPSILON * mag);
        if diff <= share || depth >= 30 || nodes > ADAPTIVE_NODE_CAP {
            if diff > share {
                converged = false;
            }
            total += fine;
            err += diff;
        } else {
            let m = 0.5 * (a + b);
            stack.push((m, b, depth + 1));
            stack.push((a, m, depth + 1));
        }
    }
    Ok(QuadratureResult { value: Complex64::new(total, 0.0), error_estimate: err, nodes_used: nodes, converged })
}

fn min_distance(a: &Rule, b: &Rule) -> f64 {
    let mut best = f64::INFINITY;
    for &(s, _) in a {
        for &(t, _) in b {
            best = best.min((s - t).norm());
        }
    }
    best
}

fn apply_double<F>(f: &F, r1: &Rule, r2: &Rule) -> Result<Complex64, QuadError>
where
    F: Fn(Complex64, Complex64) -> Complex64,
{
    let mut acc = Complex64::new(0.0, 0.0);
    for &(s, ws) in r1 {
        let mut inner = Complex64::new(0.0, 0.0);
        for &(t, wt) in r2 {
            let v = f(s, t);
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(QuadError::NonFinite(s));
            }
            inner += wt * v;
        }
        acc += ws * inner;
    }
    Ok(acc)
}

/// Tensor-product integral `∫_{c1} ds ∫_{c2} dt f(s, t)`, refining each axis separately.
/// With `singular` set, contours whose nodes come within `1e-8` of each other are rejected.
pub fn integrate_double<F>(
    f: F,
    c1: &Contour,
    c2: &Contour,
    tol: f64,
    singular: bool,
) -> Result<QuadratureResult, QuadError>
where
    F: Fn(Complex64, Complex64) -> Complex64,
{
    let (mut n1, mut n2) = (c1.node_count, c2.node_count);
    loop {
        let (r1, r2) = (c1.rule(n1), c2.rule(n2));
        if singular {
            let d = min_distance(&r1, &r2);
            if d < 1e-8 {
                return Err(QuadError::Collision(d));
            }
        }
        let base = apply_double(&f, &r1, &r2)?;
        let r1b = c1.rule(2 * n1);
        let r2b = c2.rule(2 * n2);
        let e1 = (apply_double(&f, &r1b, &r2)? - base).norm();
        let e2 = (apply_double(&f, &r1, &r2b)? - base).norm();
        let err = e1 + e2;
        let cap1 = 4 * n1 > c1.max_nodes;
        let cap2 = 4 * n2 > c2.max_nodes;
        if err < tol || (cap1 || e1 < tol / 2.0) && (cap2 || e2 < tol / 2.0) {
            let value = apply_double(&f, &r1b, &r2b)?;
            return Ok(QuadratureResult {
                value,
                error_estimate: err,
                nodes_used: r1b.len() * r2b.len(),
                converged: err < tol,
            });
        }
        if e1 >= tol / 2.0 && !cap1 {
            n1 *= 2;
        }
        if e2 >= tol / 2.0 && !cap2 {
            n2 *= 2;
        }
    }
}

/// Winding number of a closed contour (or a Hankel contour closed at infinity) about `z`.
pub fn winding_number(c: &Contour, z: Complex64) -> f64 {
    let rule = c.rule(c.node_count * 4);
    let mut total = 0.0;
    let pts: Vec<Complex64> = rule.iter().map(|p| p.0).collect();
    for w in pts.windows(2) {
        total += ((w[1] - z) / (w[0] - z)).arg();
    }
    if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
        // closes the curve; for a Hankel contour this stands in for the arc at −∞
        let closing = ((*first - z) / (*last - z)).arg();
        total += closing;
    }
    (total / (2.0 * PI)).round()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{factorial, gamma};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_pi_i() -> Complex64 {
        c(0.0, 2.0 * PI)
    }

    #[test]
    fn residue_of_one_over_s() {
        let circ = Contour::circle(c(0.0, 0.0), 1.0, 16).unwrap();
        let r = integrate(|s| s.inv(), &circ, 1e-13).unwrap();
        assert!((r.value / two_pi_i() - 1.0).norm() < 1e-12);
        assert!(r.converged && r.error_estimate.is_finite());
    }

    #[test]
    fn reciprocal_gamma_on_hankel_contour() {
        let l = hankel_contour(0.5, 40.0, 64).unwrap();
        let r = integrate(|s| s.inv() * s.exp(), &l, 1e-12).unwrap();
        assert!((r.value / two_pi_i() - 1.0).norm() < 1e-10);
        let r = integrate(|s| s.powi(-3) * s.exp(), &l, 1e-12).unwrap();
        assert!((r.value / two_pi_i() - 0.5).norm() < 1e-10);
        // non-integer order: 1/Γ(2.5)
        let r = integrate(|s| s.powf(-2.5) * s.exp(), &l, 1e-12).unwrap();
        assert!((r.value / two_pi_i() - 1.0 / gamma(2.5)).norm() < 1e-10);
    }

    #[test]
    fn hankel_geometry() {
        let l = hankel_contour(0.5, 30.0, 64).unwrap();
        assert_eq!(winding_number(&l, c(-2.0, 0.0)), 1.0);
        assert!(l.leftmost() <= -30.0);
        let min_re = l.rule(1024).iter().map(|p| p.0.re).fold(f64::INFINITY, f64::min);
        assert!(min_re < -29.0);
        assert!(hankel_contour(1.0, 0.5, 16).is_err());
    }

    #[test]
    fn gauss_laguerre_gamma_moment() {
        let gl = Contour::gauss_laguerre(2.0, 128).unwrap();
        let r = integrate(|_| c(1.0, 0.0), &gl, 1e-12).unwrap();
        assert!((r.value.re - 2.0).abs() < 1e-10);
        let plain = Contour::gauss_laguerre(0.0, 128).unwrap();
        let r = integrate(|t| t * t, &plain, 1e-12).unwrap();
        assert!((r.value.re - 2.0).abs() < 1e-10);
    }

    #[test]
    fn separable_double_integrals() {
        let circ = Contour::circle(c(0.0, 0.0), 1.0, 16).unwrap();
        let gl = Contour::gauss_laguerre(0.0, 128).unwrap();
        let f = |s: Complex64, t: Complex64| (s * (t + 1.0)).inv();
        let r = integrate_double(f, &circ, &gl, 1e-10, false).unwrap();
        let a = integrate(|s| s.inv(), &circ, 1e-13).unwrap().value;
        // ∫₀^∞ e^{−t}/(t+1) dt = e·E₁(1)
        let b = integrate(|t| (t + 1.0).inv(), &gl, 1e-13).unwrap().value;
        assert!((b.re - 0.596_347_362_323_194_1).abs() < 1e-10);
        assert!((r.value - a * b).norm() < 1e-10);

        let es = Contour::exp_sinh(0.0, 64).unwrap();
        let r = integrate_double(|s, t| (s - t).exp() / s, &circ, &es, 1e-11, false).unwrap();
        assert!((r.value / two_pi_i() - 1.0).norm() < 1e-10);
    }

    #[test]
    fn nist_hankel_integral() {
        // μ/(2πi)∫_L s^{−ν−u−1}(1−s)^{−μ−1} ds = Γ(u+ν+μ+1)/(Γ(μ)Γ(u+ν+1))
        let (nu, mu, u) = (1.0, 2.0, 0.0);
        let l = hankel_contour(0.5, 400.0, 64).unwrap();
        let r = integrate(|s| s.powf(-nu - u - 1.0) * (1.0 - s).powf(-mu - 1.0), &l, 1e-12).unwrap();
        assert!((mu * r.value / two_pi_i() - 6.0).norm() < 1e-8, "{}", mu * r.value / two_pi_i());
        // non-integer exponent forces a genuine branch cut
        let (nu, mu, u) = (1.0, 2.0, 0.5);
        let r = integrate(|s| s.powf(-nu - u - 1.0) * (1.0 - s).powf(-mu - 1.0), &l, 1e-12).unwrap();
        let want = gamma(u + nu + mu + 1.0) / (gamma(mu) * gamma(u + nu + 1.0));
        assert!((mu * r.value / two_pi_i() - want).norm() < 1e-8);
    }

    #[test]
    fn closed_hankel_is_exact_for_rational_integrands() {
        let l = hankel_contour_at(-1.0, 0.5, 6.0, true, 64).unwrap();
        // poles at −1, −2, −3 inside; residues of 1/((s+1)(s+2)(s+3)) sum to 0
        let r = integrate(|s| ((s + 1.0) * (s + 2.0) * (s + 3.0)).inv() * s, &l, 1e-13).unwrap();
        let want = -0.5 + 2.0 - 1.5;
        assert!((r.value / two_pi_i() - want).norm() < 1e-12);
    }

    #[test]
    fn collision_detected() {
        let a = Contour::circle(c(0.0, 0.0), 1.0, 16).unwrap();
        let b = Contour::circle(c(0.0, 0.0), 1.0, 16).unwrap();
        let e = integrate_double(|s, t| (s - t).inv(), &a, &b, 1e-8, true);
        assert!(matches!(e, Err(QuadError::Collision(_))));
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        let circ = Contour::circle(c(0.0, 0.0), 1.0, 16).unwrap();
        assert!(matches!(integrate(|s| (s - 1.0).inv(), &circ, 1e-10), Err(QuadError::NonFinite(_))));
    }

    #[test]
    fn beta_integral_grid() {
        for nu in 0..=6 {
            for mu in 1..=6 {
                for v in 0..=6 {
                    let gj = Contour::gauss_jacobi((nu + v) as f64, (mu - 1) as f64, 32).unwrap();
                    let r = integrate(|_| c(1.0, 0.0), &gj, 1e-13).unwrap();
                    let want = factorial(mu - 1) * factorial(v + nu) / factorial(v + nu + mu);
                    assert!((r.value.re - want).abs() < 1e-10 * want.max(1e-3), "{nu} {mu} {v}");
                    // same integral with the weight in the integrand, on a plain rule
                    let ts = Contour::tanh_sinh(0.0, 1.0, 64).unwrap();
                    let r = integrate(|t| t.powi((nu + v) as i32) * (1.0 - t).powi(mu as i32 - 1), &ts, 1e-14)
                        .unwrap();
                    assert!((r.value.re - want).abs() < 1e-10 * want.max(1e-3));
                }
            }
        }
    }

    #[test]
    fn doubling_stays_within_error_estimate() {
        let l = hankel_contour(0.5, 40.0, 64).unwrap();
        let r = integrate(|s| s.powf(-1.5) * s.exp(), &l, 1e-11).unwrap();
        let mut finer = l.clone();
        finer.node_count = r.nodes_used * 2;
        let r2 = apply(&|s: Complex64| s.powf(-1.5) * s.exp(), &finer.rule(r.nodes_used * 4)).unwrap();
        assert!((r2 - r.value).norm() <= r.error_estimate.max(1e-13));
    }

    #[test]
    fn vertical_line_gaussian() {
        // (1/√(2π) i)∫ e^{(x−s)²/2} ds over the imaginary axis equals 1 for every x
        let line = Contour::vertical_line(0.0, 12.0, 64).unwrap();
        for &x in &[0.0, 1.5, -3.0] {
            let r = integrate(|s| ((x - s) * (x - s) * 0.5).exp(), &line, 1e-13).unwrap();
            let v = r.value / c(0.0, (2.0 * PI).sqrt());
            assert!((v - 1.0).norm() < 1e-12, "x={x} {v}");
        }
    }

    proptest! {
        #[test]
        fn deformation_invariance(r1 in 0.3f64..0.9, r2 in 1.1f64..3.0, k in 0usize..5) {
            // analytic in the annulus: s^{−k−1} e^s
            let f = |s: Complex64| s.powi(-(k as i32) - 1) * s.exp();
            let a = integrate(f, &Contour::circle(c(0.0, 0.0), r1, 16).unwrap(), 1e-12).unwrap();
            let b = integrate(f, &Contour::circle(c(0.0, 0.0), r2, 16).unwrap(), 1e-12).unwrap();
            let tol = 2.0 * a.error_estimate.max(b.error_estimate).max(1e-13 * (1.0 + a.value.norm()));
            prop_assert!((a.value - b.value).norm() <= tol);
            prop_assert!((a.value / two_pi_i() - 1.0 / factorial(k)).norm() < 1e-11);
        }
    }
}
