//! Closed-form double contour kernels.
//!
//! Wishart, products of Ginibre matrices (vertical line and loop), products of Ginibre
//! matrices with a deterministic source `diag(√a)`, its identity-source limit, and products
//! of truncated unitary matrices together with their biorthogonal system.
//!
//! All double contour integrals here separate as `∫∫ A(s) B(t) / (s − t)`; they are evaluated
//! by tensor-product rules on both contours with node doubling until two levels agree.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    kernel_from_system, BiorthogonalSystem, CorrelationKernel, DualFunction, EnsembleDescriptor, KernelError,
};
use crate::linalg::{sample_haar_unitary, squared_singular_values, truncate, ComplexMatrix, RandomStream};
use crate::poly::{Interval, Polynomial, WeightedFunction};
use crate::quad::{hankel_contour_at, integrate_real, Contour, QuadError};
use crate::special::{log_factorial, log_gamma, meijer_g, meijer_g_complex, MeijerGSpec};
use crate::transform::{iterated_spec, transform_kernel, IteratedKind};

type Cx = Complex64;

fn c(re: f64, im: f64) -> Cx {
    Cx::new(re, im)
}

/// Relative agreement required between two node levels.
const LEVEL_TOL: f64 = 1e-12;
const MAX_NODES: usize = 4096;
const ROUNDING_FLOOR: f64 = 1e3 * f64::EPSILON;

/// Margin of a contour passing at distance `margin` from a point where a factor `z^{±δ}` is
/// evaluated with `z` small: `min(default, max(floor, 1/ln(1/z)))` bounds the growth `z^{−δ}`.
fn edge_margin(z: f64, default: f64, floor: f64) -> f64 {
    if z >= (-1.0 / default).exp() {
        default
    } else {
        (1.0 / -z.ln()).clamp(floor, default)
    }
}

/// Two contours carrying `(1/(2πi)²) ∫_{c1} ds ∫_{c2} dt A(s) B(t) / (s − t)`; the integrand
/// factors are supplied as logarithms and rescaled per contour before summation.
#[derive(Debug, Clone)]
struct DoubleContour {
    c1: Contour,
    c2: Contour,
}

/// Nodes with weighted factors scaled by `e^{−m}`, and `m`.
fn scaled_factors<A>(rule: &[(Cx, Cx)], log_f: &A) -> Result<(Vec<(Cx, Cx)>, f64), KernelError>
where
    A: Fn(Cx) -> Result<Cx, KernelError>,
{
    let logs: Vec<(Cx, Cx)> = rule.iter().map(|&(s, w)| Ok((s, log_f(s)? + w.ln()))).collect::<Result<_, KernelError>>()?;
    let m = logs.iter().map(|p| p.1.re).fold(f64::NEG_INFINITY, f64::max);
    if m.is_nan() || m == f64::INFINITY {
        return Err(KernelError::NonFinite(f64::NAN, f64::NAN));
    }
    let m = if m == f64::NEG_INFINITY { 0.0 } else { m };
    Ok((logs.into_iter().map(|(s, l)| (s, (l - m).exp())).collect(), m))
}

impl DoubleContour {
    fn new(c1: Contour, c2: Contour) -> Self {
        DoubleContour { c1, c2 }
    }

    fn level<A, B>(&self, a: &A, b: &B, n1: usize, n2: usize) -> Result<(Cx, f64), KernelError>
    where
        A: Fn(Cx) -> Result<Cx, KernelError>,
        B: Fn(Cx) -> Result<Cx, KernelError>,
    {
        let (av, ma) = scaled_factors(&self.c1.rule(n1), a)?;
        let (bv, mb) = scaled_factors(&self.c2.rule(n2), b)?;
        let mut sum = c(0.0, 0.0);
        let mut scale = 0.0;
        let mut dmin = f64::INFINITY;
        for &(s, fa) in &av {
            for &(t, fb) in &bv {
                let d = s - t;
                dmin = dmin.min(d.norm());
                let term = fa * fb / d;
                sum += term;
                scale += term.norm();
            }
        }
        if dmin < 1e-8 {
            return Err(QuadError::Collision(dmin).into());
        }
        let f = (ma + mb).exp() / (4.0 * PI * PI);
        if f == 0.0 {
            return Ok((c(0.0, 0.0), 0.0));
        }
        Ok((-sum * f, scale * f))
    }

    fn eval<A, B>(&self, a: A, b: B) -> Result<Cx, KernelError>
    where
        A: Fn(Cx) -> Result<Cx, KernelError>,
        B: Fn(Cx) -> Result<Cx, KernelError>,
    {
        let (mut n1, mut n2) = (self.c1.node_count, self.c2.node_count);
        let (mut prev, _) = self.level(&a, &b, n1, n2)?;
        loop {
            n1 *= 2;
            n2 *= 2;
            let (cur, scale) = self.level(&a, &b, n1, n2)?;
            if !cur.re.is_finite() || !cur.im.is_finite() {
                return Err(KernelError::NonFinite(f64::NAN, f64::NAN));
            }
            let diff = (cur - prev).norm();
            if diff <= (LEVEL_TOL * cur.norm()).max(64.0 * f64::EPSILON * scale) {
                // below the rounding floor of the sum the value is indistinguishable from zero
                if cur.norm() <= ROUNDING_FLOOR * scale {
                    return Ok(c(0.0, 0.0));
                }
                return Ok(cur);
            }
            if n1.max(n2) * 2 > MAX_NODES {
                return Err(KernelError::NotConverged(diff));
            }
            prev = cur;
        }
    }
}

/// Radius in the allowed bands minimizing `log_mag` on a logarithmic grid.
fn pick_radius(log_mag: impl Fn(f64) -> f64, bands: &[(f64, f64)]) -> f64 {
    let mut best = (f64::INFINITY, bands[0].0);
    for &(lo, hi) in bands.iter().filter(|b| b.1 > b.0) {
        for k in 0..=64 {
            let r = lo * (hi / lo).powf(k as f64 / 64.0);
            let v = log_mag(r);
            if v < best.0 {
                best = (v, r);
            }
        }
    }
    best.1
}

fn check_positive(x: f64, y: f64) -> Result<(), KernelError> {
    if x > 0.0 && y > 0.0 {
        Ok(())
    } else {
        Err(KernelError::Unsupported(format!("contour kernel at the hard edge ({x}, {y})")))
    }
}

/// Complex Wishart kernel as a pair of loops: `Σ` around 0 and `Γ` around 1.
///
/// `K(x,y) = (2πi)^{−2} ∮_Σ du ∮_Γ dv e^{xu} v^{n+ν} (u−1)^n / (e^{yv} u^{n+ν} (v−1)^n (u−v))`.
/// `Σ` may also be taken around `Γ`; the residue at `u = v` is entire in `v`.
pub fn wishart_kernel(n: usize, nu: u32) -> Result<CorrelationKernel, KernelError> {
    if n == 0 {
        return Err(KernelError::Precondition("n must be positive".into()));
    }
    let (nf, k) = (n as f64, (n + nu as usize) as f64);
    let label = format!("wishart(n={n},nu={nu})");
    Ok(CorrelationKernel::from_evaluator(n, Interval::HALF_LINE, label, move |xs, y| {
        let x = xs.re;
        if y < 0.0 || x < 0.0 {
            return Ok(c(0.0, 0.0));
        }
        let rho = pick_radius(|r| -y * (1.0 - r) + k * (1.0 + r).ln() - nf * r.ln(), &[(0.02, 0.45)]);
        let sigma = pick_radius(
            |r| x * r + nf * (1.0 + r).ln() - k * r.ln(),
            &[(0.02, 1.0 - rho - 0.1), (1.0 + rho + 0.1, 60.0)],
        );
        let dc = DoubleContour::new(Contour::circle(c(0.0, 0.0), sigma, 32)?, Contour::circle(c(1.0, 0.0), rho, 32)?);
        dc.eval(
            |u| Ok(xs * u + nf * (u - 1.0).ln() - k * u.ln()),
            |v| Ok(-y * v + k * v.ln() - nf * (v - 1.0).ln()),
        )
    }))
}

/// `Σ_{j≤r} log Γ(z + ν_j + 1)` with `ν_0 = 0`.
fn log_gamma_sum(z: Cx, nu: &[f64]) -> Result<Cx, KernelError> {
    let mut acc = log_gamma(z + 1.0)?;
    for v in nu {
        acc += log_gamma(z + v + 1.0)?;
    }
    Ok(acc)
}

/// Squared singular values of `G_r ⋯ G_1`:
///
/// `K(x,y) = (2πi)^{−2} ∫_{−1/2+iℝ} dv ∮_γ du ∏_{j=0}^r Γ(v+ν_j+1)/Γ(u+ν_j+1) · Γ(u−n+1)/Γ(v−n+1)
/// · x^u y^{−v−1} / (v − u)`, with `γ` an ellipse around `0, …, n−1` right of the line.
pub fn product_ginibre_kernel(n: usize, nu: &[u32]) -> Result<CorrelationKernel, KernelError> {
    if n == 0 || nu.is_empty() {
        return Err(KernelError::Precondition("need n ≥ 1 and at least one factor".into()));
    }
    let r = nu.len() as f64;
    let nuf: Vec<f64> = nu.iter().map(|&v| v as f64).collect();
    let nsum: f64 = nuf.iter().sum();
    // |integrand| ~ |Im v|^{n+Σν} e^{−rπ|Im v|/2} along the line
    let height = (2.0 / (r * PI)) * (40.0 + (nf_ln(n) + 1.0) * (n as f64 + nsum + 1.0));
    let half = (n as f64 - 1.0) / 2.0;
    let nfl = n as f64;
    let label = format!("product-ginibre(n={n},nu={nu:?})");
    Ok(CorrelationKernel::from_evaluator(n, Interval::HALF_LINE, label, move |xs, y| {
        check_positive(xs.re, y)?;
        let (lx, ly) = (xs.ln(), y.ln());
        // line at −1/2, moved towards the pole at −1 for small y
        let abscissa = -1.0 + edge_margin(y, 0.5, 0.15);
        let delta = edge_margin(xs.norm(), 0.3, 0.1);
        let dc = DoubleContour::new(
            Contour::vertical_line(abscissa, height, 512)?,
            Contour::ellipse(c(half, 0.0), half + delta, 0.6, 64)?,
        );
        dc.eval(
            |v| {
                Ok(log_gamma_sum(v, &nuf)? - log_gamma(v - nfl + 1.0)? - (v + 1.0) * ly)
            },
            |u| {
                Ok(log_gamma(u - nfl + 1.0)? - log_gamma_sum(u, &nuf)? + u * lx)
            },
        )
    }))
}

fn nf_ln(n: usize) -> f64 {
    (n as f64 + 10.0).ln()
}

/// Logarithm of `Σ_k z^k / ∏_j (k+ν_j)!` for `z ≥ 0`, the growth of the `G^{1,1}_{1,r+1}` factor.
fn log_psi(z: f64, nu: &[u32]) -> f64 {
    let lz = z.max(1e-300).ln();
    let mut best = f64::NEG_INFINITY;
    let mut terms = Vec::new();
    for k in 0..2000usize {
        let t = k as f64 * lz - nu.iter().map(|&v| log_factorial(k + v as usize)).sum::<f64>();
        terms.push(t);
        best = best.max(t);
        if t < best - 40.0 && k > 4 {
            break;
        }
    }
    best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
}

/// `log G^{r,0}_{0,r}(−; ν | z)` at complex `z`; closed form for `r = 1`.
fn log_phi_complex(spec: &MeijerGSpec, nu: &[u32], z: Cx) -> Result<Cx, KernelError> {
    if nu.len() == 1 {
        return Ok(nu[0] as f64 * z.ln() - z);
    }
    Ok(meijer_g_complex(spec, z)?.ln())
}

/// Shared evaluator for the degenerate-source Ginibre kernel with the `u`-contour supplied.
fn ginibre_source_kernel(
    a: Vec<f64>,
    nu: &[u32],
    cu: Contour,
    label: String,
) -> Result<CorrelationKernel, KernelError> {
    let n = a.len();
    let nu = nu.to_vec();
    let psi = MeijerGSpec::ginibre_psi(&nu.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let phi = MeijerGSpec::ginibre_phi(&nu.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let nodes = cu.rule(cu.node_count * 4);
    let inner = nodes.iter().map(|p| p.0.norm()).fold(f64::INFINITY, f64::min);
    let outer = nodes.iter().map(|p| p.0.norm()).fold(0.0, f64::max);
    Ok(CorrelationKernel::from_evaluator(n, Interval::HALF_LINE, label, move |xs, y| {
        check_positive(xs.re, y)?;
        let x = xs.re;
        let sigma = pick_radius(
            |r| log_psi(x / r, &nu) + a.iter().map(|aj| (r + aj).ln()).sum::<f64>() - r.ln(),
            &[(0.02 * inner, 0.7 * inner), (1.3 * outer, 1e3 * (1.0 + outer + x))],
        );
        let dc = DoubleContour::new(Contour::circle(c(0.0, 0.0), sigma, 64)?, cu.clone());
        dc.eval(
            |s| {
                let g = meijer_g_complex(&psi, -xs / s)?;
                Ok(g.ln() + a.iter().map(|&aj| (s - aj).ln()).sum::<Cx>() - s.ln())
            },
            |u| {
                Ok(log_phi_complex(&phi, &nu, y / u)? - u.ln() - a.iter().map(|&aj| (u - aj).ln()).sum::<Cx>())
            },
        )
    }))
}

/// Squared singular values of `G_r ⋯ G_1 diag(√a_1, …, √a_n)`:
///
/// `K(x,y) = (2πi)^{−2} ∮_Σ ds/s ∮_{C_a} du/u G^{1,1}_{1,r+1}(0; 0, −ν | −x/s) G^{r,0}_{0,r}(−; ν | y/u)
/// ∏_j (s−a_j)/(u−a_j) / (s − u)`.
///
/// `C_a` is an ellipse in the right half-plane around all `a_j` (coincident values allowed);
/// `Σ` is a circle around 0, inside or outside `C_a`.
pub fn degenerate_ginibre_kernel(a: &[f64], nu: &[u32]) -> Result<CorrelationKernel, KernelError> {
    if a.is_empty() || nu.is_empty() {
        return Err(KernelError::Precondition("need at least one source value and one factor".into()));
    }
    if a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(KernelError::Precondition("source values a_j must be positive".into()));
    }
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(0.0, f64::max);
    let margin = (0.5 * lo).min(0.3);
    let semi = 0.5 * (hi - lo) + margin;
    let cu = Contour::ellipse(c(0.5 * (lo + hi), 0.0), semi, semi, 64)?;
    ginibre_source_kernel(a.to_vec(), nu, cu, format!("degenerate-ginibre(a={a:?},nu={nu:?})"))
}

/// Identity-source limit of [`degenerate_ginibre_kernel`]: all `a_j = 1`, with `Γ` a circle
/// of radius 1/2 around 1. An alternative form of [`product_ginibre_kernel`].
pub fn identity_source_ginibre_kernel(n: usize, nu: &[u32]) -> Result<CorrelationKernel, KernelError> {
    if n == 0 || nu.is_empty() {
        return Err(KernelError::Precondition("need n ≥ 1 and at least one factor".into()));
    }
    let cu = Contour::circle(c(1.0, 0.0), 0.5, 64)?;
    ginibre_source_kernel(vec![1.0; n], nu, cu, format!("identity-source-ginibre(n={n},nu={nu:?})"))
}

/// `d = n − Σμ_j`; positive values obstruct a determinantal structure.
fn rank_defect(n: usize, mu: &[u32]) -> i64 {
    n as i64 - mu.iter().map(|&m| m as i64).sum::<i64>()
}

fn check_truncated(n: usize, nu: &[u32], mu: &[u32]) -> Result<(), KernelError> {
    if n == 0 || nu.is_empty() || nu.len() != mu.len() {
        return Err(KernelError::Precondition("need n ≥ 1 and equally long, nonempty ν and μ lists".into()));
    }
    if mu.contains(&0) {
        return Err(KernelError::Precondition("μ_j must be at least 1".into()));
    }
    let d = rank_defect(n, mu);
    if d >= 1 {
        return Err(KernelError::Precondition(format!(
            "rank lemma: n = {n} exceeds Σμ_j = {}, so T_r⋯T_1 has a singular value at 1 of multiplicity ≥ {d} \
             and the squared singular values are not a determinantal point process",
            n as i64 - d
        )));
    }
    Ok(())
}

/// Coefficient `∏_l (j+ν_l+μ_l)!/(j+ν_l)!`, exact when it fits in `i128`.
fn falling_ratio(j: usize, nu: &[u32], mu: &[u32]) -> Option<i128> {
    let mut acc: i128 = 1;
    for (&v, &m) in nu.iter().zip(mu) {
        for i in 1..=m as i128 {
            acc = acc.checked_mul(j as i128 + v as i128 + i)?;
        }
    }
    Some(acc)
}

fn binomial_exact(k: usize, j: usize) -> Option<i128> {
    let mut acc: i128 = 1;
    for i in 0..j as i128 {
        acc = acc.checked_mul(k as i128 - i)? / (i + 1);
    }
    Some(acc)
}

/// `P_k(x) = Σ_j (−1)^{k−j} C(k,j) ∏_l (j+ν_l+μ_l)!/(j+ν_l)! x^j`.
pub fn truncated_product_polynomial(k: usize, nu: &[u32], mu: &[u32]) -> Polynomial {
    let coeffs: Vec<f64> = (0..=k)
        .map(|j| {
            let sign = if (k - j) % 2 == 0 { 1.0 } else { -1.0 };
            match (binomial_exact(k, j), falling_ratio(j, nu, mu)) {
                (Some(b), Some(f)) => match b.checked_mul(f) {
                    Some(v) => sign * v as f64,
                    None => sign * b as f64 * f as f64,
                },
                _ => {
                    let lf: f64 = nu
                        .iter()
                        .zip(mu)
                        .map(|(&v, &m)| log_factorial(j + (v + m) as usize) - log_factorial(j + v as usize))
                        .sum();
                    let lb = log_factorial(k) - log_factorial(j) - log_factorial(k - j);
                    sign * (lf + lb).exp()
                }
            }
        })
        .collect();
    Polynomial::from_real(&coeffs)
}

/// `Q_k(y) = (1/k!) G^{r+1,0}_{r+1,r+1}(−k, ν+μ; 0, ν | y)` on `[0, 1]`.
pub fn truncated_product_dual(k: usize, nu: &[u32], mu: &[u32]) -> WeightedFunction {
    let mut a = vec![-(k as f64)];
    a.extend(nu.iter().zip(mu).map(|(&v, &m)| (v + m) as f64));
    let mut b = vec![0.0];
    b.extend(nu.iter().map(|&v| v as f64));
    let spec = MeijerGSpec::new(b.len(), 0, a, b);
    let scale = (-log_factorial(k)).exp();
    WeightedFunction::new(Interval::UNIT, format!("Q_{k}"), move |y| {
        if y >= 1.0 {
            return 0.0;
        }
        meijer_g(&spec, y).map(|g| g * scale).unwrap_or(f64::NAN)
    })
}

/// Biorthogonal system of the squared singular values of `T_r ⋯ T_1`, valid for `n ≤ Σμ_j`.
pub fn truncated_product_system(n: usize, nu: &[u32], mu: &[u32]) -> Result<BiorthogonalSystem, KernelError> {
    check_truncated(n, nu, mu)?;
    let p = (0..n).map(|k| truncated_product_polynomial(k, nu, mu)).collect();
    let q = (0..n).map(|k| DualFunction::Function(truncated_product_dual(k, nu, mu))).collect();
    BiorthogonalSystem::new(p, q, Interval::UNIT, format!("truncated-product(n={n},nu={nu:?},mu={mu:?})"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncatedForm {
    #[default]
    DoubleContour,
    GProductIntegral,
}

/// Correlation kernel of the squared singular values of `T_r ⋯ T_1` (`n ≤ Σμ_j`).
///
/// Double contour form: `(2πi)^{−2} ∫_C ds ∮_γ dt ∏_{j=0}^r Γ(s+1+ν_j)Γ(t+1+ν_j+μ_j) /
/// (Γ(t+1+ν_j)Γ(s+1+ν_j+μ_j)) · x^t y^{−s−1}/(s − t)` with `ν_0 = 0`, `μ_0 = −n`. All Gamma
/// ratios are rational, so `C` is the Hankel loop of radius 1/2 around `(−∞, −1]` closed
/// beyond the last pole; `γ` is an ellipse around `[−1/4, n + 1/4]`.
///
/// G-product form: `−∫₀¹ G^{0,r+1}_{r+1,r+1}(n, −ν−μ; 0, −ν | ux) G^{r+1,0}_{r+1,r+1}(−n, ν+μ; 0, ν | uy) du`.
pub fn truncated_product_kernel(
    n: usize,
    nu: &[u32],
    mu: &[u32],
    form: TruncatedForm,
) -> Result<CorrelationKernel, KernelError> {
    check_truncated(n, nu, mu)?;
    let label = format!("truncated-product(n={n},nu={nu:?},mu={mu:?},{form:?})");
    match form {
        TruncatedForm::DoubleContour => {
            let top = nu.iter().zip(mu).map(|(&v, &m)| (v + m) as f64).fold(1.0, f64::max);
            let shifts: Vec<(f64, u32)> = nu.iter().zip(mu).map(|(&v, &m)| (v as f64, m)).collect();
            let nf = n;
            Ok(CorrelationKernel::from_evaluator(n, Interval::UNIT, label, move |xs, y| {
                check_positive(xs.re, y)?;
                let (lx, ly) = (xs.ln(), y.ln());
                // loop radius 1/2 and margin 1/4, reduced near the hard edge
                let rho = edge_margin(y, 0.5, 0.1);
                let delta = edge_margin(xs.norm(), 0.25, 0.1);
                let dc = DoubleContour::new(
                    hankel_contour_at(-1.0, rho, top, true, 256)?,
                    Contour::ellipse(c(0.5 * n as f64, 0.0), 0.5 * n as f64 + delta, 0.5, 64)?,
                );
                dc.eval(
                    |s| {
                        let mut v = c(1.0, 0.0);
                        for i in 0..nf {
                            v *= s - i as f64;
                        }
                        for &(nuj, m) in &shifts {
                            for i in 1..=m {
                                v /= s + nuj + i as f64;
                            }
                        }
                        Ok(v.ln() - (s + 1.0) * ly)
                    },
                    |t| {
                        let mut v = c(1.0, 0.0);
                        for i in 0..nf {
                            v /= t - i as f64;
                        }
                        for &(nuj, m) in &shifts {
                            for i in 1..=m {
                                v *= t + nuj + i as f64;
                            }
                        }
                        Ok(v.ln() + t * lx)
                    },
                )
            }))
        }
        TruncatedForm::GProductIntegral => {
            let mut a1 = vec![n as f64];
            a1.extend(nu.iter().zip(mu).map(|(&v, &m)| -((v + m) as f64)));
            let mut b1 = vec![0.0];
            b1.extend(nu.iter().map(|&v| -(v as f64)));
            let g1 = MeijerGSpec::new(0, a1.len(), a1, b1);
            let mut a2 = vec![-(n as f64)];
            a2.extend(nu.iter().zip(mu).map(|(&v, &m)| (v + m) as f64));
            let mut b2 = vec![0.0];
            b2.extend(nu.iter().map(|&v| v as f64));
            let g2 = MeijerGSpec::new(b2.len(), 0, a2, b2);
            Ok(CorrelationKernel::from_evaluator(n, Interval::UNIT, label, move |xs, y| {
                if xs.im != 0.0 {
                    return Err(KernelError::Unsupported("G-product form at complex x".into()));
                }
                let x = xs.re;
                check_positive(x, y)?;
                let failure = std::cell::RefCell::new(None);
                let r = integrate_real(
                    |u| match (meijer_g(&g1, u * x), meijer_g(&g2, u * y)) {
                        (Ok(p), Ok(q)) => p * q,
                        (Err(e), _) | (_, Err(e)) => {
                            failure.borrow_mut().get_or_insert(e);
                            0.0
                        }
                    },
                    0.0,
                    1.0,
                    1e-13,
                )?;
                if let Some(e) = failure.into_inner() {
                    return Err(e.into());
                }
                if !r.converged {
                    return Err(KernelError::NotConverged(r.error_estimate));
                }
                Ok(-r.value)
            }))
        }
    }
}

/// Outcome of [`rank_at_one_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// `n − Σμ_j`.
    pub d: i64,
    /// Singular values within `1e-8` of 1, per trial.
    pub counts: Vec<usize>,
    pub min_count: usize,
    /// `min_count ≥ d` (vacuous for `d ≤ 0`).
    pub holds: bool,
}

/// Counts singular values of `T_r ⋯ T_1` at 1 over independent trials. `T_j` is the
/// `(n+ν_j) × (n+ν_{j−1})` truncation of a Haar unitary of size `n+ν_j+μ_j`, `ν_0 = 0`.
pub fn rank_at_one_check(
    n: usize,
    nu: &[u32],
    mu: &[u32],
    trials: usize,
    rng: &RandomStream,
) -> Result<RankReport, KernelError> {
    if n == 0 || nu.is_empty() || nu.len() != mu.len() || mu.contains(&0) {
        return Err(KernelError::Precondition("need n ≥ 1, equal nonempty ν and μ lists, μ_j ≥ 1".into()));
    }
    let mut prev = 0usize;
    for (&v, &m) in nu.iter().zip(mu) {
        if (v + m) as usize + n < n + prev {
            return Err(KernelError::Precondition("m_j = n+ν_j+μ_j must be at least n+ν_{j−1}".into()));
        }
        prev = v as usize;
    }
    let counts = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.split(i as u64);
            let mut y = ComplexMatrix::identity(n).map_err(lin)?;
            let mut cols = n;
            for (&v, &m) in nu.iter().zip(mu) {
                let rows = n + v as usize;
                let u = sample_haar_unitary(rows + m as usize, &mut stream).map_err(lin)?;
                let t = truncate(&u, rows, cols).map_err(lin)?;
                y = t.matmul(&y).map_err(lin)?;
                cols = rows;
            }
            let s = squared_singular_values(&y).map_err(lin)?;
            Ok(s.points.iter().filter(|&&l| (l.max(0.0).sqrt() - 1.0).abs() < 1e-8).count())
        })
        .collect::<Result<Vec<usize>, KernelError>>()?;
    let d = rank_defect(n, mu);
    let min_count = counts.iter().copied().min().unwrap_or(0);
    Ok(RankReport { d, holds: d <= 0 || min_count as i64 >= d, counts, min_count })
}

fn lin(e: crate::linalg::LinalgError) -> KernelError {
    KernelError::Precondition(e.to_string())
}

/// Source of the product: identity, a deterministic `diag(√a)`, or a base ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProductSource {
    Identity { n: usize },
    Diag { a: Vec<f64> },
    Ensemble(EnsembleDescriptor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProductKind {
    GinibreProduct,
    TruncatedProduct,
}

/// A product `M_r ⋯ M_1 X` of Ginibre or truncated unitary factors applied to a source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductSpec {
    pub kind: ProductKind,
    pub nu: Vec<u32>,
    #[serde(default)]
    pub mu: Vec<u32>,
    pub source: ProductSource,
}

impl ProductSpec {
    pub fn r(&self) -> usize {
        self.nu.len()
    }

    pub fn n(&self) -> usize {
        match &self.source {
            ProductSource::Identity { n } => *n,
            ProductSource::Diag { a } => a.len(),
            ProductSource::Ensemble(d) => d.n(),
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.nu.is_empty() {
            return Err(KernelError::Precondition("at least one factor required".into()));
        }
        match self.kind {
            ProductKind::GinibreProduct if !self.mu.is_empty() => {
                Err(KernelError::Precondition("μ applies to truncated products only".into()))
            }
            ProductKind::TruncatedProduct if self.mu.len() != self.nu.len() || self.mu.contains(&0) => {
                Err(KernelError::Precondition("truncated products need one μ_j ≥ 1 per factor".into()))
            }
            _ => Ok(()),
        }
    }

    /// Kernel of the squared singular values; ensemble sources go through the transform route.
    pub fn kernel(&self) -> Result<CorrelationKernel, KernelError> {
        self.validate()?;
        match (&self.kind, &self.source) {
            (ProductKind::GinibreProduct, ProductSource::Identity { n }) => product_ginibre_kernel(*n, &self.nu),
            (ProductKind::GinibreProduct, ProductSource::Diag { a }) => degenerate_ginibre_kernel(a, &self.nu),
            (ProductKind::TruncatedProduct, ProductSource::Identity { n }) => {
                truncated_product_kernel(*n, &self.nu, &self.mu, TruncatedForm::DoubleContour)
            }
            (ProductKind::TruncatedProduct, ProductSource::Diag { .. }) => {
                Err(KernelError::Unsupported("truncated products with a deterministic source".into()))
            }
            (kind, ProductSource::Ensemble(d)) => {
                let sys = d.system()?;
                let base = kernel_from_system(&sys)?;
                let it = match kind {
                    ProductKind::GinibreProduct => IteratedKind::Ginibre,
                    ProductKind::TruncatedProduct => IteratedKind::Truncated,
                };
                transform_kernel(&base, &iterated_spec(it, &self.nu, &self.mu)?)
            }
        }
    }
}

/// `K(x, y)` over the grid `xs × ys`, row-major in `x`, evaluated in parallel.
pub fn kernel_grid(k: &CorrelationKernel, xs: &[f64], ys: &[f64]) -> Result<Vec<(f64, f64, f64)>, KernelError> {
    let pts: Vec<(f64, f64)> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect();
    pts.par_iter().map(|&(x, y)| Ok((x, y, k.eval(x, y)?))).collect()
}

/// Writes `x,y,K` rows with 17 significant digits.
pub fn write_kernel_grid_csv<W: Write>(rows: &[(f64, f64, f64)], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "K"])?;
    for &(x, y, k) in rows {
        w.write_record([sci17(x), sci17(y), sci17(k)])?;
    }
    w.flush()?;
    Ok(())
}

/// Scientific notation with 17 significant digits.
pub fn sci17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{jacobi_ensemble, laguerre_ensemble, max_determinant_discrepancy};
    use crate::linalg::sample_ginibre;
    use crate::transform::TransformSpec;
    use proptest::prelude::*;

    fn sets_half_line() -> Vec<Vec<f64>> {
        vec![vec![0.7], vec![0.4, 2.3], vec![1.1, 3.5, 6.0]]
    }

    fn sets_unit() -> Vec<Vec<f64>> {
        vec![vec![0.3], vec![0.15, 0.62], vec![0.2, 0.45, 0.8]]
    }

    fn check_density_nonnegative(k: &CorrelationKernel, grid: &[f64]) {
        for &x in grid {
            let d = k.density(x).unwrap();
            assert!(d >= -1e-8, "{} at {x}: {d}", k.label);
        }
    }

    #[test]
    fn wishart_single_point() {
        let k = wishart_kernel(1, 0).unwrap();
        assert!((k.eval(1.0, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-8);
        assert!((k.eval(0.5, 2.0).unwrap() - (-2.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn wishart_trace_and_laguerre() {
        let k = wishart_kernel(3, 1).unwrap();
        assert!((k.trace(1e-9).unwrap() - 3.0).abs() < 1e-6);
        let (_, sys) = laguerre_ensemble(3, 1).unwrap();
        let lag = kernel_from_system(&sys).unwrap();
        assert!(max_determinant_discrepancy(&k, &lag, &sets_half_line()).unwrap() < 1e-7);
    }

    #[test]
    fn wishart_matches_single_factor_product() {
        let w = wishart_kernel(2, 1).unwrap();
        let p = product_ginibre_kernel(2, &[1]).unwrap();
        assert!(max_determinant_discrepancy(&w, &p, &sets_half_line()).unwrap() < 1e-7);
    }

    #[test]
    fn product_ginibre_single_trace() {
        let k = product_ginibre_kernel(1, &[0]).unwrap();
        assert!((k.trace(1e-9).unwrap() - 1.0).abs() < 1e-6);
        assert!((k.eval(0.8, 0.8).unwrap() - (-0.8f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn product_ginibre_two_factors_matches_transform_route() {
        let k = product_ginibre_kernel(2, &[0, 0]).unwrap();
        let (_, sys) = laguerre_ensemble(2, 0).unwrap();
        let t = transform_kernel(&kernel_from_system(&sys).unwrap(), &TransformSpec::ginibre(0).unwrap()).unwrap();
        assert!(max_determinant_discrepancy(&k, &t, &sets_half_line()).unwrap() < 1e-6);
    }

    #[test]
    fn product_ginibre_matches_identity_source_form() {
        let k = product_ginibre_kernel(2, &[0, 1]).unwrap();
        let alt = identity_source_ginibre_kernel(2, &[0, 1]).unwrap();
        assert!(max_determinant_discrepancy(&k, &alt, &sets_half_line()).unwrap() < 1e-6);
        assert!((k.trace(1e-9).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn product_ginibre_three_points_real() {
        let k = product_ginibre_kernel(3, &[0, 0]).unwrap();
        for &(x, y) in &[(0.3, 1.7), (2.5, 0.9), (5.0, 5.0)] {
            let v = k.eval_complex(c(x, 0.0), y).unwrap();
            assert!(v.im.abs() <= 1e-9 * (1.0 + v.re.abs()), "{v}");
        }
    }

    #[test]
    fn degenerate_all_ones_matches_identity_source() {
        let d = degenerate_ginibre_kernel(&[1.0, 1.0], &[0, 1]).unwrap();
        let alt = identity_source_ginibre_kernel(2, &[0, 1]).unwrap();
        for &(x, y) in &[(0.4, 0.4), (1.3, 2.2), (3.0, 0.7)] {
            let (a, b) = (d.eval(x, y).unwrap(), alt.eval(x, y).unwrap());
            assert!((a - b).abs() < 1e-8, "{x} {y}: {a} {b}");
        }
    }

    #[test]
    fn degenerate_trace() {
        let k = degenerate_ginibre_kernel(&[0.5, 1.5], &[0]).unwrap();
        assert!((k.trace(1e-9).unwrap() - 2.0).abs() < 1e-6);
        check_density_nonnegative(&k, &[0.05, 0.5, 1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn degenerate_matches_transform_of_atoms() {
        use crate::ensemble::{degenerate_ensemble, DegenerateVariant};
        let a = [1.0, 2.0];
        let k = degenerate_ginibre_kernel(&a, &[1]).unwrap();
        let sys = degenerate_ensemble(&a, DegenerateVariant::Monic).unwrap();
        let t = transform_kernel(&kernel_from_system(&sys).unwrap(), &TransformSpec::ginibre(1).unwrap()).unwrap();
        assert!(max_determinant_discrepancy(&k, &t, &sets_half_line()).unwrap() < 1e-6);
    }

    #[test]
    fn degenerate_single_source_against_samples() {
        // x = 2|g|²: the density is e^{−x/2}/2
        let k = degenerate_ginibre_kernel(&[2.0], &[0]).unwrap();
        let mut rng = RandomStream::new(11);
        let samples: Vec<f64> = (0..20000)
            .map(|_| {
                let g = sample_ginibre(1, 1, &mut rng).unwrap();
                2.0 * g.get(0, 0).norm_sqr()
            })
            .collect();
        let edges = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0];
        for w in edges.windows(2) {
            let observed = samples.iter().filter(|&&x| x >= w[0] && x < w[1]).count() as f64 / samples.len() as f64;
            let predicted = integrate_real(|x| k.density(x).unwrap(), w[0], w[1], 1e-10).unwrap().value.re;
            let se = (predicted * (1.0 - predicted) / samples.len() as f64).sqrt();
            assert!((observed - predicted).abs() < 4.0 * se, "[{}, {}): {observed} vs {predicted}", w[0], w[1]);
            let exact = (-w[0] / 2.0f64).exp() - (-w[1] / 2.0f64).exp();
            assert!((predicted - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_polynomials() {
        assert_eq!(truncated_product_polynomial(0, &[0], &[1]).coefficients(), &[c(1.0, 0.0)]);
        let p1 = truncated_product_polynomial(1, &[0], &[1]);
        assert_eq!(p1.coefficients(), &[c(-1.0, 0.0), c(2.0, 0.0)]);
        // P_0 = ∏ (ν+μ)!/ν!
        let p0 = truncated_product_polynomial(0, &[1, 2], &[2, 3]);
        assert_eq!(p0.coeff(0).re, 6.0 * 60.0);
    }

    #[test]
    fn truncated_polynomials_match_meijer_form() {
        // P_k = k! G^{0,r+1}_{r+1,r+1}(k+1, −ν−μ; 0, −ν | x)
        let (nu, mu) = ([0u32, 1], [2u32, 2]);
        for k in 0..3usize {
            let p = truncated_product_polynomial(k, &nu, &mu);
            let mut a = vec![k as f64 + 1.0];
            a.extend(nu.iter().zip(&mu).map(|(&v, &m)| -((v + m) as f64)));
            let mut b = vec![0.0];
            b.extend(nu.iter().map(|&v| -(v as f64)));
            let g = MeijerGSpec::new(0, 3, a, b);
            for &x in &[0.2, 0.6, 0.9] {
                let want = crate::special::factorial(k) * meijer_g(&g, x).unwrap();
                assert!((p.eval_re(x) - want).abs() < 1e-9 * (1.0 + want.abs()), "k={k} x={x}");
            }
        }
    }

    #[test]
    fn truncated_gram_identity() {
        let sys = truncated_product_system(3, &[0, 1], &[2, 2]).unwrap();
        let (off, diag) = crate::ensemble::identity_defect(&sys.gram(1e-11).unwrap());
        assert!(off < 1e-7 && diag < 1e-7, "{off} {diag}");
    }

    #[test]
    fn truncated_route_triangle() {
        for (n, nu, mu) in [(2usize, vec![0u32, 0], vec![1u32, 1]), (3, vec![0, 1], vec![2, 2]), (1, vec![1], vec![1])] {
            let sum = kernel_from_system(&truncated_product_system(n, &nu, &mu).unwrap()).unwrap();
            let dc = truncated_product_kernel(n, &nu, &mu, TruncatedForm::DoubleContour).unwrap();
            let gp = truncated_product_kernel(n, &nu, &mu, TruncatedForm::GProductIntegral).unwrap();
            let sets = sets_unit();
            assert!(max_determinant_discrepancy(&sum, &dc, &sets).unwrap() < 1e-6, "n={n}");
            assert!(max_determinant_discrepancy(&sum, &gp, &sets).unwrap() < 1e-6, "n={n}");
            assert!(max_determinant_discrepancy(&dc, &gp, &sets).unwrap() < 1e-6, "n={n}");
        }
    }

    #[test]
    fn truncated_single_factor_is_jacobi() {
        let k = truncated_product_kernel(2, &[1], &[3], TruncatedForm::DoubleContour).unwrap();
        let (_, sys) = jacobi_ensemble(2, 1, 6).unwrap();
        let j = kernel_from_system(&sys).unwrap();
        assert!(max_determinant_discrepancy(&k, &j, &sets_unit()).unwrap() < 1e-6);
    }

    #[test]
    fn truncated_trace_and_support() {
        let k = truncated_product_kernel(3, &[0, 0], &[2, 1], TruncatedForm::DoubleContour).unwrap();
        assert!((k.trace(1e-9).unwrap() - 3.0).abs() < 1e-6);
        let k1 = truncated_product_kernel(1, &[0], &[1], TruncatedForm::DoubleContour).unwrap();
        check_density_nonnegative(&k1, &[0.01, 0.2, 0.5, 0.9, 0.99]);
        for &x in &[1.2, 3.0, -0.5] {
            assert!(k1.density(x).unwrap().abs() < 1e-8);
        }
        // T_1 a 1×1 truncation of a 2×2 Haar unitary: |u_11|² is uniform
        assert!((k1.density(0.37).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn truncated_condition_enforced() {
        let err = truncated_product_system(3, &[0], &[2]).unwrap_err();
        assert!(err.to_string().contains("singular value at 1"), "{err}");
        assert!(truncated_product_kernel(4, &[0, 0], &[1, 2], TruncatedForm::GProductIntegral).is_err());
    }

    #[test]
    fn rank_at_one() {
        let rng = RandomStream::new(5);
        let r = rank_at_one_check(4, &[0, 0], &[1, 1], 20, &rng).unwrap();
        assert_eq!(r.d, 2);
        assert!(r.holds && r.min_count >= 2, "{r:?}");
        let r = rank_at_one_check(2, &[0], &[1], 20, &rng).unwrap();
        assert!(r.holds && r.min_count >= 1);
        let r = rank_at_one_check(2, &[0], &[2], 20, &rng).unwrap();
        assert!(r.d <= 0 && r.holds);
        assert_eq!(r.counts.len(), 20);
    }

    #[test]
    fn product_spec_routes() {
        let spec: ProductSpec = serde_json::from_str(
            r#"{"kind":"truncated-product","nu":[0],"mu":[2],"source":{"identity":{"n":2}}}"#,
        )
        .unwrap();
        assert_eq!((spec.r(), spec.n()), (1, 2));
        let k = spec.kernel().unwrap();
        assert!((k.trace(1e-9).unwrap() - 2.0).abs() < 1e-6);
        let bad = r#"{"kind":"ginibre-product","nu":[0],"mu":[1],"source":{"identity":{"n":1}}}"#;
        assert!(serde_json::from_str::<ProductSpec>(bad).unwrap().kernel().is_err());
        assert!(serde_json::from_str::<ProductSpec>(r#"{"kind":"ginibre-product","nu":[0],"extra":1,"source":{"identity":{"n":1}}}"#).is_err());
    }

    #[test]
    fn grid_csv_precision() {
        let k = wishart_kernel(1, 0).unwrap();
        let rows = kernel_grid(&k, &[0.5, 1.0], &[1.0]).unwrap();
        let mut buf = Vec::new();
        write_kernel_grid_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,K"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "5.0000000000000000e-1");
        let back: f64 = row[2].parse().unwrap();
        assert_eq!(back, rows[0].2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn wishart_density_nonnegative(n in 1usize..4, nu in 0u32..3, x in 0.01f64..15.0) {
            let k = wishart_kernel(n, nu).unwrap();
            prop_assert!(k.density(x).unwrap() >= -1e-8);
        }

        #[test]
        fn truncated_density_nonnegative(nu in 0u32..2, mu1 in 1u32..3, mu2 in 1u32..3, x in 0.01f64..0.99) {
            let n = ((mu1 + mu2) as usize).min(3);
            let k = truncated_product_kernel(n, &[nu, 0], &[mu1, mu2], TruncatedForm::DoubleContour).unwrap();
            prop_assert!(k.density(x).unwrap() >= -1e-8);
        }
    }
}
