//! Sampling of the underlying matrix models and statistical comparison of
//! empirical spectra with kernel predictions.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::closed::{degenerate_ginibre_kernel, product_ginibre_kernel, truncated_product_kernel, TruncatedForm};
use crate::ensemble::{
    average_char_poly_mc, degenerate_ensemble, gue_ensemble, kernel_from_system, laguerre_ensemble, CorrelationKernel,
    DegenerateVariant, KernelError,
};
use crate::linalg::{
    eigenvalues_hermitian, sample_ginibre, sample_gue, sample_haar_unitary, squared_singular_values, truncate,
    ComplexMatrix, LinalgError, RandomStream, SpectrumKind, SpectrumSample,
};
use crate::poly::{hermite_monic, poly_from_roots, Polynomial};
use crate::quad::gauss_legendre;
use crate::transform::{avg_char_poly_transformed, transform_kernel, TransformDescriptor, TransformSpec};

/// Samples per parallel chunk; chunk `c` draws from `rng.split(c)`.
pub const CHUNK: usize = 1024;
/// A squared singular value counts as a unit atom when `|√λ − 1|` is below this.
pub const UNIT_ATOM_TOL: f64 = 1e-8;
pub const Z_THRESHOLD: f64 = 4.0;
pub const P_THRESHOLD: f64 = 1e-3;
pub const MIN_EXPECTED: f64 = 10.0;
pub const TRACE_TOLERANCE: f64 = 1e-3;
/// Stderr multiple for average characteristic polynomial checks.
pub const CHAR_POLY_SIGMAS: f64 = 3.0;

const CELLS: usize = 200;
const TAIL_CELLS: usize = 24;
const TAIL_WIDTHS: f64 = 3.0;
const GRADING: usize = 24;
const GL_NODES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("{0}")]
    Linalg(#[from] LinalgError),
    #[error("{0}")]
    Kernel(#[from] KernelError),
    #[error("too few samples for binning: {points} points, {bins} bins")]
    TooFewSamples { points: usize, bins: usize },
}

/// A random matrix model together with its particle count `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: usize,
    pub construction: Construction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Construction {
    /// `H` with density `∝ exp(−tr H²/2)`.
    Gue {},
    /// The `n × n` identity.
    Identity {},
    /// `diag(a)` as a Hermitian matrix, `diag(√a)` as a product source; either way the spectrum is `a`.
    Deterministic { a: Vec<f64> },
    /// `M + H` with `M` Hermitian (a product `Y` enters as `Y*Y`) and `H` an independent GUE matrix.
    GuePlus { base: Box<ModelSpec> },
    /// `G_r ⋯ G_1 X`, `G_j` Ginibre of size `(n+ν_j) × (rows of the previous factor)`.
    GinibreChain { nu: Vec<u32>, source: Box<ModelSpec> },
    /// `T_r ⋯ T_1 X`, `T_j` the `(n+ν_j) × (rows of the previous factor)` block of a Haar unitary of size `n+ν_j+μ_j`.
    TruncatedChain { nu: Vec<u32>, mu: Vec<u32>, source: Box<ModelSpec> },
}

impl ModelSpec {
    pub fn gue(n: usize) -> Self {
        ModelSpec { n, construction: Construction::Gue {} }
    }

    pub fn identity(n: usize) -> Self {
        ModelSpec { n, construction: Construction::Identity {} }
    }

    pub fn deterministic(a: Vec<f64>) -> Self {
        ModelSpec { n: a.len(), construction: Construction::Deterministic { a } }
    }

    /// Squared singular values of an `(n+ν) × n` Ginibre matrix.
    pub fn laguerre(n: usize, nu: u32) -> Self {
        ModelSpec::ginibre_chain(vec![nu], ModelSpec::identity(n))
    }

    pub fn gue_plus(base: ModelSpec) -> Self {
        ModelSpec { n: base.n, construction: Construction::GuePlus { base: Box::new(base) } }
    }

    pub fn ginibre_chain(nu: Vec<u32>, source: ModelSpec) -> Self {
        ModelSpec { n: source.n, construction: Construction::GinibreChain { nu, source: Box::new(source) } }
    }

    pub fn truncated_chain(nu: Vec<u32>, mu: Vec<u32>, source: ModelSpec) -> Self {
        ModelSpec { n: source.n, construction: Construction::TruncatedChain { nu, mu, source: Box::new(source) } }
    }

    /// The model obtained by applying `t` to `self`.
    pub fn transformed(&self, t: &TransformDescriptor) -> Self {
        let base = self.clone();
        match t {
            TransformDescriptor::GueAdd {} => ModelSpec::gue_plus(base),
            TransformDescriptor::Ginibre { nu } => ModelSpec::ginibre_chain(vec![*nu], base),
            TransformDescriptor::Truncated { nu, mu } => ModelSpec::truncated_chain(vec![*nu], vec![*mu], base),
            TransformDescriptor::IteratedGinibre { nu } => ModelSpec::ginibre_chain(nu.clone(), base),
            TransformDescriptor::IteratedTruncated { nu, mu } => ModelSpec::truncated_chain(nu.clone(), mu.clone(), base),
        }
    }

    pub fn spectrum_kind(&self) -> SpectrumKind {
        match self.construction {
            Construction::GinibreChain { .. } | Construction::TruncatedChain { .. } => SpectrumKind::SquaredSingularValues,
            _ => SpectrumKind::Eigenvalues,
        }
    }

    /// Number of rows of the matrix used as a product source.
    fn factor_rows(&self) -> Result<usize, ModelError> {
        match &self.construction {
            Construction::Identity {} | Construction::Deterministic { .. } => Ok(self.n),
            Construction::GinibreChain { nu, .. } | Construction::TruncatedChain { nu, .. } => {
                Ok(self.n + *nu.last().unwrap_or(&0) as usize)
            }
            Construction::Gue {} | Construction::GuePlus { .. } => Err(ModelError::Dimension(
                "a Hermitian GUE model cannot serve as a product source".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n == 0 {
            return Err(ModelError::Dimension("n must be at least 1".into()));
        }
        match &self.construction {
            Construction::Gue {} | Construction::Identity {} => Ok(()),
            Construction::Deterministic { a } => {
                if a.len() != self.n {
                    return Err(ModelError::Dimension(format!("{} source values for n = {}", a.len(), self.n)));
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::Dimension("source values must be finite".into()));
                }
                Ok(())
            }
            Construction::GuePlus { base } => {
                self.check_inner(base)?;
                base.validate()
            }
            Construction::GinibreChain { nu, source } => {
                self.check_inner(source)?;
                source.validate()?;
                source.factor_rows()?;
                if nu.is_empty() {
                    return Err(ModelError::Dimension("empty ν list".into()));
                }
                if let Construction::Deterministic { a } = &source.construction {
                    if a.iter().any(|&v| v < 0.0) {
                        return Err(ModelError::Dimension("product source values must be nonnegative".into()));
                    }
                }
                Ok(())
            }
            Construction::TruncatedChain { nu, mu, source } => {
                self.check_inner(source)?;
                source.validate()?;
                if nu.is_empty() || nu.len() != mu.len() {
                    return Err(ModelError::Dimension(format!("{} ν values and {} μ values", nu.len(), mu.len())));
                }
                if mu.contains(&0) {
                    return Err(ModelError::Dimension("each truncation needs μ_j ≥ 1".into()));
                }
                if let Construction::Deterministic { a } = &source.construction {
                    if a.iter().any(|&v| v < 0.0) {
                        return Err(ModelError::Dimension("product source values must be nonnegative".into()));
                    }
                }
                let mut cols = source.factor_rows()?;
                for (j, (&v, &u)) in nu.iter().zip(mu).enumerate() {
                    let rows = self.n + v as usize;
                    let m = rows + u as usize;
                    if cols > m {
                        return Err(ModelError::Dimension(format!(
                            "factor {}: unitary size n+ν+μ = {m} is smaller than the {cols} columns required",
                            j + 1
                        )));
                    }
                    cols = rows;
                }
                Ok(())
            }
        }
    }

    fn check_inner(&self, inner: &ModelSpec) -> Result<(), ModelError> {
        if inner.n != self.n {
            return Err(ModelError::Dimension(format!("inner model has n = {}, outer n = {}", inner.n, self.n)));
        }
        Ok(())
    }

    fn hermitian_matrix(&self, rng: &mut RandomStream) -> Result<ComplexMatrix, ModelError> {
        let n = self.n;
        Ok(match &self.construction {
            Construction::Gue {} => sample_gue(n, rng)?,
            Construction::Identity {} => ComplexMatrix::identity(n)?,
            Construction::Deterministic { a } => ComplexMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    a[i].into()
                } else {
                    0.0.into()
                }
            })?,
            Construction::GuePlus { base } => {
                let m = base.hermitian_matrix(rng)?;
                let h = sample_gue(n, rng)?;
                ComplexMatrix::from_fn(n, n, |i, j| m.get(i, j) + h.get(i, j))?
            }
            Construction::GinibreChain { .. } | Construction::TruncatedChain { .. } => {
                let y = self.factor_matrix(rng)?;
                y.adjoint().matmul(&y)?
            }
        })
    }

    fn factor_matrix(&self, rng: &mut RandomStream) -> Result<ComplexMatrix, ModelError> {
        let n = self.n;
        match &self.construction {
            Construction::Identity {} => Ok(ComplexMatrix::identity(n)?),
            Construction::Deterministic { a } => Ok(ComplexMatrix::diag_sqrt(a)?),
            Construction::GinibreChain { nu, source } => {
                let mut y = source.factor_matrix(rng)?;
                for &v in nu {
                    let g = sample_ginibre(n + v as usize, y.rows(), rng)?;
                    y = g.matmul(&y)?;
                }
                Ok(y)
            }
            Construction::TruncatedChain { nu, mu, source } => {
                let mut y = source.factor_matrix(rng)?;
                for (&v, &u) in nu.iter().zip(mu) {
                    let rows = n + v as usize;
                    let w = sample_haar_unitary(rows + u as usize, rng)?;
                    y = truncate(&w, rows, y.rows())?.matmul(&y)?;
                }
                Ok(y)
            }
            Construction::Gue {} | Construction::GuePlus { .. } => {
                Err(ModelError::Dimension("a Hermitian GUE model cannot serve as a product source".into()))
            }
        }
    }

    /// One spectrum: eigenvalues for Hermitian models, squared singular values for chains.
    pub fn sample_one(&self, rng: &mut RandomStream) -> Result<SpectrumSample, ModelError> {
        match self.spectrum_kind() {
            SpectrumKind::SquaredSingularValues => Ok(squared_singular_values(&self.factor_matrix(rng)?)?),
            SpectrumKind::Eigenvalues => match &self.construction {
                Construction::Identity {} => Ok(SpectrumSample::new(vec![1.0; self.n], SpectrumKind::Eigenvalues)),
                Construction::Deterministic { a } => Ok(SpectrumSample::new(a.clone(), SpectrumKind::Eigenvalues)),
                _ => Ok(eigenvalues_hermitian(&self.hermitian_matrix(rng)?)?),
            },
        }
    }

    /// `d = n − Σμ` when the model is a truncated chain on the identity with `n > Σμ`.
    pub fn unit_atom_count(&self) -> usize {
        match &self.construction {
            Construction::TruncatedChain { mu, source, .. } if source.construction == (Construction::Identity {}) => {
                self.n.saturating_sub(mu.iter().map(|&u| u as usize).sum())
            }
            _ => 0,
        }
    }

    /// Correlation kernel of the model: closed forms where available, transform route otherwise.
    pub fn kernel(&self) -> Result<CorrelationKernel, ModelError> {
        self.validate()?;
        let n = self.n;
        let k = match &self.construction {
            Construction::Gue {} => kernel_from_system(&gue_ensemble(n)?.1)?,
            Construction::Identity {} => {
                return Err(KernelError::Unsupported("the identity has no correlation kernel".into()).into())
            }
            Construction::Deterministic { a } => kernel_from_system(&degenerate_ensemble(a, DegenerateVariant::Monic)?)?,
            Construction::GuePlus { base } => transform_kernel(&base.kernel()?, &TransformSpec::gue_add())?,
            Construction::GinibreChain { nu, source } => match &source.construction {
                Construction::Identity {} if nu.len() == 1 => kernel_from_system(&laguerre_ensemble(n, nu[0])?.1)?,
                Construction::Identity {} => product_ginibre_kernel(n, nu)?,
                Construction::Deterministic { a } => degenerate_ginibre_kernel(a, nu)?,
                _ => transform_kernel(&source.kernel()?, &chain_spec(nu, &[])?)?,
            },
            Construction::TruncatedChain { nu, mu, source } => match &source.construction {
                Construction::Identity {} => truncated_product_kernel(n, nu, mu, TruncatedForm::DoubleContour)?,
                _ => transform_kernel(&source.kernel()?, &chain_spec(nu, mu)?)?,
            },
        };
        Ok(k)
    }

    /// Average characteristic polynomial `E ∏(x − x_j)`.
    pub fn char_poly(&self) -> Result<Polynomial, ModelError> {
        self.validate()?;
        Ok(match &self.construction {
            Construction::Gue {} => hermite_monic(self.n),
            Construction::Identity {} => poly_from_roots(&vec![1.0; self.n]),
            Construction::Deterministic { a } => poly_from_roots(a),
            Construction::GuePlus { base } => avg_char_poly_transformed(&base.char_poly()?, &TransformSpec::gue_add())?,
            Construction::GinibreChain { nu, source } => {
                let mut p = source.char_poly()?;
                for &v in nu {
                    p = avg_char_poly_transformed(&p, &TransformSpec::ginibre(v)?)?;
                }
                p
            }
            Construction::TruncatedChain { nu, mu, source } => {
                let mut p = source.char_poly()?;
                for (&v, &u) in nu.iter().zip(mu) {
                    p = avg_char_poly_transformed(&p, &TransformSpec::truncated(v, u)?)?;
                }
                p
            }
        })
    }
}

/// Single-factor transforms use the direct `φ/ψ` pair; longer chains the iterated one.
fn chain_spec(nu: &[u32], mu: &[u32]) -> Result<TransformSpec, KernelError> {
    let d = match (nu.len(), mu.is_empty()) {
        (1, true) => TransformDescriptor::Ginibre { nu: nu[0] },
        (1, false) => TransformDescriptor::Truncated { nu: nu[0], mu: mu[0] },
        (_, true) => TransformDescriptor::IteratedGinibre { nu: nu.to_vec() },
        (_, false) => TransformDescriptor::IteratedTruncated { nu: nu.to_vec(), mu: mu.to_vec() },
    };
    d.build()
}

/// `count` independent spectra, sampled in parallel chunks and merged in chunk order.
pub fn sample_model(spec: &ModelSpec, count: usize, rng: &RandomStream) -> Result<Vec<SpectrumSample>, ModelError> {
    if count == 0 {
        return Err(ModelError::Dimension("sample count must be at least 1".into()));
    }
    spec.validate()?;
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Vec<SpectrumSample>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.split(c as u64);
            let len = CHUNK.min(count - c * CHUNK);
            (0..len).map(|_| spec.sample_one(&mut r)).collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Removes squared singular values within [`UNIT_ATOM_TOL`] of 1 (as singular values);
/// returns the remaining spectra and the number removed from each sample.
pub fn split_unit_atoms(samples: &[SpectrumSample]) -> (Vec<SpectrumSample>, Vec<usize>) {
    samples
        .iter()
        .map(|s| {
            let (atoms, rest): (Vec<f64>, Vec<f64>) =
                s.points.iter().partition(|&&x| (x.max(0.0).sqrt() - 1.0).abs() < UNIT_ATOM_TOL);
            (SpectrumSample::new(rest, s.kind), atoms.len())
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub observed: u64,
    pub expected: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityComparison {
    pub kernel: String,
    pub kernel_n: usize,
    pub samples: usize,
    pub points: usize,
    /// `samples × ∫ K(x,x) dx`.
    pub predicted_total: f64,
    pub outside_support: usize,
    pub bins: Vec<Bin>,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub max_abs_z: f64,
    pub trace_consistent: bool,
    pub pass: bool,
}

/// Cell edges: uniform over the sample range `[lo, hi]`, coarser panels out to the support
/// ends (or `TAIL_WIDTHS` range widths for infinite ends), and geometric grading towards
/// finite support ends and kernel breakpoints.
fn cell_edges(k: &CorrelationKernel, lo: f64, hi: f64) -> Vec<f64> {
    let w = (hi - lo).max(1e-3);
    let a = if k.support.lo.is_finite() { k.support.lo } else { lo - TAIL_WIDTHS * w };
    let b = if k.support.hi.is_finite() { k.support.hi } else { hi + TAIL_WIDTHS * w };
    let uniform = |x0: f64, x1: f64, m: usize| (0..=m).map(move |i| x0 + (x1 - x0) * i as f64 / m as f64);
    let mut e: Vec<f64> = uniform(lo, hi, CELLS).collect();
    e.extend(uniform(a, lo, TAIL_CELLS));
    e.extend(uniform(hi, b, TAIL_CELLS));
    let h = (hi - lo) / CELLS as f64;
    let mut graded = |c: f64, dir: f64| {
        e.push(c);
        e.extend((0..GRADING).map(|j| c + dir * h * 0.5f64.powi(j as i32)));
    };
    if k.support.lo.is_finite() {
        graded(a, 1.0);
    }
    if k.support.hi.is_finite() {
        graded(b, -1.0);
    }
    for &c in k.breakpoints.iter().filter(|&&c| c > a && c < b) {
        graded(c, 1.0);
        graded(c, -1.0);
    }
    e.retain(|&x| x >= a && x <= b);
    e.sort_by(f64::total_cmp);
    e.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * (1.0 + y.abs()));
    e
}

/// `∫ K(x,x) dx` over each cell, Gauss–Legendre.
fn cell_masses(k: &CorrelationKernel, edges: &[f64]) -> Result<Vec<f64>, KernelError> {
    edges
        .par_windows(2)
        .map(|w| gauss_legendre(w[0], w[1], GL_NODES).iter().try_fold(0.0, |acc, &(x, wt)| Ok(acc + wt * k.density(x)?)))
        .collect()
}

/// Bins the pooled points into `bins` equal-mass bins under `K(x,x)`, merges bins with
/// expected count below [`MIN_EXPECTED`], and computes z-scores and the χ² p-value.
pub fn compare_density(
    samples: &[SpectrumSample],
    kernel: &CorrelationKernel,
    bins: usize,
) -> Result<DensityComparison, ModelError> {
    let mut points: Vec<f64> = samples.iter().flat_map(|s| s.points.iter().copied()).collect();
    if bins < 2 || points.len() < 2 * MIN_EXPECTED as usize {
        return Err(ModelError::TooFewSamples { points: points.len(), bins });
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::Linalg(LinalgError::NonFinite(0, 0)));
    }
    points.sort_by(f64::total_cmp);
    let sup = kernel.support;
    let (pmin, pmax) = (points[0], points[points.len() - 1]);
    let slack = 1e-9 * (1.0 + pmin.abs().max(pmax.abs()));
    let outside = points.iter().filter(|&&x| x < sup.lo - slack || x > sup.hi + slack).count();
    let lo = pmin.max(sup.lo);
    let hi = pmax.min(sup.hi);
    if !(hi > lo) {
        return Err(ModelError::TooFewSamples { points: points.len(), bins });
    }

    let edges = cell_edges(kernel, lo, hi);
    let cells = cell_masses(kernel, &edges)?;
    let total_mass = cells.iter().sum::<f64>();
    let m = samples.len() as f64;

    // cut at the cell edges nearest to the equal-mass quantiles
    let mut cuts = Vec::with_capacity(bins - 1);
    let mut acc = 0.0;
    let mut next = 1;
    for (i, c) in cells.iter().enumerate() {
        let before = acc;
        acc += c;
        while next < bins && acc >= total_mass * next as f64 / bins as f64 {
            let target = total_mass * next as f64 / bins as f64;
            let idx = if target - before < acc - target { i } else { i + 1 };
            if cuts.last().is_none_or(|&l| idx > l) && idx > 0 && idx < edges.len() - 1 {
                cuts.push(idx);
            }
            next += 1;
        }
    }
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(edges.len() - 1);

    let mut raw: Vec<Bin> = bounds
        .windows(2)
        .map(|w| {
            let mass: f64 = cells[w[0]..w[1]].iter().sum();
            Bin { lo: edges[w[0]], hi: edges[w[1]], observed: 0, expected: m * mass, z: 0.0 }
        })
        .collect();
    let nb = raw.len();
    raw[0].lo = sup.lo;
    raw[nb - 1].hi = sup.hi;
    for &x in &points {
        // bins are [lo, hi) with the outer ones unbounded
        let i = raw.partition_point(|b| b.hi <= x).min(nb - 1);
        raw[i].observed += 1;
    }

    let mut merged: Vec<Bin> = Vec::new();
    let mut cur: Option<Bin> = None;
    for b in raw {
        cur = Some(match cur {
            None => b,
            Some(c) => Bin { lo: c.lo, hi: b.hi, observed: c.observed + b.observed, expected: c.expected + b.expected, z: 0.0 },
        });
        if cur.as_ref().is_some_and(|c| c.expected >= MIN_EXPECTED) {
            merged.extend(cur.take());
        }
    }
    if let Some(c) = cur {
        match merged.last_mut() {
            Some(l) => {
                l.hi = c.hi;
                l.observed += c.observed;
                l.expected += c.expected;
            }
            None => merged.push(c),
        }
    }
    if merged.len() < 2 {
        return Err(ModelError::TooFewSamples { points: points.len(), bins });
    }
    let mut chi2 = 0.0;
    let mut max_abs_z: f64 = 0.0;
    for b in &mut merged {
        b.z = (b.observed as f64 - b.expected) / b.expected.max(f64::MIN_POSITIVE).sqrt();
        chi2 += b.z * b.z;
        max_abs_z = max_abs_z.max(b.z.abs());
    }
    let dof = merged.len() - 1;
    let p_value = ChiSquared::new(dof as f64).map(|d| d.sf(chi2)).unwrap_or(0.0);
    let predicted_total = m * total_mass;
    let trace_consistent = (predicted_total - points.len() as f64).abs() <= TRACE_TOLERANCE * points.len() as f64;
    let pass = trace_consistent && outside == 0 && max_abs_z < Z_THRESHOLD && p_value > P_THRESHOLD;
    Ok(DensityComparison {
        kernel: kernel.label.clone(),
        kernel_n: kernel.n,
        samples: samples.len(),
        points: points.len(),
        predicted_total,
        outside_support: outside,
        bins: merged,
        chi2,
        dof,
        p_value,
        max_abs_z,
        trace_consistent,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharPolyCheck {
    pub grid: Vec<f64>,
    pub predicted: Vec<f64>,
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pass: bool,
}

/// Compares `E ∏(x − x_j)` from `samples` with `p` on `grid`.
pub fn check_char_poly(samples: &[SpectrumSample], p: &Polynomial, grid: &[f64]) -> Result<CharPolyCheck, ModelError> {
    let (estimate, stderr) = average_char_poly_mc(samples, grid)?;
    let predicted: Vec<f64> = grid.iter().map(|&x| p.eval_re(x)).collect();
    let pass = predicted
        .iter()
        .zip(&estimate)
        .zip(&stderr)
        .all(|((p, e), s)| (p - e).abs() <= CHAR_POLY_SIGMAS * s + 1e-12 * (1.0 + p.abs()));
    Ok(CharPolyCheck { grid: grid.to_vec(), predicted, estimate, stderr, pass })
}

/// Five points spread over the 10%–90% range of the pooled sample points.
pub fn default_char_poly_grid(samples: &[SpectrumSample]) -> Vec<f64> {
    let mut pts: Vec<f64> = samples.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return vec![0.0; 5];
    }
    pts.sort_by(f64::total_cmp);
    let q = |f: f64| pts[((pts.len() - 1) as f64 * f) as usize];
    let (a, b) = (q(0.1), q(0.9));
    (0..5).map(|i| a + (b - a) * i as f64 / 4.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub base: ModelSpec,
    pub transform: TransformDescriptor,
    pub model: ModelSpec,
    pub seed: u64,
    pub density: DensityComparison,
    pub char_poly: CharPolyCheck,
    pub pass: bool,
}

/// Samples `transform(base)` and compares it with the transform-route kernel of the base
/// kernel, and the sampled average characteristic polynomial with its transformed form.
pub fn verify_transform_pipeline(
    base: &ModelSpec,
    transform: &TransformDescriptor,
    count: usize,
    bins: usize,
    rng: &RandomStream,
) -> Result<PipelineReport, ModelError> {
    let model = base.transformed(transform);
    model.validate()?;
    let spec = transform.build()?;
    let kernel = transform_kernel(&base.kernel()?, &spec)?;
    let samples = sample_model(&model, count, rng)?;
    let density = compare_density(&samples, &kernel, bins)?;
    let p = avg_char_poly_transformed(&base.char_poly()?, &spec)?;
    let char_poly = check_char_poly(&samples, &p, &default_char_poly_grid(&samples))?;
    let pass = density.pass && char_poly.pass;
    Ok(PipelineReport { base: base.clone(), transform: transform.clone(), model, seed: rng.seed(), density, char_poly, pass })
}

/// `lo,hi,observed,expected,z` per merged bin, 17 significant digits.
pub fn write_histogram_csv<W: Write>(cmp: &DensityComparison, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lo", "hi", "observed", "expected", "z"])?;
    for b in &cmp.bins {
        w.write_record([
            crate::closed::sci17(b.lo),
            crate::closed::sci17(b.hi),
            b.observed.to_string(),
            crate::closed::sci17(b.expected),
            crate::closed::sci17(b.z),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::gue_christoffel_darboux;
    use crate::poly::Interval;

    fn pooled(s: &[SpectrumSample]) -> Vec<f64> {
        s.iter().flat_map(|x| x.points.iter().copied()).collect()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    }

    #[test]
    fn gue_plus_gue_variance() {
        let spec = ModelSpec::gue_plus(ModelSpec::gue(1));
        let s = sample_model(&spec, 100_000, &RandomStream::new(3)).unwrap();
        let (_, var) = mean_var(&pooled(&s));
        assert!((var - 2.0).abs() < 0.06, "{var}");
    }

    #[test]
    fn exponential_squared_singular_value() {
        let s = sample_model(&ModelSpec::laguerre(1, 0), 100_000, &RandomStream::new(4)).unwrap();
        let (mean, _) = mean_var(&pooled(&s));
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn degenerate_truncated_chain_has_unit_atoms() {
        // n = 3, Σμ = 1: d = 2
        let spec = ModelSpec::truncated_chain(vec![0, 1], vec![1, 0], ModelSpec::identity(3));
        assert!(spec.validate().is_err());
        let spec = ModelSpec::truncated_chain(vec![0], vec![1], ModelSpec::identity(3));
        assert_eq!(spec.unit_atom_count(), 2);
        let s = sample_model(&spec, 500, &RandomStream::new(5)).unwrap();
        let (rest, counts) = split_unit_atoms(&s);
        assert!(counts.iter().all(|&c| c >= 2));
        assert!(rest.iter().all(|r| r.points.iter().all(|&x| (0.0..1.0).contains(&x))));
    }

    #[test]
    fn inconsistent_chain_rejected() {
        let inner = ModelSpec::ginibre_chain(vec![3], ModelSpec::identity(2));
        // second unitary of size 2+0+1 = 3 cannot act on 5 rows
        let spec = ModelSpec::truncated_chain(vec![0], vec![1], inner);
        assert!(matches!(spec.validate(), Err(ModelError::Dimension(_))));
        let bad = ModelSpec { n: 3, construction: Construction::Deterministic { a: vec![1.0, 2.0] } };
        assert!(matches!(sample_model(&bad, 10, &RandomStream::new(1)), Err(ModelError::Dimension(_))));
        let gue_source = ModelSpec::ginibre_chain(vec![0], ModelSpec::gue(2));
        assert!(matches!(gue_source.validate(), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_chunk_ordered() {
        let spec = ModelSpec::ginibre_chain(vec![1, 0], ModelSpec::identity(2));
        let rng = RandomStream::new(11);
        let a = sample_model(&spec, 2 * CHUNK + 17, &rng).unwrap();
        let b = sample_model(&spec, 2 * CHUNK + 17, &rng).unwrap();
        assert_eq!(a, b);
        // the first chunk does not depend on the total count
        let c = sample_model(&spec, 5, &rng).unwrap();
        assert_eq!(&a[..5], &c[..]);
    }

    #[test]
    fn gue_density_passes() {
        let rng = RandomStream::new(21);
        let s = sample_model(&ModelSpec::gue(2), 50_000, &rng).unwrap();
        let k = ModelSpec::gue(2).kernel().unwrap();
        let c = compare_density(&s, &k, 40).unwrap();
        assert!(c.pass, "{c:?}");
        assert!(c.trace_consistent);
        assert!(c.bins.iter().all(|b| b.expected >= MIN_EXPECTED));
        let again = compare_density(&sample_model(&ModelSpec::gue(2), 50_000, &rng).unwrap(), &k, 40).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn wrong_n_fails() {
        let s = sample_model(&ModelSpec::gue(2), 50_000, &RandomStream::new(22)).unwrap();
        let k = ModelSpec::gue(3).kernel().unwrap();
        let c = compare_density(&s, &k, 40).unwrap();
        assert!(!c.pass && c.p_value < 1e-6);
    }

    #[test]
    fn outside_points_flagged() {
        let s = vec![SpectrumSample::new(vec![-0.5, 0.5], SpectrumKind::Eigenvalues); 400];
        let k = CorrelationKernel::from_evaluator(2, Interval::UNIT, "uniform", |_, _| Ok(2.0.into()));
        let c = compare_density(&s, &k, 10).unwrap();
        assert_eq!(c.outside_support, 400);
        assert!(!c.pass);
    }

    #[test]
    fn too_few_samples() {
        let s = vec![SpectrumSample::new(vec![0.1, 0.2], SpectrumKind::Eigenvalues)];
        let k = ModelSpec::gue(2).kernel().unwrap();
        assert!(matches!(compare_density(&s, &k, 40), Err(ModelError::TooFewSamples { .. })));
    }

    #[test]
    fn gue_plus_char_poly() {
        let base = ModelSpec::gue(2);
        let model = ModelSpec::gue_plus(base.clone());
        // H + H' is √2 times a GUE matrix
        let p = model.char_poly().unwrap();
        for x in [-1.0, 0.3, 2.0] {
            let expect = 2.0 * hermite_monic(2).eval_re(x / 2f64.sqrt());
            assert!((p.eval_re(x) - expect).abs() < 1e-12);
        }
        let s = sample_model(&model, 20_000, &RandomStream::new(8)).unwrap();
        assert!(check_char_poly(&s, &p, &default_char_poly_grid(&s)).unwrap().pass);
        let kd = model.kernel().unwrap();
        let r = 2f64.sqrt();
        for (x, y) in [(0.1, 0.7), (-1.2, 0.4)] {
            assert!((kd.eval(x, y).unwrap() - gue_christoffel_darboux(2, x / r, y / r) / r).abs() < 1e-8);
        }
    }

    #[test]
    fn histogram_csv() {
        let s = sample_model(&ModelSpec::gue(1), 5_000, &RandomStream::new(2)).unwrap();
        let c = compare_density(&s, &ModelSpec::gue(1).kernel().unwrap(), 10).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), c.bins.len() + 1);
        assert!(text.starts_with("lo,hi,observed,expected,z"));
    }
}
