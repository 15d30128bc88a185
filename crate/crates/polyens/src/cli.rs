//! Command-line driver: `sample`, `kernel`, `verify`, `char-poly` and `gram`.
//!
//! Every command reads an optional JSON [`RunConfig`]; flags override its fields.
//! Exit codes: 0 pass, 2 configuration, 3 quadrature alarm, 4 precondition, 5 statistical failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::closed::{
    degenerate_ginibre_kernel, kernel_grid, product_ginibre_kernel, sci17, truncated_product_kernel, wishart_kernel,
    write_kernel_grid_csv, TruncatedForm,
};
use crate::ensemble::{
    identity_defect, kernel_from_system, CorrelationKernel, DegenerateVariant, EnsembleDescriptor, KernelError,
    IMAGINARY_TOLERANCE,
};
use crate::linalg::RandomStream;
use crate::montecarlo::{
    check_char_poly, compare_density, default_char_poly_grid, sample_model, split_unit_atoms,
    verify_transform_pipeline, write_histogram_csv, Construction, ModelError, ModelSpec,
};
use crate::poly::Interval;
use crate::transform::{transform_kernel, transform_system, TransformDescriptor};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_QUADRATURE: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;
pub const EXIT_STATISTICAL: i32 = 5;

pub const THREADS_ENV: &str = "POLYENS_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Io(String),
    Config(String),
    Quadrature(String),
    Precondition(String),
    Statistical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Quadrature(_) => EXIT_QUADRATURE,
            CliError::Precondition(_) => EXIT_PRECONDITION,
            CliError::Statistical(_) => EXIT_STATISTICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Quadrature(m) => write!(f, "quadrature alarm: {m}"),
            CliError::Precondition(m) => write!(f, "{m}"),
            CliError::Statistical(m) => write!(f, "statistical check failed: {m}"),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        let m = e.to_string();
        match e {
            KernelError::Quadrature(_)
            | KernelError::Special(_)
            | KernelError::ImaginaryResidue { .. }
            | KernelError::NonFinite(..)
            | KernelError::NotConverged(_)
            | KernelError::Divergent(_) => CliError::Quadrature(m),
            KernelError::Precondition(_) | KernelError::Degenerate(_) => CliError::Precondition(m),
            KernelError::Polynomial(_) | KernelError::Atomic | KernelError::LengthMismatch(..) | KernelError::Unsupported(_) => {
                CliError::Config(m)
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Kernel(k) => k.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Kernels reachable from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    Gue { n: usize },
    Laguerre { n: usize, nu: u32 },
    Jacobi { n: usize, nu: u32, m: usize },
    Wishart { n: usize, nu: u32 },
    ProductGinibre { n: usize, nu: Vec<u32> },
    DegenerateGinibre { a: Vec<f64>, nu: Vec<u32> },
    TruncatedProduct { n: usize, nu: Vec<u32>, mu: Vec<u32>, #[serde(default)] form: TruncatedForm },
    Transformed { ensemble: EnsembleDescriptor, transform: TransformDescriptor },
    Model { model: ModelSpec },
}

impl KernelSpec {
    pub fn build(&self) -> Result<CorrelationKernel, CliError> {
        Ok(match self {
            KernelSpec::Gue { n } => kernel_from_system(&EnsembleDescriptor::Gue { n: *n }.system()?)?,
            KernelSpec::Laguerre { n, nu } => kernel_from_system(&EnsembleDescriptor::Laguerre { n: *n, nu: *nu }.system()?)?,
            KernelSpec::Jacobi { n, nu, m } => {
                kernel_from_system(&EnsembleDescriptor::Jacobi { n: *n, nu: *nu, m: *m }.system()?)?
            }
            KernelSpec::Wishart { n, nu } => wishart_kernel(*n, *nu)?,
            KernelSpec::ProductGinibre { n, nu } => product_ginibre_kernel(*n, nu)?,
            KernelSpec::DegenerateGinibre { a, nu } => degenerate_ginibre_kernel(a, nu)?,
            KernelSpec::TruncatedProduct { n, nu, mu, form } => truncated_product_kernel(*n, nu, mu, *form)?,
            KernelSpec::Transformed { ensemble, transform } => {
                transform_kernel(&kernel_from_system(&ensemble.system()?)?, &transform.build()?)?
            }
            KernelSpec::Model { model } => model.kernel()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Sample,
    Kernel,
    Verify,
    CharPoly,
    Gram,
}

/// JSON run configuration; every field may be overridden by the matching flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<CommandName>,
    pub model: Option<ModelSpec>,
    /// Model whose kernel the samples are compared against (defaults to the sampled model).
    pub reference: Option<ModelSpec>,
    pub kernel: Option<KernelSpec>,
    pub ensemble: Option<EnsembleDescriptor>,
    pub transform: Option<TransformDescriptor>,
    pub suite: Option<Suite>,
    pub samples: Option<usize>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Points of the density grid.
    pub points: Option<usize>,
    /// Points per axis of the `K(x, y)` grid.
    pub grid_points: Option<usize>,
    /// Output path prefix.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "polyens", version, about = "Transformations of polynomial ensembles")]
pub struct Cli {
    /// Worker threads for sampling and grid evaluation.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample spectra of a matrix model.
    Sample(Params),
    /// Evaluate a correlation kernel on a grid.
    Kernel(Params),
    /// Compare sampled spectra with kernel predictions, or run a deterministic suite.
    Verify(Params),
    /// Average characteristic polynomial of a model, optionally checked by Monte Carlo.
    CharPoly(Params),
    /// Gram matrix of a (transformed) biorthogonal system.
    Gram(Params),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Params {
    /// Model: JSON, or one of gue, identity, deterministic, gue-plus, laguerre, ginibre-chain, truncated-chain.
    #[arg(long)]
    pub model: Option<String>,
    /// Reference model (JSON) whose kernel is used by `verify`.
    #[arg(long)]
    pub reference: Option<String>,
    /// Kernel: JSON, or one of gue, laguerre, jacobi, wishart, product-ginibre, degenerate-ginibre, truncated-product.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Base ensemble: JSON, or one of gue, laguerre, jacobi, degenerate.
    #[arg(long)]
    pub ensemble: Option<String>,
    /// Transform: JSON, or gue-add, ginibre:ν, truncated:ν:μ.
    #[arg(long)]
    pub transform: Option<String>,
    #[arg(long, value_enum)]
    pub suite: Option<Suite>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub nu: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub mu: Vec<u32>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub a: Vec<f64>,
    /// Unitary size for the Jacobi ensemble.
    #[arg(long)]
    pub m: Option<usize>,
    /// Kernel form for truncated products: double-contour or g-product-integral.
    #[arg(long)]
    pub form: Option<String>,
    /// Number of samples.
    #[arg(long = "N", alias = "samples")]
    pub samples: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn is_json(s: &str) -> bool {
    s.trim_start().starts_with('{')
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_str(s).map_err(|e| CliError::Config(format!("invalid {what}: {e}")))
}

fn need_n(p: &Params, what: &str) -> Result<usize, CliError> {
    p.n.ok_or_else(|| CliError::Config(format!("{what} needs --n")))
}

fn single_nu(p: &Params) -> Result<u32, CliError> {
    match p.nu.as_slice() {
        [] => Ok(0),
        [v] => Ok(*v),
        _ => Err(CliError::Config("expected a single --nu value".into())),
    }
}

fn model_from_flags(s: &str, p: &Params) -> Result<ModelSpec, CliError> {
    if is_json(s) {
        return parse_json("model", s);
    }
    let deterministic =
        |p: &Params| ModelSpec { n: p.n.unwrap_or(p.a.len()), construction: Construction::Deterministic { a: p.a.clone() } };
    let source = |p: &Params| -> Result<ModelSpec, CliError> {
        if p.a.is_empty() {
            Ok(ModelSpec::identity(need_n(p, "a chain on the identity")?))
        } else {
            Ok(deterministic(p))
        }
    };
    Ok(match s {
        "gue" => ModelSpec::gue(need_n(p, "gue")?),
        "identity" => ModelSpec::identity(need_n(p, "identity")?),
        "deterministic" => deterministic(p),
        "gue-plus" => {
            let base = if p.a.is_empty() { ModelSpec::gue(need_n(p, "gue-plus")?) } else { deterministic(p) };
            ModelSpec::gue_plus(base)
        }
        "laguerre" => ModelSpec::laguerre(need_n(p, "laguerre")?, single_nu(p)?),
        "ginibre-chain" => ModelSpec::ginibre_chain(p.nu.clone(), source(p)?),
        "truncated-chain" => ModelSpec::truncated_chain(p.nu.clone(), p.mu.clone(), source(p)?),
        other => return Err(CliError::Config(format!("unknown model '{other}'"))),
    })
}

fn truncated_form(p: &Params) -> Result<TruncatedForm, CliError> {
    match p.form.as_deref() {
        None | Some("double-contour") => Ok(TruncatedForm::DoubleContour),
        Some("g-product-integral") => Ok(TruncatedForm::GProductIntegral),
        Some(other) => Err(CliError::Config(format!("unknown kernel form '{other}'"))),
    }
}

fn kernel_from_flags(s: &str, p: &Params) -> Result<KernelSpec, CliError> {
    if is_json(s) {
        return parse_json("kernel", s);
    }
    Ok(match s {
        "gue" => KernelSpec::Gue { n: need_n(p, "gue")? },
        "laguerre" => KernelSpec::Laguerre { n: need_n(p, "laguerre")?, nu: single_nu(p)? },
        "jacobi" => KernelSpec::Jacobi {
            n: need_n(p, "jacobi")?,
            nu: single_nu(p)?,
            m: p.m.ok_or_else(|| CliError::Config("jacobi needs --m".into()))?,
        },
        "wishart" => KernelSpec::Wishart { n: need_n(p, "wishart")?, nu: single_nu(p)? },
        "product-ginibre" => KernelSpec::ProductGinibre { n: need_n(p, "product-ginibre")?, nu: p.nu.clone() },
        "degenerate-ginibre" => KernelSpec::DegenerateGinibre { a: p.a.clone(), nu: p.nu.clone() },
        "truncated-product" => KernelSpec::TruncatedProduct {
            n: need_n(p, "truncated-product")?,
            nu: p.nu.clone(),
            mu: p.mu.clone(),
            form: truncated_form(p)?,
        },
        other => return Err(CliError::Config(format!("unknown kernel '{other}'"))),
    })
}

fn ensemble_from_flags(s: &str, p: &Params) -> Result<EnsembleDescriptor, CliError> {
    if is_json(s) {
        return parse_json("ensemble", s);
    }
    Ok(match s {
        "gue" => EnsembleDescriptor::Gue { n: need_n(p, "gue")? },
        "laguerre" => EnsembleDescriptor::Laguerre { n: need_n(p, "laguerre")?, nu: single_nu(p)? },
        "jacobi" => EnsembleDescriptor::Jacobi {
            n: need_n(p, "jacobi")?,
            nu: single_nu(p)?,
            m: p.m.ok_or_else(|| CliError::Config("jacobi needs --m".into()))?,
        },
        "degenerate" => EnsembleDescriptor::Degenerate { a: p.a.clone(), variant: DegenerateVariant::Monic },
        other => return Err(CliError::Config(format!("unknown ensemble '{other}'"))),
    })
}

fn transform_from_flags(s: &str) -> Result<TransformDescriptor, CliError> {
    if is_json(s) {
        return parse_json("transform", s);
    }
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<u32, CliError> {
        parts.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| CliError::Config(format!("malformed transform '{s}'")))
    };
    Ok(match parts[0] {
        "gue-add" if parts.len() == 1 => TransformDescriptor::GueAdd {},
        "ginibre" if parts.len() == 2 => TransformDescriptor::Ginibre { nu: num(1)? },
        "truncated" if parts.len() == 3 => TransformDescriptor::Truncated { nu: num(1)?, mu: num(2)? },
        _ => return Err(CliError::Config(format!("malformed transform '{s}'"))),
    })
}

/// Applies flags on top of the configuration file.
pub fn merge(mut cfg: RunConfig, p: &Params) -> Result<RunConfig, CliError> {
    if let Some(s) = &p.model {
        cfg.model = Some(model_from_flags(s, p)?);
    }
    if let Some(s) = &p.reference {
        cfg.reference = Some(parse_json("reference model", s)?);
    }
    if let Some(s) = &p.kernel {
        cfg.kernel = Some(kernel_from_flags(s, p)?);
    }
    if let Some(s) = &p.ensemble {
        cfg.ensemble = Some(ensemble_from_flags(s, p)?);
    }
    if let Some(s) = &p.transform {
        cfg.transform = Some(transform_from_flags(s)?);
    }
    cfg.suite = p.suite.or(cfg.suite);
    cfg.samples = p.samples.or(cfg.samples);
    cfg.bins = p.bins.or(cfg.bins);
    cfg.seed = p.seed.or(cfg.seed);
    cfg.tol = p.tol.or(cfg.tol);
    cfg.lo = p.lo.or(cfg.lo);
    cfg.hi = p.hi.or(cfg.hi);
    cfg.points = p.points.or(cfg.points);
    cfg.grid_points = p.grid_points.or(cfg.grid_points);
    if p.out.is_some() {
        cfg.out = p.out.clone();
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_json("run configuration", &text)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn require<T: Clone>(v: &Option<T>, what: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Config(format!("missing {what}")))
}

/// Writes `<out>.csv` (one spectrum per row, ascending) and `<out>.json` (model, seed, count).
pub fn cmd_sample(cfg: &RunConfig) -> Result<String, CliError> {
    let model = require(&cfg.model, "model")?;
    let count = require(&cfg.samples, "sample count N")?;
    let seed = cfg.seed.unwrap_or(0);
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("spectra"));
    let samples = sample_model(&model, count, &RandomStream::new(seed))?;
    let mut w = csv::Writer::from_writer(create(&with_suffix(&out, ".csv"))?);
    w.write_record((1..=model.n).map(|i| format!("x{i}")))?;
    for s in &samples {
        w.write_record(s.points.iter().map(|&x| sci17(x)))?;
    }
    w.flush()?;
    write_json(
        &with_suffix(&out, ".json"),
        &json!({ "model": model, "seed": seed, "samples": count, "kind": model.spectrum_kind() }),
    )?;
    Ok(format!("{count} spectra written to {}", with_suffix(&out, ".csv").display()))
}

/// Grid for the density: a uniform grid on the real line, otherwise graded as `t³` towards
/// a finite lower support end, whose own value is replaced by a point `1e-12` inside.
pub fn density_grid(support: Interval, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let m = points.max(2) - 1;
    let graded = support.lo.is_finite() && lo <= support.lo;
    (0..=m)
        .map(|i| {
            let t = i as f64 / m as f64;
            if graded {
                let x = lo + (hi - lo) * t.powi(3);
                if i == 0 {
                    lo + 1e-12 * (hi - lo)
                } else {
                    x
                }
            } else {
                lo + (hi - lo) * t
            }
        })
        .collect()
}

/// Default window: the support where finite, otherwise doubled until the density is negligible.
fn default_window(k: &CorrelationKernel) -> Result<(f64, f64), CliError> {
    let s = k.support;
    let scale = (k.n as f64 + 1.0).max(1.0);
    let reach = |start: f64, dir: f64| -> Result<f64, CliError> {
        let mut x = start + dir * scale;
        for _ in 0..20 {
            if k.density(x)?.abs() < 1e-14 {
                return Ok(x);
            }
            x = start + 2.0 * (x - start);
        }
        Ok(x)
    };
    let lo = if s.lo.is_finite() { s.lo } else { reach(0.0, -1.0)? };
    let hi = if s.hi.is_finite() { s.hi } else { reach(if s.lo.is_finite() { s.lo } else { 0.0 }, 1.0)? };
    Ok((lo, hi))
}

fn trapezoid(xs: &[f64], fs: &[f64]) -> f64 {
    xs.windows(2).zip(fs.windows(2)).map(|(x, f)| (x[1] - x[0]) * (f[0] + f[1]) / 2.0).sum()
}

/// Writes `<out>_grid.csv`, `<out>_density.csv` and `<out>_diagnostics.json`.
pub fn cmd_kernel(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = require(&cfg.kernel, "kernel")?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("kernel"));
    let diag_path = with_suffix(&out, "_diagnostics.json");
    let k = match spec.build() {
        Ok(k) => k,
        Err(e) => {
            write_json(&diag_path, &json!({ "kernel": spec, "error": e.to_string() }))?;
            return Err(e);
        }
    };
    let fail = |e: CliError, stage: &str| -> CliError {
        match write_json(&diag_path, &json!({ "kernel": spec, "stage": stage, "error": e.to_string() })) {
            Ok(()) => e,
            Err(io) => io,
        }
    };
    let (dlo, dhi) = default_window(&k).map_err(|e| fail(e, "window"))?;
    let lo = cfg.lo.unwrap_or(dlo);
    let hi = cfg.hi.unwrap_or(dhi);
    if !(hi > lo) {
        return Err(CliError::Config(format!("empty window [{lo}, {hi}]")));
    }
    let xs = density_grid(k.support, lo, hi, cfg.points.unwrap_or(1001));
    use rayon::prelude::*;
    let complex: Vec<Complex64> = xs
        .par_iter()
        .map(|&x| k.eval_complex(Complex64::new(x, 0.0), x))
        .collect::<Result<_, KernelError>>()
        .map_err(|e| fail(e.into(), "density"))?;
    let mut max_imag: f64 = 0.0;
    let mut density = Vec::with_capacity(xs.len());
    for (&x, v) in xs.iter().zip(&complex) {
        let rel = v.im.abs() / (1.0 + v.re.abs());
        max_imag = max_imag.max(rel);
        if !v.re.is_finite() || rel > IMAGINARY_TOLERANCE {
            let e = KernelError::ImaginaryResidue { real: v.re, imag: v.im };
            let err = CliError::Quadrature(format!("{e} at x = {x}"));
            write_json(&diag_path, &json!({ "kernel": spec, "stage": "density", "x": x, "max_imaginary_residue": rel, "error": err.to_string() }))?;
            return Err(err);
        }
        density.push(v.re);
    }
    let g = cfg.grid_points.unwrap_or(21);
    let gx = density_grid(k.support, lo, hi, g);
    let grid = kernel_grid(&k, &gx, &gx).map_err(|e| fail(e.into(), "grid"))?;
    write_kernel_grid_csv(&grid, create(&with_suffix(&out, "_grid.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&with_suffix(&out, "_density.csv"))?);
    w.write_record(["x", "density"])?;
    for (&x, &d) in xs.iter().zip(&density) {
        w.write_record([sci17(x), sci17(d)])?;
    }
    w.flush()?;
    let trap = trapezoid(&xs, &density);
    let tol = cfg.tol.unwrap_or(1e-8);
    let quad = k.trace(tol).map_err(|e| fail(e.into(), "trace"))?;
    write_json(
        &diag_path,
        &json!({
            "kernel": spec,
            "label": k.label,
            "n": k.n,
            "window": [lo, hi],
            "density_points": xs.len(),
            "grid_points": g,
            "max_imaginary_residue": max_imag,
            "imaginary_tolerance": IMAGINARY_TOLERANCE,
            "trace_trapezoid": trap,
            "trace_quadrature": quad,
            "trace_quadrature_tolerance": tol,
            "trace_error_trapezoid": (trap - k.n as f64).abs(),
            "trace_error_quadrature": (quad - k.n as f64).abs(),
        }),
    )?;
    Ok(format!("{}: trace (trapezoid) {trap:.10}, trace (quadrature) {quad:.12}", k.label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramCase {
    pub label: String,
    pub max_off_diagonal: f64,
    pub max_diagonal_deviation: f64,
    pub pass: bool,
}

/// Gram matrices of transformed systems: GUE addition on GUE (n ≤ 5), Ginibre
/// multiplication on Laguerre (n ≤ 5, ν ∈ {0, 2}), truncation on Jacobi (n ≤ 4).
pub fn gram_suite(tol: f64) -> Result<Vec<GramCase>, CliError> {
    let mut cases: Vec<(EnsembleDescriptor, TransformDescriptor)> = Vec::new();
    for n in 1..=5 {
        cases.push((EnsembleDescriptor::Gue { n }, TransformDescriptor::GueAdd {}));
    }
    for nu in [0, 2] {
        for n in 1..=5 {
            cases.push((EnsembleDescriptor::Laguerre { n, nu }, TransformDescriptor::Ginibre { nu: 1 }));
        }
    }
    for n in 1..=4 {
        cases.push((EnsembleDescriptor::Jacobi { n, nu: 1, m: 2 * n + 2 }, TransformDescriptor::Truncated { nu: 1, mu: 2 }));
    }
    cases.iter().map(|(e, t)| gram_case(e, Some(t), tol)).collect()
}

pub fn gram_case(e: &EnsembleDescriptor, t: Option<&TransformDescriptor>, tol: f64) -> Result<GramCase, CliError> {
    let sys = e.system()?;
    let sys = match t {
        Some(t) => transform_system(&sys, &t.build()?)?,
        None => sys,
    };
    let (off, diag) = identity_defect(&sys.gram(1e-12)?);
    Ok(GramCase { label: sys.label.clone(), max_off_diagonal: off, max_diagonal_deviation: diag, pass: off < tol && diag < tol })
}

pub fn cmd_gram(cfg: &RunConfig) -> Result<String, CliError> {
    let e = require(&cfg.ensemble, "ensemble")?;
    let tol = cfg.tol.unwrap_or(1e-8);
    let sys = e.system()?;
    let sys = match &cfg.transform {
        Some(t) => transform_system(&sys, &t.build()?)?,
        None => sys,
    };
    let g = sys.gram(1e-12)?;
    let (off, diag) = identity_defect(&g);
    let rows: Vec<Vec<f64>> = (0..g.nrows()).map(|i| (0..g.ncols()).map(|j| g[(i, j)]).collect()).collect();
    if let Some(out) = &cfg.out {
        write_json(
            &with_suffix(out, ".json"),
            &json!({ "ensemble": e, "transform": cfg.transform, "gram": rows, "max_off_diagonal": off, "max_diagonal_deviation": diag }),
        )?;
    }
    let msg = format!("{}: max |off-diagonal| {off:.3e}, max |diagonal − 1| {diag:.3e}", sys.label);
    if off < tol && diag < tol {
        Ok(msg)
    } else {
        Err(CliError::Statistical(msg))
    }
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<String, CliError> {
    let tol = cfg.tol.unwrap_or(1e-8);
    if cfg.suite == Some(Suite::Gram) {
        let cases = gram_suite(tol)?;
        let worst = cases.iter().map(|c| c.max_off_diagonal).fold(0.0, f64::max);
        let worst_diag = cases.iter().map(|c| c.max_diagonal_deviation).fold(0.0, f64::max);
        if let Some(out) = &cfg.out {
            write_json(&with_suffix(out, "_gram.json"), &cases)?;
        }
        let msg = format!("gram suite: {} cases, max off-diagonal {worst:.3e}, max |diagonal − 1| {worst_diag:.3e}", cases.len());
        return if cases.iter().all(|c| c.pass) { Ok(msg) } else { Err(CliError::Statistical(msg)) };
    }
    let model = require(&cfg.model, "model")?;
    let count = cfg.samples.unwrap_or(100_000);
    let bins = cfg.bins.unwrap_or(40);
    let rng = RandomStream::new(cfg.seed.unwrap_or(0));
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("verify"));
    if let Some(t) = &cfg.transform {
        let r = verify_transform_pipeline(&model, t, count, bins, &rng)?;
        write_json(&with_suffix(&out, "_report.json"), &r)?;
        write_histogram_csv(&r.density, create(&with_suffix(&out, "_histogram.csv"))?)?;
        let msg = format!(
            "{}: χ² p = {:.4e}, max |z| = {:.3}, char poly {}",
            r.density.kernel,
            r.density.p_value,
            r.density.max_abs_z,
            if r.char_poly.pass { "ok" } else { "FAIL" }
        );
        return if r.pass { Ok(msg) } else { Err(CliError::Statistical(msg)) };
    }
    let samples = sample_model(&model, count, &rng)?;
    let d = model.unit_atom_count();
    let (samples, atoms) = if d > 0 { split_unit_atoms(&samples) } else { (samples, vec![0; count]) };
    let atoms_ok = atoms.iter().all(|&c| c >= d);
    let reference = cfg.reference.clone().unwrap_or_else(|| model.clone());
    let kernel = reference.kernel()?;
    let cmp = compare_density(&samples, &kernel, bins)?;
    let p = reference.char_poly()?;
    let cp = if d == 0 { Some(check_char_poly(&samples, &p, &default_char_poly_grid(&samples))?) } else { None };
    let pass = cmp.pass && atoms_ok && cp.as_ref().is_none_or(|c| c.pass);
    write_json(
        &with_suffix(&out, "_report.json"),
        &json!({
            "model": model,
            "reference": reference,
            "seed": rng.seed(),
            "unit_atoms_expected": d,
            "unit_atoms_ok": atoms_ok,
            "density": cmp,
            "char_poly": cp,
            "pass": pass,
        }),
    )?;
    write_histogram_csv(&cmp, create(&with_suffix(&out, "_histogram.csv"))?)?;
    let msg = format!("{}: χ² p = {:.4e}, max |z| = {:.3}", cmp.kernel, cmp.p_value, cmp.max_abs_z);
    if pass {
        Ok(msg)
    } else {
        Err(CliError::Statistical(msg))
    }
}

/// Coefficients of `E ∏(x − x_j)`; with `N > 0` also a Monte Carlo check.
pub fn cmd_char_poly(cfg: &RunConfig) -> Result<String, CliError> {
    let model = require(&cfg.model, "model")?;
    let p = model.char_poly()?;
    let coeffs: Vec<f64> = p.coefficients().iter().map(|c| c.re).collect();
    let check = match cfg.samples {
        Some(count) if count > 0 => {
            let s = sample_model(&model, count, &RandomStream::new(cfg.seed.unwrap_or(0)))?;
            Some(check_char_poly(&s, &p, &default_char_poly_grid(&s))?)
        }
        _ => None,
    };
    if let Some(out) = &cfg.out {
        write_json(&with_suffix(out, ".json"), &json!({ "model": model, "coefficients": coeffs, "check": check }))?;
    }
    let text = coeffs.iter().map(|&c| sci17(c)).collect::<Vec<_>>().join(",");
    match check {
        Some(c) if !c.pass => Err(CliError::Statistical(format!("Monte Carlo mismatch; coefficients {text}"))),
        _ => Ok(format!("coefficients (ascending): {text}")),
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    configure_threads(cli.threads)?;
    let base = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let (name, params) = match &cli.command {
        Command::Sample(p) => (CommandName::Sample, p),
        Command::Kernel(p) => (CommandName::Kernel, p),
        Command::Verify(p) => (CommandName::Verify, p),
        Command::CharPoly(p) => (CommandName::CharPoly, p),
        Command::Gram(p) => (CommandName::Gram, p),
    };
    if base.command.is_some_and(|c| c != name) {
        return Err(CliError::Config(format!("configuration is for {:?}, not {name:?}", base.command.unwrap())));
    }
    let cfg = merge(base, params)?;
    match name {
        CommandName::Sample => cmd_sample(&cfg),
        CommandName::Kernel => cmd_kernel(&cfg),
        CommandName::Verify => cmd_verify(&cfg),
        CommandName::CharPoly => cmd_char_poly(&cfg),
        CommandName::Gram => cmd_gram(&cfg),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_PASS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let r: Result<RunConfig, _> = serde_json::from_str(r#"{"model": null, "sede": 3}"#);
        assert!(r.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"command": "sample", "seed": 3, "samples": 10}"#).unwrap();
        assert_eq!(ok.seed, Some(3));
    }

    #[test]
    fn flags_override_config() {
        let cfg = RunConfig { seed: Some(1), samples: Some(5), ..Default::default() };
        let p = Params { seed: Some(9), model: Some("gue".into()), n: Some(2), ..Default::default() };
        let m = merge(cfg, &p).unwrap();
        assert_eq!(m.seed, Some(9));
        assert_eq!(m.samples, Some(5));
        assert_eq!(m.model, Some(ModelSpec::gue(2)));
    }

    #[test]
    fn shorthand_parsing() {
        let p = Params { n: Some(2), nu: vec![0, 1], mu: vec![2, 2], ..Default::default() };
        let m = model_from_flags("truncated-chain", &p).unwrap();
        assert_eq!(m, ModelSpec::truncated_chain(vec![0, 1], vec![2, 2], ModelSpec::identity(2)));
        assert_eq!(transform_from_flags("truncated:0:2").unwrap(), TransformDescriptor::Truncated { nu: 0, mu: 2 });
        assert!(transform_from_flags("ginibre").is_err());
        let k = kernel_from_flags(r#"{"family": "wishart", "n": 1, "nu": 0}"#, &Params::default()).unwrap();
        assert_eq!(k, KernelSpec::Wishart { n: 1, nu: 0 });
        assert!(matches!(model_from_flags("gue", &Params::default()), Err(CliError::Config(_))));
    }

    #[test]
    fn error_codes() {
        let pre: CliError = KernelError::Precondition("x".into()).into();
        assert_eq!(pre.exit_code(), EXIT_PRECONDITION);
        let q: CliError = KernelError::NotConverged(1.0).into();
        assert_eq!(q.exit_code(), EXIT_QUADRATURE);
        let d: CliError = ModelError::Dimension("x".into()).into();
        assert_eq!(d.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn graded_grid_and_trapezoid() {
        let xs = density_grid(Interval::UNIT, 0.0, 1.0, 2001);
        assert!(xs[0] > 0.0 && xs[0] < 1e-11 && *xs.last().unwrap() == 1.0);
        let fs: Vec<f64> = xs.iter().map(|x| -x.ln()).collect();
        assert!((trapezoid(&xs, &fs) - 1.0).abs() < 1e-5);
        let ys = density_grid(Interval::REAL_LINE, -1.0, 1.0, 3);
        assert_eq!(ys, vec![-1.0, 0.0, 1.0]);
    }
}
