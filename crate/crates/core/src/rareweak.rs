//! Rare/Weak two-class model: instance generation, critical signal strength,
//! Hamming error and Monte Carlo phase-diagram grids.
//!
//! `X = Y mu^T + Z` with `Y_i` uniform on `{-1, +1}`, `Z` standard normal and
//! each `mu(j)` equal to `0` with probability `1 - eps` and `+tau` or `-tau`
//! with probability `eps / 2` each. Sizes are `n = p^theta`, `eps = p^-beta`,
//! `tau = p^-alpha`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_sd, write_atomic, DataMatrix, SdMode};
use crate::error::{Error, Result};
use crate::pipelines::{run_method, simplified_if_pca, simplified_pca, Method, MethodSpec, PipelineConfig, PipelineReport};
use crate::rng::{derive_path, job_rng};
use crate::spectral::truncated_svd;

const BOUNDARY_TOL: f64 = 1e-9;
/// Offset applied to grid exponents that land on a phase boundary.
pub const BOUNDARY_NUDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareWeakConfig {
    pub p: usize,
    pub theta: f64,
    pub beta: f64,
    pub alpha: f64,
    /// Overrides `round(p^theta)`.
    pub n: Option<usize>,
    /// Overrides `p^-beta`.
    pub epsilon: Option<f64>,
    /// Overrides `p^-alpha`.
    pub tau: Option<f64>,
    /// Plant exactly this many signals (uniform positions) instead of Bernoulli draws.
    pub support_size: Option<usize>,
    pub seed: u64,
}

impl RareWeakConfig {
    pub fn new(p: usize, theta: f64, beta: f64, alpha: f64, seed: u64) -> Self {
        Self {
            p,
            theta,
            beta,
            alpha,
            n: None,
            epsilon: None,
            tau: None,
            support_size: None,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.n.unwrap_or_else(|| (self.p as f64).powf(self.theta).round() as usize)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| (self.p as f64).powf(-self.beta))
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or_else(|| (self.p as f64).powf(-self.alpha))
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidArgument("p must be at least 2".into()));
        }
        if self.n() < 2 {
            return Err(Error::InvalidArgument(format!("n = {} is below 2", self.n())));
        }
        let eps = self.epsilon();
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!("epsilon = {eps} outside [0, 1)")));
        }
        let tau = self.tau();
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau = {tau} must be positive")));
        }
        if self.support_size.is_some_and(|s| s > self.p) {
            return Err(Error::InvalidArgument("support size exceeds p".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RareWeakInstance {
    pub x: DMatrix<f64>,
    pub y: Vec<i8>,
    pub mu: Vec<f64>,
    /// Sorted indices of the nonzero entries of `mu`.
    pub support: Vec<usize>,
}

pub fn generate_instance(config: &RareWeakConfig) -> Result<RareWeakInstance> {
    config.validate()?;
    let (n, p) = (config.n(), config.p);
    let tau = config.tau();
    let mut rng = job_rng(config.seed);
    let y: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    let mut mu = vec![0.0; p];
    match config.support_size {
        Some(s) => {
            for j in sample(&mut rng, p, s) {
                mu[j] = if rng.random::<bool>() { tau } else { -tau };
            }
        }
        None => {
            let eps = config.epsilon();
            for m in mu.iter_mut() {
                if rng.random::<f64>() < eps {
                    *m = if rng.random::<bool>() { tau } else { -tau };
                }
            }
        }
    }
    let support = (0..p).filter(|&j| mu[j] != 0.0).collect();
    let x = DMatrix::from_fn(n, p, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        f64::from(y[i]) * mu[j] + z
    });
    Ok(RareWeakInstance { x, y, mu, support })
}

/// Phase regime of `beta`, erroring on the two boundaries.
fn regime(theta: f64, beta: f64) -> Result<u8> {
    if (beta - 0.5).abs() < BOUNDARY_TOL || (beta - (1.0 - theta / 2.0)).abs() < BOUNDARY_TOL {
        return Err(Error::PhaseBoundary { beta });
    }
    Ok(if beta < 0.5 {
        0
    } else if beta < 1.0 - theta / 2.0 {
        1
    } else {
        2
    })
}

/// Critical signal strength separating the possibility and impossibility regions.
pub fn critical_tau(p: f64, theta: f64, beta: f64) -> Result<f64> {
    let n = p.powf(theta);
    let s = p.powf(1.0 - beta);
    Ok(match regime(theta, beta)? {
        0 => (p / (n * s * s)).powf(0.25),
        1 => n.powf(-0.25),
        _ => s.powf(-0.5),
    })
}

/// Exponent of [`critical_tau`]: `tau* = p^-alpha*`.
pub fn alpha_star(beta: f64, theta: f64) -> Result<f64> {
    Ok(match regime(theta, beta)? {
        0 => (1.0 + theta - 2.0 * beta) / 4.0,
        1 => theta / 4.0,
        _ => (1.0 - beta) / 2.0,
    })
}

/// Fraction of disagreements, minimized over a global sign flip.
pub fn hamming_error(y_hat: &[i8], y: &[i8]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted vs {} true labels",
            y_hat.len(),
            y.len()
        )));
    }
    if let Some(v) = y_hat.iter().chain(y).find(|&&v| v != 1 && v != -1) {
        return Err(Error::InvalidArgument(format!("label {v} is not +1 or -1")));
    }
    let mismatches = y_hat.iter().zip(y).filter(|(a, b)| a != b).count();
    let n = y.len();
    Ok(mismatches.min(n - mismatches) as f64 / n as f64)
}

/// Cluster label 1 maps to +1, anything else to -1.
pub fn labels_to_signs(labels: &[usize]) -> Vec<i8> {
    labels.iter().map(|&l| if l == 1 { 1 } else { -1 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseMethod {
    SimplifiedPca,
    SimplifiedIfPca,
    Pca,
    IfPca,
}

impl PhaseMethod {
    pub fn tag(self) -> &'static str {
        match self {
            PhaseMethod::SimplifiedPca => "spca",
            PhaseMethod::SimplifiedIfPca => "sifpca",
            PhaseMethod::Pca => "pca",
            PhaseMethod::IfPca => "ifpca",
        }
    }

    pub fn selects(self) -> bool {
        matches!(self, PhaseMethod::SimplifiedIfPca | PhaseMethod::IfPca)
    }
}

impl fmt::Display for PhaseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PhaseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "spca" | "simplified_pca" => PhaseMethod::SimplifiedPca,
            "sifpca" | "simplified_ifpca" => PhaseMethod::SimplifiedIfPca,
            "pca" => PhaseMethod::Pca,
            "ifpca" => PhaseMethod::IfPca,
            _ => return Err(Error::InvalidArgument(format!("unknown phase method {s:?}"))),
        })
    }
}

impl Serialize for PhaseMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

/// Outcome of one Monte Carlo repetition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepOutcome {
    pub hamming: f64,
    /// Whether the selected set equals the true support (selecting methods only).
    pub exact_selection: Option<bool>,
    pub no_selection: bool,
}

fn run_phase_method(inst: &RareWeakInstance, method: PhaseMethod, cfg: &PipelineConfig, seed: u64) -> Result<PipelineReport> {
    match method {
        PhaseMethod::SimplifiedPca => simplified_pca(&inst.x),
        PhaseMethod::SimplifiedIfPca => simplified_if_pca(&inst.x),
        PhaseMethod::Pca | PhaseMethod::IfPca => {
            let m = if method == PhaseMethod::Pca { Method::Pca } else { Method::IfPca };
            let spec = MethodSpec {
                repeats: 1,
                ..MethodSpec::new(m, 2, seed)
            };
            run_method(&DataMatrix::new(inst.x.clone())?, &spec, cfg, None)
        }
    }
}

/// Generate one instance and score one method on it.
pub fn simulate_rep(config: &RareWeakConfig, method: PhaseMethod, cfg: &PipelineConfig) -> Result<RepOutcome> {
    let inst = generate_instance(config)?;
    match run_phase_method(&inst, method, cfg, config.seed) {
        Ok(report) => {
            let y_hat = labels_to_signs(&report.assignment.labels);
            let exact = method
                .selects()
                .then(|| report.retained.as_ref().is_some_and(|r| r.indices == inst.support));
            Ok(RepOutcome {
                hamming: hamming_error(&y_hat, &inst.y)?,
                exact_selection: exact,
                no_selection: false,
            })
        }
        Err(Error::NoFeaturesSelected { .. }) => Ok(RepOutcome {
            hamming: 0.5,
            exact_selection: Some(inst.support.is_empty()),
            no_selection: true,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseCell {
    pub beta: f64,
    pub alpha: f64,
    pub method: PhaseMethod,
    pub reps: usize,
    pub hamming_mean: f64,
    pub hamming_sd: f64,
    pub select_exact_rate: Option<f64>,
    /// Repetitions where nothing passed the threshold (scored as 0.5).
    pub no_selection: usize,
}

impl PhaseCell {
    pub fn from_outcomes(beta: f64, alpha: f64, method: PhaseMethod, outcomes: &[RepOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("a cell needs at least one repetition".into()));
        }
        let h: Vec<f64> = outcomes.iter().map(|o| o.hamming).collect();
        let (mean, sd) = if h.len() > 1 {
            mean_sd(&h, SdMode::Sample)
        } else {
            (h[0], 0.0)
        };
        let exact: Vec<bool> = outcomes.iter().filter_map(|o| o.exact_selection).collect();
        Ok(Self {
            beta,
            alpha,
            method,
            reps: outcomes.len(),
            hamming_mean: mean,
            hamming_sd: sd,
            select_exact_rate: (!exact.is_empty())
                .then(|| exact.iter().filter(|&&e| e).count() as f64 / exact.len() as f64),
            no_selection: outcomes.iter().filter(|o| o.no_selection).count(),
        })
    }
}

/// `reps` repetitions of `template` with seeds `derive_path(base_seed, [stream.., rep])`.
pub fn simulate_cell(
    template: &RareWeakConfig,
    method: PhaseMethod,
    reps: usize,
    base_seed: u64,
    stream: &[u64],
    cfg: &PipelineConfig,
) -> Result<PhaseCell> {
    let outcomes: Result<Vec<RepOutcome>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut path = stream.to_vec();
            path.push(rep as u64);
            let c = RareWeakConfig {
                seed: derive_path(base_seed, &path),
                ..template.clone()
            };
            simulate_rep(&c, method, cfg)
        })
        .collect();
    PhaseCell::from_outcomes(template.beta, template.alpha, method, &outcomes?)
}

/// Move `beta` off the two phase boundaries.
pub fn nudge_off_boundary(theta: f64, beta: f64) -> f64 {
    if (beta - 0.5).abs() < BOUNDARY_TOL || (beta - (1.0 - theta / 2.0)).abs() < BOUNDARY_TOL {
        beta + BOUNDARY_NUDGE
    } else {
        beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGridSpec {
    pub p: usize,
    pub theta: f64,
    pub beta_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub methods: Vec<PhaseMethod>,
    pub reps: usize,
    pub base_seed: u64,
}

/// One cell per `(beta, alpha, method)`, in that sort order.
///
/// Every method in a cell sees the same instances.
pub fn run_phase_grid(spec: &PhaseGridSpec, cfg: &PipelineConfig) -> Result<Vec<PhaseCell>> {
    if spec.beta_grid.is_empty() || spec.alpha_grid.is_empty() || spec.methods.is_empty() || spec.reps == 0 {
        return Err(Error::InvalidArgument("phase grid needs nonempty grids, methods and reps".into()));
    }
    let mut jobs = Vec::new();
    for (bi, &b) in spec.beta_grid.iter().enumerate() {
        for (ai, &a) in spec.alpha_grid.iter().enumerate() {
            for &m in &spec.methods {
                jobs.push((bi, ai, nudge_off_boundary(spec.theta, b), a, m));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(bi, ai, beta, alpha, m)| {
            let template = RareWeakConfig::new(spec.p, spec.theta, beta, alpha, 0);
            simulate_cell(&template, m, spec.reps, spec.base_seed, &[bi as u64, ai as u64], cfg)
        })
        .collect()
}

pub const GRID_HEADER: &str = "beta,alpha,method,reps,hamming_mean,hamming_sd,select_exact_rate";

pub fn write_grid_csv_to<W: Write>(out: &mut W, cells: &[PhaseCell]) -> std::io::Result<()> {
    writeln!(out, "{GRID_HEADER}")?;
    for c in cells {
        let rate = c.select_exact_rate.map(|r| r.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.beta, c.alpha, c.method, c.reps, c.hamming_mean, c.hamming_sd, rate
        )?;
    }
    Ok(())
}

/// Grid CSV plus a `<path>.json` companion with run metadata.
pub fn write_grid(path: &Path, cells: &[PhaseCell], spec: &PhaseGridSpec) -> Result<()> {
    write_atomic(path, |w| write_grid_csv_to(w, cells))?;
    let meta = serde_json::json!({
        "schema_version": 1,
        "p": spec.p,
        "theta": spec.theta,
        "base_seed": spec.base_seed,
        "reps": spec.reps,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".json");
    write_atomic(Path::new(&meta_path), |w| {
        serde_json::to_writer_pretty(&mut *w, &meta).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

/// `tau` such that `sqrt(n/2) tau^2 = multiple * sqrt(2 log p)`.
pub fn tau_for_chi2_snr(n: usize, p: usize, multiple: f64) -> f64 {
    let target = multiple * (2.0 * (p as f64).ln()).sqrt();
    (target / (n as f64 / 2.0).sqrt()).sqrt()
}

/// `||mu||^2` giving `N ||mu||^2 / (N + 2 sqrt(N m)) = ratio`.
pub fn mu_norm_sq_for_ratio(big_n: usize, m: usize, ratio: f64) -> f64 {
    let (nn, mm) = (big_n as f64, m as f64);
    ratio * (nn + 2.0 * (nn * mm).sqrt()) / nn
}

fn signal_plus_noise(big_n: usize, m: usize, mu_norm_sq: f64, seed: u64, noise: bool) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = job_rng(seed);
    let y = DVector::from_fn(big_n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let amp = (mu_norm_sq / m as f64).sqrt();
    let mu: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { amp } else { -amp }).collect();
    let x = DMatrix::from_fn(big_n, m, |i, j| {
        let z: f64 = if noise { StandardNormal.sample(&mut rng) } else { 0.0 };
        y[i] * mu[j] + z
    });
    (x, y)
}

fn sup_discrepancy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let xi = truncated_svd(x, 1)?.vectors.column(0) * (x.nrows() as f64).sqrt();
    let plus = (&xi - y).amax();
    let minus = (&xi + y).amax();
    Ok(plus.min(minus))
}

/// `min(||sqrt(N) xi - Y||_inf, ||sqrt(N) xi + Y||_inf)` for each of `reps` instances.
pub fn leading_vector_discrepancies(big_n: usize, m: usize, mu_norm_sq: f64, reps: usize, seed: u64) -> Result<Vec<f64>> {
    if big_n < 2 || m < 1 || reps == 0 || !(mu_norm_sq > 0.0) {
        return Err(Error::InvalidArgument("leading-vector check needs N >= 2, m >= 1, reps >= 1, ||mu||^2 > 0".into()));
    }
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let (x, y) = signal_plus_noise(big_n, m, mu_norm_sq, derive_path(seed, &[r as u64]), true);
            sup_discrepancy(&x, &y)
        })
        .collect()
}

/// Largest discrepancy over the repetitions.
pub fn leading_vector_check(big_n: usize, m: usize, mu_norm_sq: f64, reps: usize, seed: u64) -> Result<f64> {
    Ok(leading_vector_discrepancies(big_n, m, mu_norm_sq, reps, seed)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Same discrepancy with the noise switched off.
pub fn leading_vector_noiseless(big_n: usize, m: usize, mu_norm_sq: f64, seed: u64) -> Result<f64> {
    let (x, y) = signal_plus_noise(big_n, m, mu_norm_sq, seed, false);
    sup_discrepancy(&x, &y)
}
