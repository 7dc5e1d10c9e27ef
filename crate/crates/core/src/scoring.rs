//! Per-feature marginal scores: Kolmogorov-Smirnov scores against a
//! simulated studentized-normal null, Efron's null correction, p-values,
//! and normalized chi-square scores.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use log::{debug, info};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_sd, write_atomic, SdMode};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, job_rng};

/// Environment variable naming the on-disk null-table cache directory.
pub const NULL_CACHE_ENV: &str = "IFPCA_NULL_CACHE_DIR";

pub const DEFAULT_NULL_REPLICATES: usize = 100_000;
pub const MIN_NULL_REPLICATES: usize = 10_000;

/// A cumulative distribution function usable as the KS reference.
pub trait NullCdf {
    fn cdf(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64> NullCdf for F {
    fn cdf(&self, t: f64) -> f64 {
        self(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// KS scores of iid normal samples.
    KsScore,
    /// Individual studentized values `(z_i - mean) / sd`.
    StudentizedValue,
}

impl StatisticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatisticKind::KsScore => "ks_score",
            StatisticKind::StudentizedValue => "studentized_value",
        }
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ks_score" => Ok(StatisticKind::KsScore),
            "studentized_value" => Ok(StatisticKind::StudentizedValue),
            other => Err(Error::InvalidArgument(format!("unknown statistic kind {other:?}"))),
        }
    }
}

/// Sorted Monte Carlo draws of a null statistic; evaluates as an empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct NullCdfTable {
    pub n: usize,
    pub seed: u64,
    pub kind: StatisticKind,
    draws: Vec<f64>,
}

impl NullCdfTable {
    pub fn from_sorted(n: usize, seed: u64, kind: StatisticKind, draws: Vec<f64>) -> Result<Self> {
        if draws.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("null draws must be sorted ascending".into()));
        }
        if draws.is_empty() || draws.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("null table draws".into()));
        }
        Ok(Self { n, seed, kind, draws })
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    /// Number of replicates `B`.
    pub fn replicates(&self) -> usize {
        self.draws.len()
    }

    /// `#{draws <= t} / B`.
    pub fn cdf_at(&self, t: f64) -> f64 {
        self.draws.partition_point(|&d| d <= t) as f64 / self.draws.len() as f64
    }

    pub fn id(&self) -> String {
        format!("n={},B={},seed={},kind={}", self.n, self.replicates(), self.seed, self.kind)
    }

    /// Cache format: a header line `n,B,seed,kind` with the table's values, then one draw per line.
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{},{},{},{}", self.n, self.replicates(), self.seed, self.kind)?;
        for d in &self.draws {
            writeln!(out, "{d}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let bad = |message: String| Error::Format {
            path: path.into(),
            message,
        };
        let header = lines.next().ok_or_else(|| Error::EmptyFile { path: path.into() })?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("header {header:?} is not n,B,seed,kind")));
        }
        let n: usize = fields[0].parse().map_err(|_| bad(format!("bad n {:?}", fields[0])))?;
        let b: usize = fields[1].parse().map_err(|_| bad(format!("bad B {:?}", fields[1])))?;
        let seed: u64 = fields[2].parse().map_err(|_| bad(format!("bad seed {:?}", fields[2])))?;
        let kind: StatisticKind = fields[3].parse()?;
        let draws = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| Error::ParseCell {
                    path: path.into(),
                    row: i + 2,
                    col: 1,
                    cell: l.to_owned(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if draws.len() != b {
            return Err(bad(format!("header says B={b} but file holds {} draws", draws.len())));
        }
        Self::from_sorted(n, seed, kind, draws)
    }
}

impl NullCdf for NullCdfTable {
    fn cdf(&self, t: f64) -> f64 {
        self.cdf_at(t)
    }
}

/// `(z_i - mean) / sd` with the sample standard deviation.
pub fn studentize(z: &[f64]) -> Result<Vec<f64>> {
    if z.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 values to studentize".into()));
    }
    let (m, s) = mean_sd(z, SdMode::Sample);
    if !(s > 0.0) || s <= 16.0 * f64::EPSILON * m.abs().max(1.0) {
        return Err(Error::Degenerate("sample has zero standard deviation".into()));
    }
    Ok(z.iter().map(|v| (v - m) / s).collect())
}

/// KS distance of already-sorted values from `cdf`, scaled by `sqrt(n)`.
///
/// Evaluates both sides of every jump of the empirical CDF. Ties are handled
/// because a tied run's inner points never exceed its outer points.
fn ks_sorted<C: NullCdf + ?Sized>(sorted: &[f64], cdf: &C) -> f64 {
    let n = sorted.len() as f64;
    let mut sup = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf.cdf(x);
        let upper = (i + 1) as f64 / n - f;
        let lower = f - i as f64 / n;
        sup = sup.max(upper).max(lower);
    }
    n.sqrt() * sup
}

/// `sqrt(n) * sup_t |F_n(t) - F(t)|` for the studentized sample.
pub fn ks_score<C: NullCdf + ?Sized>(z: &[f64], null_cdf: &C) -> Result<f64> {
    if z.len() < 3 {
        return Err(Error::InvalidArgument(format!("KS score needs n >= 3, got {}", z.len())));
    }
    let mut w = studentize(z)?;
    w.sort_by(f64::total_cmp);
    Ok(ks_sorted(&w, null_cdf))
}

fn normal_block(rng: &mut crate::rng::JobRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

const BLOCK_REPLICATES: usize = 2048;

/// Simulate a null table for sample size `n` from `b` replicates.
///
/// * `StudentizedValue`: pooled studentized values from `ceil(b / n)` normal samples, truncated to `b`.
/// * `KsScore`: `b` KS scores of studentized normal samples, each scored against the
///   `StudentizedValue` table built from the same `(n, b, seed)`.
pub fn build_null_cdf(n: usize, b: usize, seed: u64, kind: StatisticKind) -> Result<NullCdfTable> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("null table needs n >= 3, got {n}")));
    }
    if b < MIN_NULL_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "null table needs B >= {MIN_NULL_REPLICATES}, got {b}"
        )));
    }
    let mut draws = match kind {
        StatisticKind::StudentizedValue => {
            let samples = b.div_ceil(n);
            let per_block = BLOCK_REPLICATES.div_ceil(n).max(1);
            let blocks = samples.div_ceil(per_block);
            let mut pooled: Vec<f64> = (0..blocks)
                .into_par_iter()
                .flat_map_iter(|blk| {
                    let mut rng = job_rng(derive_seed(seed, blk as u64));
                    let count = per_block.min(samples - blk * per_block);
                    let mut out = Vec::with_capacity(count * n);
                    for _ in 0..count {
                        let z = normal_block(&mut rng, n);
                        out.extend(studentize(&z).expect("normal sample has positive spread"));
                    }
                    out
                })
                .collect();
            pooled.truncate(b);
            pooled
        }
        StatisticKind::KsScore => {
            let reference = build_null_cdf(n, b, seed, StatisticKind::StudentizedValue)?;
            let ks_seed = derive_seed(seed, u64::MAX);
            let blocks = b.div_ceil(BLOCK_REPLICATES);
            (0..blocks)
                .into_par_iter()
                .flat_map_iter(|blk| {
                    let mut rng = job_rng(derive_seed(ks_seed, blk as u64));
                    let count = BLOCK_REPLICATES.min(b - blk * BLOCK_REPLICATES);
                    let reference = &reference;
                    (0..count)
                        .map(|_| {
                            let z = normal_block(&mut rng, n);
                            let mut w = studentize(&z).expect("normal sample has positive spread");
                            w.sort_by(f64::total_cmp);
                            ks_sorted(&w, reference)
                        })
                        .collect::<Vec<f64>>()
                })
                .collect()
        }
    };
    draws.sort_by(f64::total_cmp);
    NullCdfTable::from_sorted(n, seed, kind, draws)
}

/// Tables keyed by `(n, B, seed, kind)`.
type Memo = Mutex<HashMap<(usize, usize, u64, StatisticKind), Arc<NullCdfTable>>>;

fn memo() -> &'static Memo {
    static MEMO: OnceLock<Memo> = OnceLock::new();
    MEMO.get_or_init(Default::default)
}

/// File name used for a table inside a cache directory.
pub fn cache_file_name(n: usize, b: usize, seed: u64, kind: StatisticKind) -> String {
    format!("null_n{n}_B{b}_seed{seed}_{kind}.csv")
}

/// Cache directory from `IFPCA_NULL_CACHE_DIR`, if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(NULL_CACHE_ENV).map(PathBuf::from)
}

/// Fetch a null table from the in-process memo, then the disk cache, building it if absent.
pub fn null_table(
    n: usize,
    b: usize,
    seed: u64,
    kind: StatisticKind,
    cache_dir: Option<&Path>,
) -> Result<Arc<NullCdfTable>> {
    let key = (n, b, seed, kind);
    if let Some(t) = memo().lock().expect("null-table memo poisoned").get(&key) {
        return Ok(Arc::clone(t));
    }
    let path = cache_dir.map(|d| d.join(cache_file_name(n, b, seed, kind)));
    let table = match path.as_deref().filter(|p| p.exists()) {
        Some(p) => {
            debug!("loading null table from {}", p.display());
            let t = NullCdfTable::load(p)?;
            if (t.n, t.replicates(), t.seed, t.kind) != key {
                return Err(Error::Format {
                    path: p.into(),
                    message: format!("cached table {} does not match the requested key", t.id()),
                });
            }
            t
        }
        None => {
            info!("building {kind} null table for n={n}, B={b}");
            let t = build_null_cdf(n, b, seed, kind)?;
            if let (Some(dir), Some(p)) = (cache_dir, &path) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                t.save(p)?;
            }
            t
        }
    };
    let table = Arc::new(table);
    memo()
        .lock()
        .expect("null-table memo poisoned")
        .insert(key, Arc::clone(&table));
    Ok(table)
}

/// Result of Efron's null correction.
#[derive(Debug, Clone, PartialEq)]
pub struct EfronCorrection {
    pub mu_star: f64,
    pub sigma_star: f64,
    pub standardized: Vec<f64>,
}

/// Standardize scores by their own empirical mean and sample standard deviation.
pub fn efron_standardize(raw_scores: &[f64]) -> Result<EfronCorrection> {
    if raw_scores.len() < 2 {
        return Err(Error::InvalidArgument("Efron correction needs at least 2 scores".into()));
    }
    let (mu, sigma) = mean_sd(raw_scores, SdMode::Sample);
    if !(sigma > 0.0) || sigma <= 16.0 * f64::EPSILON * mu.abs().max(1.0) {
        return Err(Error::Degenerate("all feature scores are equal".into()));
    }
    Ok(EfronCorrection {
        mu_star: mu,
        sigma_star: sigma,
        standardized: raw_scores.iter().map(|s| (s - mu) / sigma).collect(),
    })
}

/// How standardized KS scores are turned into p-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMode {
    /// `1 - F(psi)` with `F` the studentized-value null CDF.
    #[default]
    Literal,
    /// Upper tail of Efron-standardized simulated null KS scores.
    NullScore,
}

impl PValueMode {
    pub fn table_kind(self) -> StatisticKind {
        match self {
            PValueMode::Literal => StatisticKind::StudentizedValue,
            PValueMode::NullScore => StatisticKind::KsScore,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            PValueMode::Literal => "literal",
            PValueMode::NullScore => "null_score",
        }
    }
}

/// p-values for Efron-standardized scores.
pub fn ks_pvalues(standardized: &[f64], table: &NullCdfTable, mode: PValueMode) -> Result<Vec<f64>> {
    if table.kind != mode.table_kind() {
        return Err(Error::NullTableMismatch {
            mode: mode.as_str(),
            expected: mode.table_kind().as_str(),
            found: table.kind.as_str(),
        });
    }
    Ok(match mode {
        PValueMode::Literal => standardized.iter().map(|&s| 1.0 - table.cdf_at(s)).collect(),
        PValueMode::NullScore => {
            let corrected = efron_standardize(table.draws())?;
            // Affine map preserves order, so the standardized draws stay sorted.
            let null = NullCdfTable::from_sorted(table.n, table.seed, table.kind, corrected.standardized)?;
            standardized.iter().map(|&s| 1.0 - null.cdf_at(s)).collect()
        }
    })
}

/// Everything the IF-step computes per feature.
#[derive(Debug, Clone)]
pub struct KsScoreSet {
    pub raw_scores: Vec<f64>,
    pub mu_star: f64,
    pub sigma_star: f64,
    pub standardized: Vec<f64>,
    pub pvalues: Vec<f64>,
    pub null_table_id: String,
    pub mode: PValueMode,
}

/// Settings for the simulated null tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSettings {
    pub replicates: usize,
    pub seed: u64,
    pub mode: PValueMode,
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
}

impl Default for NullSettings {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_NULL_REPLICATES,
            seed: 20_230_101,
            mode: PValueMode::Literal,
            cache_dir: cache_dir_from_env(),
        }
    }
}

/// KS scores of every column of `w` against the studentized-value null.
pub fn ks_scores_matrix(w: &DMatrix<f64>, reference: &NullCdfTable) -> Result<Vec<f64>> {
    (0..w.ncols())
        .into_par_iter()
        .map(|j| ks_score(w.column(j).as_slice(), reference))
        .collect()
}

/// KS scores, Efron correction and p-values for every column of `w`.
pub fn score_features(w: &DMatrix<f64>, settings: &NullSettings) -> Result<KsScoreSet> {
    let n = w.nrows();
    let reference = null_table(
        n,
        settings.replicates,
        settings.seed,
        StatisticKind::StudentizedValue,
        settings.cache_dir.as_deref(),
    )?;
    let raw_scores = ks_scores_matrix(w, &reference)?;
    let efron = efron_standardize(&raw_scores)?;
    let table = match settings.mode {
        PValueMode::Literal => reference,
        PValueMode::NullScore => null_table(
            n,
            settings.replicates,
            settings.seed,
            StatisticKind::KsScore,
            settings.cache_dir.as_deref(),
        )?,
    };
    let pvalues = ks_pvalues(&efron.standardized, &table, settings.mode)?;
    Ok(KsScoreSet {
        raw_scores,
        mu_star: efron.mu_star,
        sigma_star: efron.sigma_star,
        standardized: efron.standardized,
        pvalues,
        null_table_id: table.id(),
        mode: settings.mode,
    })
}

/// Normalized chi-square scores `(||x_j||^2 - n) / sqrt(2n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquareScores {
    pub scores: Vec<f64>,
    pub n: usize,
}

pub fn chi_square_scores(x: &DMatrix<f64>) -> ChiSquareScores {
    let n = x.nrows();
    let scale = (2.0 * n as f64).sqrt();
    let scores = x
        .column_iter()
        .map(|c| (c.norm_squared() - n as f64) / scale)
        .collect();
    ChiSquareScores { scores, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn phi(t: f64) -> f64 {
        Normal::standard().cdf(t)
    }

    #[test]
    fn ks_is_location_and_scale_invariant() {
        let z = [0.5, -1.2, 2.0, 0.3, -0.7];
        let base = ks_score(&z, &phi).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + 3.25).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * 4.0).collect();
        assert!((ks_score(&shifted, &phi).unwrap() - base).abs() < 1e-12);
        assert!((ks_score(&scaled, &phi).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ks_rejects_degenerate_input() {
        assert!(matches!(ks_score(&[1.0, 1.0, 1.0], &phi), Err(Error::Degenerate(_))));
        assert!(ks_score(&[1.0, 2.0], &phi).is_err());
    }

    #[test]
    fn ks_with_ties_matches_direct_definition() {
        // F_n jumps by 2/n at the tied value.
        let z = [1.0, 1.0, 2.0, 3.0];
        let w = studentize(&z).unwrap();
        let n = 4.0;
        let mut sup = 0.0_f64;
        for &t in &w {
            let le = w.iter().filter(|&&v| v <= t).count() as f64 / n;
            let lt = w.iter().filter(|&&v| v < t).count() as f64 / n;
            sup = sup.max((le - phi(t)).abs()).max((lt - phi(t)).abs());
        }
        assert!((ks_score(&z, &phi).unwrap() - n.sqrt() * sup).abs() < 1e-14);
    }

    #[test]
    fn null_tables_are_deterministic() {
        let a = build_null_cdf(20, 10_000, 9, StatisticKind::StudentizedValue).unwrap();
        let b = build_null_cdf(20, 10_000, 9, StatisticKind::StudentizedValue).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replicates(), 10_000);
        let c = build_null_cdf(20, 10_000, 10, StatisticKind::StudentizedValue).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn studentized_null_is_centered() {
        let t = build_null_cdf(50, 200_000, 1, StatisticKind::StudentizedValue).unwrap();
        let median = t.draws()[t.replicates() / 2];
        assert!(median.abs() < 0.02, "median {median}");
    }

    #[test]
    fn ks_null_draws_are_positive() {
        let t = build_null_cdf(100, 100_000, 2, StatisticKind::KsScore).unwrap();
        assert!(t.draws()[0] > 0.0);
        assert!(*t.draws().last().unwrap() <= 10.0);
    }

    #[test]
    fn rejects_small_tables() {
        assert!(build_null_cdf(10, 9_999, 0, StatisticKind::KsScore).is_err());
        assert!(build_null_cdf(2, 10_000, 0, StatisticKind::KsScore).is_err());
    }

    #[test]
    fn efron_examples() {
        let e = efron_standardize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.standardized, vec![-1.0, 0.0, 1.0]);
        let a: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|s| 2.5 * s - 7.0).collect();
        let e2 = efron_standardize(&a).unwrap();
        for (x, y) in e.standardized.iter().zip(&e2.standardized) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(efron_standardize(&[4.0, 4.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pvalue_endpoints_and_median() {
        let t = build_null_cdf(30, 10_000, 3, StatisticKind::StudentizedValue).unwrap();
        let max = *t.draws().last().unwrap();
        let min = t.draws()[0];
        let b = t.replicates();
        let med = t.draws()[b / 2 - 1];
        let p = ks_pvalues(&[max, min - 1.0, med], &t, PValueMode::Literal).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 1.0);
        let above = t.draws().iter().filter(|&&d| d > med).count() as f64 / b as f64;
        assert_eq!(p[2], above);
        assert!((p[2] - 0.5).abs() <= 1.0 / b as f64);
    }

    #[test]
    fn pvalue_mode_must_match_table() {
        let t = build_null_cdf(30, 10_000, 3, StatisticKind::StudentizedValue).unwrap();
        assert!(matches!(
            ks_pvalues(&[0.0], &t, PValueMode::NullScore),
            Err(Error::NullTableMismatch { .. })
        ));
    }

    #[test]
    fn chi_square_examples() {
        let mut x = DMatrix::zeros(8, 2);
        x.column_mut(1).fill(1.0);
        let s = chi_square_scores(&x);
        assert_eq!(s.scores[0], -2.0);
        assert_eq!(s.scores[1], 0.0);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = build_null_cdf(12, 10_000, 5, StatisticKind::StudentizedValue).unwrap();
        let p = dir.path().join("t.csv");
        t.save(&p).unwrap();
        let first = fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("12,10000,5,studentized_value\n"));
        assert_eq!(NullCdfTable::load(&p).unwrap(), t);
    }

    #[test]
    fn disk_cache_is_used() {
        let dir = tempfile::tempdir().unwrap();
        let t = null_table(13, 10_000, 77, StatisticKind::StudentizedValue, Some(dir.path())).unwrap();
        let file = dir.path().join(cache_file_name(13, 10_000, 77, StatisticKind::StudentizedValue));
        assert!(file.exists());
        assert_eq!(&NullCdfTable::load(&file).unwrap(), t.as_ref());
    }
}
