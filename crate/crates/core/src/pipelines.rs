//! End-to-end clustering methods and the feature-count sweep.
//!
//! | method    | feature selection | reduced matrix | reduction          |
//! |-----------|-------------------|----------------|--------------------|
//! | `pca`     | none              | `W`            | K-1 singular vecs  |
//! | `pca-x`   | none              | `X`            | K singular vecs    |
//! | `ifpca`   | KS + HCT on `W`   | `W_IF`         | K-1 singular vecs  |
//! | `ifpca-x` | KS + HCT on `W`   | `X_IF`         | K-1 singular vecs  |
//! | `vae`     | none              | `W`            | VAE latent means   |
//! | `vae-x`   | none              | `X`            | VAE latent means   |
//! | `ifvae`   | KS + HCT on `W`   | `W_IF`         | VAE latent means   |
//! | `ifvae-x` | KS + HCT on `W`   | `X_IF`         | VAE latent means   |
//! | `spca`    | none              | `X`            | sign of 1st vector |
//! | `sifpca`  | chi-square cutoff | `X_S`          | sign of 1st vector |
//!
//! `W` is the column-normalized data, `X` the data as given. The simplified
//! methods assume `X` is already standardized and skip normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{normalize_columns, DataMatrix, LabelVector, NormalizedMatrix, SdMode};
use crate::error::{Error, Result};
use crate::metrics::clustering_error;
use crate::rng::{derive_path, derive_seed};
use crate::scoring::{chi_square_scores, score_features, KsScoreSet, NullSettings};
use crate::selection::{chi2_threshold, fixed_threshold_select, hct, top_m_select, FeatureSet, HcVariant, SelectionResult};
use crate::spectral::{kmeans, sign_cluster, truncated_svd, ClusterAssignment, KmeansConfig};
use crate::vae::{encode, train_vae, VaeHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Pca,
    IfPca,
    Vae,
    IfVae,
    SimplifiedPca,
    SimplifiedIfPca,
}

/// Which matrix the clustering step reduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringInput {
    Normalized,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Pca,
    PcaX,
    IfPca,
    IfPcaX,
    Vae,
    VaeX,
    IfVae,
    IfVaeX,
    SimplifiedPca,
    SimplifiedIfPca,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Pca,
        Method::PcaX,
        Method::IfPca,
        Method::IfPcaX,
        Method::Vae,
        Method::VaeX,
        Method::IfVae,
        Method::IfVaeX,
        Method::SimplifiedPca,
        Method::SimplifiedIfPca,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::PcaX => "pca-x",
            Method::IfPca => "ifpca",
            Method::IfPcaX => "ifpca-x",
            Method::Vae => "vae",
            Method::VaeX => "vae-x",
            Method::IfVae => "ifvae",
            Method::IfVaeX => "ifvae-x",
            Method::SimplifiedPca => "spca",
            Method::SimplifiedIfPca => "sifpca",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::Pca | Method::PcaX => Family::Pca,
            Method::IfPca | Method::IfPcaX => Family::IfPca,
            Method::Vae | Method::VaeX => Family::Vae,
            Method::IfVae | Method::IfVaeX => Family::IfVae,
            Method::SimplifiedPca => Family::SimplifiedPca,
            Method::SimplifiedIfPca => Family::SimplifiedIfPca,
        }
    }

    pub fn clustering_input(self) -> ClusteringInput {
        match self {
            Method::Pca | Method::IfPca | Method::Vae | Method::IfVae => ClusteringInput::Normalized,
            _ => ClusteringInput::Raw,
        }
    }

    /// Only the valid (family, input) pairs map to a method.
    pub fn from_parts(family: Family, input: ClusteringInput) -> Result<Method> {
        use ClusteringInput::*;
        Ok(match (family, input) {
            (Family::Pca, Normalized) => Method::Pca,
            (Family::Pca, Raw) => Method::PcaX,
            (Family::IfPca, Normalized) => Method::IfPca,
            (Family::IfPca, Raw) => Method::IfPcaX,
            (Family::Vae, Normalized) => Method::Vae,
            (Family::Vae, Raw) => Method::VaeX,
            (Family::IfVae, Normalized) => Method::IfVae,
            (Family::IfVae, Raw) => Method::IfVaeX,
            (Family::SimplifiedPca, Raw) => Method::SimplifiedPca,
            (Family::SimplifiedIfPca, Raw) => Method::SimplifiedIfPca,
            (f, i) => {
                return Err(Error::InvalidArgument(format!(
                    "{f:?} has no variant clustering on {i:?} data"
                )))
            }
        })
    }

    pub fn has_if_step(self) -> bool {
        matches!(self.family(), Family::IfPca | Family::IfVae)
    }

    pub fn uses_vae(self) -> bool {
        matches!(self.family(), Family::Vae | Family::IfVae)
    }

    pub fn default_repeats(self) -> usize {
        if self.uses_vae() {
            10
        } else {
            5
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl MethodSpec {
    pub fn new(method: Method, k: usize, seed: u64) -> Self {
        Self {
            method,
            k,
            seed,
            repeats: method.default_repeats(),
        }
    }
}

/// Number of singular vectors kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorCount {
    KMinusOne,
    K,
}

impl VectorCount {
    pub fn count(self, k: usize) -> usize {
        match self {
            VectorCount::KMinusOne => k - 1,
            VectorCount::K => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub null: NullSettings,
    pub hc_variant: HcVariant,
    pub kmeans: KmeansConfig,
    pub sd_mode: SdMode,
    /// Singular vectors of `X` used by `pca-x`.
    pub raw_pca_vectors: VectorCount,
    /// Singular vectors of `X_IF` used by `ifpca-x` and the sweep.
    pub x_variant_vectors: VectorCount,
    pub vae: VaeHyper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            null: NullSettings::default(),
            hc_variant: HcVariant::default(),
            kmeans: KmeansConfig::default(),
            sd_mode: SdMode::default(),
            raw_pca_vectors: VectorCount::K,
            x_variant_vectors: VectorCount::KMinusOne,
            vae: VaeHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub method: Method,
    /// Clustering from the first repeat.
    pub assignment: ClusterAssignment,
    pub retained: Option<FeatureSet>,
    /// Error count of each repeat, when truth labels were given.
    pub per_repeat_errors: Option<Vec<usize>>,
    pub diagnostics: BTreeMap<String, Value>,
}

impl PipelineReport {
    pub fn mean_error_rate(&self) -> Option<f64> {
        let errs = self.per_repeat_errors.as_ref()?;
        let n = self.assignment.labels.len() as f64;
        Some(errs.iter().sum::<usize>() as f64 / (errs.len() as f64 * n))
    }
}

/// Output of the feature-selection stage.
#[derive(Debug, Clone)]
pub struct IfStep {
    pub normalized: NormalizedMatrix,
    pub scores: KsScoreSet,
    pub selection: SelectionResult,
    /// Retained features as column indices of the original `X`.
    pub retained: FeatureSet,
}

impl IfStep {
    pub fn w_if(&self) -> DMatrix<f64> {
        self.normalized.values.select_columns(&self.selection.retained)
    }
}

/// Normalize, score every feature and threshold by Higher Criticism.
pub fn if_step(x: &DataMatrix, cfg: &PipelineConfig) -> Result<IfStep> {
    if x.ncols() < 2 {
        return Err(Error::InvalidArgument("the IF step needs at least 2 features".into()));
    }
    let normalized = normalize_columns(x, cfg.sd_mode)?;
    let scores = score_features(&normalized.values, &cfg.null)?;
    let selection = hct(&scores.pvalues, normalized.nrows(), cfg.hc_variant)?;
    let indices = selection.retained.iter().map(|&c| normalized.retained[c]).collect();
    let mut retained = selection.feature_set();
    retained.indices = indices;
    Ok(IfStep {
        normalized,
        scores,
        selection,
        retained,
    })
}

enum Reducer {
    Svd(usize),
    Vae(VaeHyper),
}

struct Clustered {
    assignment: ClusterAssignment,
    errors: Option<Vec<usize>>,
    singular_values: Option<Vec<f64>>,
}

fn count_errors(labels: &[usize], truth: &LabelVector, k: usize) -> Result<usize> {
    Ok(clustering_error(labels, truth.labels(), k.max(truth.k()))?.error_count)
}

fn check_truth(truth: Option<&LabelVector>, n: usize) -> Result<()> {
    match truth {
        Some(t) if t.len() != n => Err(Error::DimensionMismatch(format!(
            "{} labels for {n} subjects",
            t.len()
        ))),
        _ => Ok(()),
    }
}

/// Reduce `mat`, then k-means the rows; repeat `r` uses seeds derived from `(seed, r)`.
fn reduce_and_cluster(
    mat: &DMatrix<f64>,
    reducer: &Reducer,
    k: usize,
    kcfg: KmeansConfig,
    seed: u64,
    repeats: usize,
    truth: Option<&LabelVector>,
) -> Result<Clustered> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    let (assignments, singular_values) = match reducer {
        Reducer::Svd(r) => {
            let emb = truncated_svd(mat, *r)?;
            let runs: Result<Vec<_>> = (0..repeats)
                .into_par_iter()
                .map(|rep| kmeans(&emb.vectors, k, kcfg, derive_seed(seed, rep as u64)))
                .collect();
            (runs?, Some(emb.singular_values))
        }
        Reducer::Vae(hyper) => {
            let runs: Result<Vec<_>> = (0..repeats)
                .into_par_iter()
                .map(|rep| {
                    let h = VaeHyper {
                        seed: derive_seed(seed, rep as u64),
                        ..*hyper
                    };
                    let trained = train_vae(mat, &h)?;
                    let z = encode(&trained.params, mat)?;
                    kmeans(&z.means, k, kcfg, derive_path(seed, &[rep as u64, 1]))
                })
                .collect();
            (runs?, None)
        }
    };
    let errors = truth
        .map(|t| assignments.iter().map(|a| count_errors(&a.labels, t, k)).collect::<Result<Vec<_>>>())
        .transpose()?;
    let assignment = assignments.into_iter().next().expect("repeats >= 1");
    Ok(Clustered {
        assignment,
        errors,
        singular_values,
    })
}

/// Run one method end to end. `truth`, when given, fills `per_repeat_errors`.
pub fn run_method(
    x: &DataMatrix,
    spec: &MethodSpec,
    cfg: &PipelineConfig,
    truth: Option<&LabelVector>,
) -> Result<PipelineReport> {
    let k = spec.k;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K = {k}; need at least 2 clusters")));
    }
    check_truth(truth, x.nrows())?;
    match spec.method {
        Method::SimplifiedPca | Method::SimplifiedIfPca => {
            if k != 2 {
                return Err(Error::InvalidArgument("simplified methods are two-class only".into()));
            }
            let mut report = if spec.method == Method::SimplifiedPca {
                simplified_pca(x.values())?
            } else {
                simplified_if_pca(x.values())?
            };
            if let Some(t) = truth {
                report.per_repeat_errors = Some(vec![count_errors(&report.assignment.labels, t, k)?]);
            }
            return Ok(report);
        }
        _ => {}
    }

    let mut diag = BTreeMap::new();
    let method = spec.method;
    let (mat, tag, retained) = if method.has_if_step() {
        let step = if_step(x, cfg)?;
        diag.insert("selection_matrix".into(), json!("W"));
        diag.insert("hc_threshold".into(), json!(step.selection.threshold));
        diag.insert("hc_rank".into(), json!(step.selection.j_hat));
        diag.insert("hc_fallback".into(), json!(step.selection.fallback_used));
        diag.insert("retained_count".into(), json!(step.retained.len()));
        diag.insert("null_table".into(), json!(step.scores.null_table_id));
        diag.insert("efron_mu".into(), json!(step.scores.mu_star));
        diag.insert("efron_sigma".into(), json!(step.scores.sigma_star));
        match method.clustering_input() {
            ClusteringInput::Normalized => (step.w_if(), "W_IF", Some(step.retained)),
            ClusteringInput::Raw => {
                let m = x.values().select_columns(&step.retained.indices);
                (m, "X_IF", Some(step.retained))
            }
        }
    } else {
        match method.clustering_input() {
            ClusteringInput::Normalized => (normalize_columns(x, cfg.sd_mode)?.values, "W", None),
            ClusteringInput::Raw => (x.values().clone(), "X", None),
        }
    };
    diag.insert("reduction_matrix".into(), json!(tag));

    let reducer = if method.uses_vae() {
        diag.insert("reduction".into(), json!("vae"));
        diag.insert("latent_dim".into(), json!(cfg.vae.latent_dim));
        Reducer::Vae(cfg.vae)
    } else {
        let r = match method {
            Method::PcaX => cfg.raw_pca_vectors.count(k),
            Method::IfPcaX => cfg.x_variant_vectors.count(k),
            _ => k - 1,
        };
        diag.insert("reduction".into(), json!("svd"));
        diag.insert("vectors".into(), json!(r));
        Reducer::Svd(r)
    };
    let out = reduce_and_cluster(&mat, &reducer, k, cfg.kmeans, spec.seed, spec.repeats, truth)?;
    if let Some(sv) = out.singular_values {
        diag.insert("singular_values".into(), json!(sv));
    }
    diag.insert("repeats".into(), json!(spec.repeats));
    Ok(PipelineReport {
        method,
        assignment: out.assignment,
        retained,
        per_repeat_errors: out.errors,
        diagnostics: diag,
    })
}

fn first_vector_signs(x: &DMatrix<f64>) -> Result<(ClusterAssignment, f64)> {
    let emb = truncated_svd(x, 1)?;
    Ok((sign_cluster(emb.vectors.column(0).as_slice()), emb.singular_values[0]))
}

/// Sign clustering on the first left singular vector of the whole matrix.
pub fn simplified_pca(x: &DMatrix<f64>) -> Result<PipelineReport> {
    let (assignment, sv) = first_vector_signs(x)?;
    let mut diag = BTreeMap::new();
    diag.insert("reduction_matrix".into(), json!("X"));
    diag.insert("singular_values".into(), json!([sv]));
    Ok(PipelineReport {
        method: Method::SimplifiedPca,
        assignment,
        retained: None,
        per_repeat_errors: None,
        diagnostics: diag,
    })
}

/// Chi-square screening at `sqrt(2 log p)`, then sign clustering on the kept columns.
pub fn simplified_if_pca(x: &DMatrix<f64>) -> Result<PipelineReport> {
    let p = x.ncols() as f64;
    let chi = chi_square_scores(x);
    let selected = fixed_threshold_select(&chi, p);
    if selected.is_empty() {
        return Err(Error::NoFeaturesSelected {
            threshold: chi2_threshold(p),
        });
    }
    let (assignment, sv) = first_vector_signs(&x.select_columns(&selected.indices))?;
    let mut diag = BTreeMap::new();
    diag.insert("selection_matrix".into(), json!("X"));
    diag.insert("reduction_matrix".into(), json!("X_S"));
    diag.insert("chi2_threshold".into(), json!(chi2_threshold(p)));
    diag.insert("retained_count".into(), json!(selected.len()));
    diag.insert("singular_values".into(), json!([sv]));
    Ok(PipelineReport {
        method: Method::SimplifiedIfPca,
        assignment,
        retained: Some(selected),
        per_repeat_errors: None,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepClusterer {
    Pca,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub m: usize,
    pub mean_error_rate: f64,
    pub error_counts: Vec<usize>,
}

/// Cluster on the raw columns of the `m` top-ranked features, for each `m` in `m_grid`.
///
/// Features are ranked by Efron-standardized KS score on `W`. Each point uses the
/// same seeds as `run_method`, so `m = p` matches `pca-x` with equal vector counts.
#[allow(clippy::too_many_arguments)]
pub fn feature_sweep(
    x: &DataMatrix,
    truth: &LabelVector,
    k: usize,
    m_grid: &[usize],
    clusterer: SweepClusterer,
    cfg: &PipelineConfig,
    seed: u64,
    repeats: usize,
) -> Result<Vec<SweepPoint>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K = {k}; need at least 2 clusters")));
    }
    check_truth(Some(truth), x.nrows())?;
    let step = if_step(x, cfg)?;
    let scores = &step.scores.standardized;
    if m_grid.is_empty() {
        return Err(Error::InvalidArgument("empty feature-count grid".into()));
    }
    let reducer = match clusterer {
        SweepClusterer::Pca => Reducer::Svd(cfg.x_variant_vectors.count(k)),
        SweepClusterer::Vae => Reducer::Vae(cfg.vae),
    };
    m_grid
        .iter()
        .map(|&m| {
            let top = top_m_select(scores, m)?;
            let cols: Vec<usize> = top.indices.iter().map(|&c| step.normalized.retained[c]).collect();
            let sub = x.values().select_columns(&cols);
            let out = reduce_and_cluster(&sub, &reducer, k, cfg.kmeans, seed, repeats, Some(truth))?;
            let counts = out.errors.expect("truth supplied");
            let mean = counts.iter().sum::<usize>() as f64 / (counts.len() * x.nrows()) as f64;
            Ok(SweepPoint {
                m,
                mean_error_rate: mean,
                error_counts: counts,
            })
        })
        .collect()
}
