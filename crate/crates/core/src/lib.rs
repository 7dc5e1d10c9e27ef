//! Two-step clustering for high-dimensional data: influential-feature
//! selection (KS scores thresholded by Higher Criticism) followed by a
//! spectral or VAE embedding and k-means, plus a Rare/Weak model simulator.

pub mod data;
pub mod error;
pub mod metrics;
pub mod pipelines;
pub mod rareweak;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod spectral;
pub mod vae;

pub use data::{load_labels, load_matrix, normalize_columns, DataMatrix, LabelVector, NormalizedMatrix, SdMode};
pub use error::{Error, Result};
pub use metrics::{ari, clustering_error, regret_and_rank, ErrorTable, LeaderboardReport, MetricsReport};
pub use pipelines::{feature_sweep, if_step, run_method, Method, MethodSpec, PipelineConfig, PipelineReport};
pub use rareweak::{generate_instance, hamming_error, PhaseCell, PhaseMethod, RareWeakConfig, RareWeakInstance};
pub use scoring::{ks_score, score_features, NullCdfTable, NullSettings, PValueMode, StatisticKind};
pub use selection::{hct, FeatureSet, HcVariant, SelectionResult};
pub use spectral::{kmeans, truncated_svd, ClusterAssignment, KmeansConfig};
pub use vae::{VaeHyper, VaeParams};
