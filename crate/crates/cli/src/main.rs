//! `ifpca`: clustering pipelines, Rare/Weak simulation and reporting utilities.

mod grid;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use ifpca_core::data::{load_labels, load_matrix, write_atomic, DataMatrix, SdMode};
use ifpca_core::metrics::{clustering_error, regret_and_rank, ErrorTable};
use ifpca_core::pipelines::{
    feature_sweep, if_step, run_method, Method, MethodSpec, PipelineConfig, SweepClusterer, VectorCount,
};
use ifpca_core::rareweak::{
    nudge_off_boundary, run_phase_grid, simulate_cell, write_grid, PhaseGridSpec, PhaseMethod, RareWeakConfig,
};
use ifpca_core::scoring::{cache_dir_from_env, null_table, NullSettings, PValueMode, StatisticKind};
use ifpca_core::selection::{top_m_select, HcVariant};
use ifpca_core::spectral::KmeansConfig;
use ifpca_core::vae::VaeHyper;

const SCHEMA_VERSION: u32 = 1;

// Aliases keep clap from treating a parsed list as a repeated flag.
type Grid = Vec<f64>;
type Counts = Vec<usize>;

#[derive(Parser)]
#[command(name = "ifpca", version, about = "Influential-feature clustering and Rare/Weak simulation")]
struct Cli {
    /// Worker threads for repeats and grid cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster a data matrix with one of the ten pipelines.
    Cluster(ClusterArgs),
    /// Error rate against the number of top-ranked features kept.
    Sweep(SweepArgs),
    /// Monte Carlo repetitions of one Rare/Weak cell.
    Simulate(SimulateArgs),
    /// Phase-diagram grid over (beta, alpha).
    Phase(PhaseArgs),
    /// Build a null CDF table and store it.
    NullTable(NullTableArgs),
    /// Run only the feature-selection stage.
    Select(SelectArgs),
    /// Ranks and regrets from an error table.
    Leaderboard(LeaderboardArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Numeric matrix, comma- or tab-delimited; rows are subjects.
    #[arg(long)]
    data: PathBuf,
    /// File rows are features instead of subjects.
    #[arg(long)]
    transpose: bool,
    /// First row holds feature names.
    #[arg(long)]
    header: bool,
}

impl InputArgs {
    fn load(&self) -> Result<DataMatrix> {
        Ok(load_matrix(&self.data, self.transpose, self.header)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PValueArg {
    Literal,
    NullScore,
}

#[derive(Clone, Copy, ValueEnum)]
enum HcArg {
    AsPrinted,
    Binomial,
}

#[derive(Clone, Copy, ValueEnum)]
enum SdArg {
    Sample,
    Population,
}

#[derive(Clone, Copy, ValueEnum)]
enum VectorsArg {
    #[value(name = "k-1")]
    KMinusOne,
    K,
}

impl From<VectorsArg> for VectorCount {
    fn from(v: VectorsArg) -> Self {
        match v {
            VectorsArg::KMinusOne => VectorCount::KMinusOne,
            VectorsArg::K => VectorCount::K,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Monte Carlo replicates in the null table.
    #[arg(long, default_value_t = ifpca_core::scoring::DEFAULT_NULL_REPLICATES)]
    null_replicates: usize,
    #[arg(long, default_value_t = NullSettings::default().seed)]
    null_seed: u64,
    /// Directory for cached null tables (overrides the environment).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "literal")]
    pvalue_mode: PValueArg,
    #[arg(long, value_enum, default_value = "as-printed")]
    hc_variant: HcArg,
    #[arg(long, value_enum, default_value = "sample")]
    sd_mode: SdArg,
    /// k-means restarts.
    #[arg(long, default_value_t = 30)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Singular vectors of X used by pca-x.
    #[arg(long, value_enum, default_value = "k")]
    raw_pca_vectors: VectorsArg,
    /// Singular vectors used by ifpca-x and the sweep.
    #[arg(long, value_enum, default_value = "k-1")]
    x_variant_vectors: VectorsArg,
    #[arg(long, default_value_t = 25)]
    latent_dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Mini-batches per epoch.
    #[arg(long, default_value_t = 50)]
    batches: usize,
    #[arg(long, default_value_t = 0.0005)]
    learning_rate: f64,
}

impl ConfigArgs {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            null: NullSettings {
                replicates: self.null_replicates,
                seed: self.null_seed,
                mode: match self.pvalue_mode {
                    PValueArg::Literal => PValueMode::Literal,
                    PValueArg::NullScore => PValueMode::NullScore,
                },
                cache_dir: self.cache_dir.clone().or_else(cache_dir_from_env),
            },
            hc_variant: match self.hc_variant {
                HcArg::AsPrinted => HcVariant::AsPrinted,
                HcArg::Binomial => HcVariant::Binomial,
            },
            kmeans: KmeansConfig {
                restarts: self.restarts,
                max_iter: self.max_iter,
            },
            sd_mode: match self.sd_mode {
                SdArg::Sample => SdMode::Sample,
                SdArg::Population => SdMode::Population,
            },
            raw_pca_vectors: self.raw_pca_vectors.into(),
            x_variant_vectors: self.x_variant_vectors.into(),
            vae: VaeHyper {
                latent_dim: self.latent_dim,
                hidden: self.hidden,
                epochs: self.epochs,
                batches: self.batches,
                learning_rate: self.learning_rate,
                seed: 0,
            },
        }
    }

    fn describe(&self, cfg: &PipelineConfig) -> Value {
        json!({
            "null": cfg.null,
            "hc_variant": cfg.hc_variant,
            "kmeans": cfg.kmeans,
            "sd_mode": cfg.sd_mode,
            "raw_pca_vectors": cfg.raw_pca_vectors,
            "x_variant_vectors": cfg.x_variant_vectors,
            "vae": cfg.vae,
        })
    }
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Number of clusters.
    #[arg(long)]
    k: usize,
    /// pca, pca-x, ifpca, ifpca-x, vae, vae-x, ifvae, ifvae-x, spca or sifpca.
    #[arg(long, default_value = "ifpca")]
    method: Method,
    /// True labels, one per line, for error metrics.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Seed; drawn from the clock and recorded when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Independent repeats (default 10 for VAE methods, 5 otherwise).
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClustererArg {
    Pca,
    Vae,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    labels: PathBuf,
    /// Feature counts, `lo:hi:step` or a comma list.
    #[arg(long, value_parser = grid::parse_count_grid)]
    m_grid: Counts,
    #[arg(long, value_enum, default_value = "pca")]
    clusterer: ClustererArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Number of features.
    #[arg(long)]
    p: usize,
    /// Sample size exponent, `n = round(p^theta)`.
    #[arg(long)]
    theta: f64,
    /// Override the sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Override the signal strength `p^-alpha`.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Sparsity exponent.
    #[arg(long)]
    beta: f64,
    /// Strength exponent.
    #[arg(long)]
    alpha: f64,
    /// Override the signal fraction `p^-beta`.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Plant exactly this many signals.
    #[arg(long)]
    support_size: Option<usize>,
    /// spca, sifpca, pca or ifpca.
    #[arg(long)]
    method: PhaseMethod,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhaseArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    theta: f64,
    #[arg(long, value_parser = grid::parse_grid)]
    beta_grid: Grid,
    #[arg(long, value_parser = grid::parse_grid)]
    alpha_grid: Grid,
    /// Comma-separated method tags.
    #[arg(long, value_delimiter = ',', default_value = "spca,sifpca")]
    methods: Vec<PhaseMethod>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Grid CSV; metadata goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    StudentizedValue,
    KsScore,
}

#[derive(Args)]
struct NullTableArgs {
    /// Sample size.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = ifpca_core::scoring::DEFAULT_NULL_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = NullSettings::default().seed)]
    seed: u64,
    #[arg(long, value_enum, default_value = "studentized-value")]
    kind: KindArg,
    /// Write the table here instead of the cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Keep the top `m` features by standardized score instead of thresholding.
    #[arg(long)]
    top_m: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Per-feature scores as CSV.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct LeaderboardArgs {
    /// CSV with header `method,<dataset>...` and one row of error counts per method.
    #[arg(long)]
    errors: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        t.as_nanos() as u64
    })
}

/// Write to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => {
            write_atomic(path, |w| w.write_all(body.as_bytes()))?;
            info!("wrote {}", path.display());
        }
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn emit_json(out: Option<&Path>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(out, &text)
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let x = args.input.load()?;
    let truth = args.labels.as_deref().map(load_labels).transpose()?;
    let cfg = args.config.pipeline();
    let seed = resolve_seed(args.seed);
    let mut spec = MethodSpec::new(args.method, args.k, seed);
    if let Some(r) = args.repeats {
        spec.repeats = r;
    }
    let report = run_method(&x, &spec, &cfg, truth.as_ref())?;
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "method": report.method,
        "k": args.k,
        "seed": seed,
        "repeats": spec.repeats,
        "n": x.nrows(),
        "p": x.ncols(),
        "retained_count": report.retained.as_ref().map(|r| r.len()),
        "retained": report.retained.as_ref().map(|r| &r.indices),
        "labels": report.assignment.labels,
        "objective": report.assignment.objective,
        "config": args.config.describe(&cfg),
        "diagnostics": report.diagnostics,
    });
    if let Some(y) = &truth {
        let m = clustering_error(&report.assignment.labels, y.labels(), args.k.max(y.k()))?;
        out["error_count"] = json!(m.error_count);
        out["accuracy"] = json!(m.accuracy);
        out["ari"] = json!(m.ari);
        out["per_repeat_errors"] = json!(report.per_repeat_errors);
        out["mean_error_rate"] = json!(report.mean_error_rate());
    }
    emit_json(args.out.as_deref(), &out)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let x = args.input.load()?;
    let truth = load_labels(&args.labels)?;
    let cfg = args.config.pipeline();
    let seed = resolve_seed(args.seed);
    let clusterer = match args.clusterer {
        ClustererArg::Pca => SweepClusterer::Pca,
        ClustererArg::Vae => SweepClusterer::Vae,
    };
    if let Some(&m) = args.m_grid.iter().find(|&&m| m > x.ncols()) {
        bail!("feature count {m} exceeds the {} columns of the data", x.ncols());
    }
    let points = feature_sweep(&x, &truth, args.k, &args.m_grid, clusterer, &cfg, seed, args.repeats)?;
    emit_json(
        args.out.as_deref(),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "k": args.k,
            "seed": seed,
            "repeats": args.repeats,
            "clusterer": clusterer,
            "n": x.nrows(),
            "p": x.ncols(),
            "config": args.config.describe(&cfg),
            "points": points,
        }),
    )
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = args.config.pipeline();
    let seed = resolve_seed(args.seed);
    let template = RareWeakConfig {
        n: args.model.n,
        tau: args.model.tau,
        epsilon: args.epsilon,
        support_size: args.support_size,
        ..RareWeakConfig::new(
            args.model.p,
            args.model.theta,
            nudge_off_boundary(args.model.theta, args.beta),
            args.alpha,
            seed,
        )
    };
    template.validate()?;
    let cell = simulate_cell(&template, args.method, args.reps, seed, &[], &cfg)?;
    emit_json(
        args.out.as_deref(),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "seed": seed,
            "p": template.p,
            "theta": template.theta,
            "n": template.n(),
            "beta": cell.beta,
            "alpha": cell.alpha,
            "epsilon": template.epsilon(),
            "tau": template.tau(),
            "support_size": template.support_size,
            "method": cell.method,
            "reps": cell.reps,
            "hamming_mean": cell.hamming_mean,
            "hamming_sd": cell.hamming_sd,
            "select_exact_rate": cell.select_exact_rate,
            "no_selection": cell.no_selection,
        }),
    )
}

fn phase(args: PhaseArgs) -> Result<()> {
    let cfg = args.config.pipeline();
    let spec = PhaseGridSpec {
        p: args.p,
        theta: args.theta,
        beta_grid: args.beta_grid,
        alpha_grid: args.alpha_grid,
        methods: args.methods,
        reps: args.reps,
        base_seed: resolve_seed(args.seed),
    };
    let cells = run_phase_grid(&spec, &cfg)?;
    write_grid(&args.out, &cells, &spec)?;
    info!("wrote {} cells to {}", cells.len(), args.out.display());
    Ok(())
}

fn null_table_cmd(args: NullTableArgs) -> Result<()> {
    let kind = match args.kind {
        KindArg::StudentizedValue => StatisticKind::StudentizedValue,
        KindArg::KsScore => StatisticKind::KsScore,
    };
    let cache = args.cache_dir.or_else(cache_dir_from_env);
    if args.out.is_none() && cache.is_none() {
        bail!("give --out or --cache-dir (or set {})", ifpca_core::scoring::NULL_CACHE_ENV);
    }
    let table = null_table(args.n, args.replicates, args.seed, kind, cache.as_deref())?;
    if let Some(out) = &args.out {
        table.save(out)?;
        info!("wrote {}", out.display());
    }
    println!("{}", table.id());
    Ok(())
}

fn select(args: SelectArgs) -> Result<()> {
    let x = args.input.load()?;
    let cfg = args.config.pipeline();
    let step = if_step(&x, &cfg)?;
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "n": x.nrows(),
        "p": x.ncols(),
        "null_table": step.scores.null_table_id,
        "pvalue_mode": step.scores.mode,
        "hc_variant": cfg.hc_variant,
        "efron_mu": step.scores.mu_star,
        "efron_sigma": step.scores.sigma_star,
        "dropped_features": step.normalized.dropped_features,
    });
    match args.top_m {
        Some(m) => {
            let top = top_m_select(&step.scores.standardized, m)?;
            let idx: Vec<usize> = top.indices.iter().map(|&c| step.normalized.retained[c]).collect();
            out["rule"] = json!("top_m");
            out["retained_count"] = json!(idx.len());
            out["retained"] = json!(idx);
        }
        None => {
            out["rule"] = json!("hct");
            out["threshold"] = json!(step.selection.threshold);
            out["hc_rank"] = json!(step.selection.j_hat);
            out["fallback_used"] = json!(step.selection.fallback_used);
            out["retained_count"] = json!(step.retained.len());
            out["retained"] = json!(step.retained.indices);
        }
    }
    if let Some(path) = &args.scores_out {
        let ids = x.feature_ids();
        write_atomic(path, |w| {
            writeln!(w, "feature,column,ks_score,standardized,pvalue")?;
            for (c, &j) in step.normalized.retained.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    ids[j], j, step.scores.raw_scores[c], step.scores.standardized[c], step.scores.pvalues[c]
                )?;
            }
            Ok(())
        })?;
    }
    emit_json(args.out.as_deref(), &out)
}

fn leaderboard(args: LeaderboardArgs) -> Result<()> {
    let table = ErrorTable::load(&args.errors)?;
    let report = regret_and_rank(&table)?;
    match args.format {
        FormatArg::Csv => {
            let mut buf = Vec::new();
            report.write_footer(&mut buf)?;
            emit(args.out.as_deref(), &String::from_utf8(buf).context("footer is not UTF-8")?)
        }
        FormatArg::Json => {
            let mut v = serde_json::to_value(&report)?;
            v["schema_version"] = json!(SCHEMA_VERSION);
            emit_json(args.out.as_deref(), &v)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Cluster(a) => cluster(a),
        Command::Sweep(a) => sweep(a),
        Command::Simulate(a) => simulate(a),
        Command::Phase(a) => phase(a),
        Command::NullTable(a) => null_table_cmd(a),
        Command::Select(a) => select(a),
        Command::Leaderboard(a) => leaderboard(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
