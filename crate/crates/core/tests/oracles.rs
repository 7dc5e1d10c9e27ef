//! Independent oracles and Monte Carlo checks for the worked examples.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use ifpca_core::data::{DataMatrix, LabelVector};
use ifpca_core::metrics::{ari, clustering_error};
use ifpca_core::pipelines::{run_method, simplified_pca, Method, MethodSpec, PipelineConfig};
use ifpca_core::rareweak::{
    alpha_star, critical_tau, generate_instance, hamming_error, labels_to_signs, leading_vector_noiseless, run_phase_grid,
    PhaseGridSpec, PhaseMethod, RareWeakConfig,
};
use ifpca_core::rng::{derive_seed, job_rng};
use ifpca_core::scoring::NullSettings;
use ifpca_core::selection::{hct, HcVariant};
use ifpca_core::spectral::KmeansConfig;
use ifpca_core::vae::{encode, train_vae, VaeHyper};

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Pair counting over all `n choose 2` pairs.
fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let total = both + only_a + only_b + neither;
    let expected = (both + only_a) * (both + only_b) / total;
    let max = 0.5 * ((both + only_a) + (both + only_b));
    (both - expected) / (max - expected)
}

#[test]
fn ari_matches_pair_enumeration() {
    let y = [1, 1, 1, 2, 2, 2];
    let y_hat = [1, 1, 2, 2, 2, 2];
    assert!((ari(&y_hat, &y).unwrap() - ari_by_pairs(&y_hat, &y)).abs() < 1e-12);
    let mut rng = job_rng(1);
    for _ in 0..200 {
        let n = rng.random_range(4..30);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
        let oracle = ari_by_pairs(&a, &b);
        if oracle.is_finite() {
            assert!((ari(&a, &b).unwrap() - oracle).abs() < 1e-10);
        }
    }
}

#[test]
fn accuracy_agrees_with_hamming_for_two_classes() {
    let mut rng = job_rng(2);
    for _ in 0..300 {
        let n = rng.random_range(2..50);
        let y: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let y_hat: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let to_labels = |v: &[i8]| v.iter().map(|&s| if s == 1 { 1 } else { 2 }).collect::<Vec<usize>>();
        let acc = clustering_error(&to_labels(&y_hat), &to_labels(&y), 2).unwrap().accuracy;
        assert!((acc - (1.0 - hamming_error(&y_hat, &y).unwrap())).abs() < 1e-12);
    }
}

#[test]
fn critical_tau_exponent_is_alpha_star() {
    let p = 1e6;
    let mut rng = job_rng(3);
    let mut checked = 0;
    while checked < 20 {
        let theta = rng.random_range(0.05..0.95);
        let beta = rng.random_range(0.05..0.95);
        let (Ok(t), Ok(a)) = (critical_tau(p, theta, beta), alpha_star(beta, theta)) else {
            continue;
        };
        assert!((t.ln() / p.ln() + a).abs() < 1e-12, "theta {theta} beta {beta}");
        checked += 1;
    }
}

#[test]
fn support_size_and_sign_balance() {
    let (p, beta) = (2000, 0.5);
    let eps = (p as f64).powf(-beta);
    let mut sizes = Vec::new();
    let (mut pos, mut nonzero) = (0usize, 0usize);
    for seed in 0..200 {
        let c = RareWeakConfig {
            n: Some(4),
            ..RareWeakConfig::new(p, 0.6, beta, 0.2, derive_seed(44, seed))
        };
        let inst = generate_instance(&c).unwrap();
        sizes.push(inst.support.len() as f64);
        pos += inst.mu.iter().filter(|&&m| m > 0.0).count();
        nonzero += inst.support.len();
    }
    let mean = sizes.iter().sum::<f64>() / 200.0;
    let se = (p as f64 * eps * (1.0 - eps) / 200.0).sqrt();
    assert!((mean - p as f64 * eps).abs() < 4.0 * se, "mean {mean}");
    let frac = pos as f64 / nonzero as f64;
    assert!((frac - 0.5).abs() < 4.0 * (0.25 / nonzero as f64).sqrt(), "positive fraction {frac}");
}

#[test]
fn noiseless_leading_vector_discrepancy_vanishes() {
    assert!(leading_vector_noiseless(400, 2000, 10.0, 5).unwrap() < 1e-10);
}

#[test]
fn hct_retains_about_the_planted_block() {
    let mut printed = Vec::new();
    for seed in 0..20 {
        let mut rng = job_rng(derive_seed(55, seed));
        let mut pv: Vec<f64> = (0..9900).map(|_| rng.random::<f64>()).collect();
        pv.extend((0..100).map(|_| 1e-8 * rng.random::<f64>()));
        let binomial = hct(&pv, 200, HcVariant::Binomial).unwrap().retained.len();
        assert!((50..=300).contains(&binomial), "binomial variant retained {binomial}");
        printed.push(hct(&pv, 200, HcVariant::AsPrinted).unwrap().retained.len());
    }
    // The sqrt(n) term flattens the printed curve past the block, so single seeds can overshoot.
    printed.sort_unstable();
    let median = printed[10];
    assert!((50..=300).contains(&median), "{printed:?}");
}

fn fast_config() -> PipelineConfig {
    PipelineConfig {
        null: NullSettings {
            replicates: 20_000,
            cache_dir: None,
            ..NullSettings::default()
        },
        kmeans: KmeansConfig {
            restarts: 10,
            max_iter: 100,
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn pure_noise_is_a_coin_flip() {
    let cfg = fast_config();
    let mut rates = 0.0;
    for seed in 0..50 {
        let mut rng = job_rng(derive_seed(66, seed));
        let x = DataMatrix::new(DMatrix::from_fn(100, 30, |_, _| gauss(&mut rng))).unwrap();
        let y = LabelVector::from_labels((0..100).map(|i| 1 + i % 2).collect()).unwrap();
        let spec = MethodSpec {
            repeats: 1,
            ..MethodSpec::new(Method::Pca, 2, seed)
        };
        rates += run_method(&x, &spec, &cfg, Some(&y)).unwrap().mean_error_rate().unwrap();
    }
    let mean = rates / 50.0;
    assert!((mean - 0.5).abs() < 0.12, "mean error {mean}");
}

/// `N ||mu||^2 / (N + 2 sqrt(N m)) = 10` with `N = 200`, `m = 1000`.
#[test]
fn strong_signal_pca_recovers_classes() {
    let (n, p) = (200, 1000);
    let mu_sq = 10.0 * (n as f64 + 2.0 * ((n * p) as f64).sqrt()) / n as f64;
    let c = RareWeakConfig {
        n: Some(n),
        epsilon: Some(0.999_999),
        tau: Some((mu_sq / p as f64).sqrt()),
        ..RareWeakConfig::new(p, 0.6, 0.1, 0.1, 8)
    };
    let inst = generate_instance(&c).unwrap();
    let spca = simplified_pca(&inst.x).unwrap();
    assert!(hamming_error(&labels_to_signs(&spca.assignment.labels), &inst.y).unwrap() < 0.05);
    let x = DataMatrix::new(inst.x.clone()).unwrap();
    let r = run_method(&x, &MethodSpec::new(Method::Pca, 2, 1), &fast_config(), None).unwrap();
    assert!(hamming_error(&labels_to_signs(&r.assignment.labels), &inst.y).unwrap() < 0.05);
}

fn planted(n: usize, p: usize, strong: usize, gap: f64, seed: u64) -> (DataMatrix, LabelVector) {
    let mut rng = job_rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| 1 + i % 2).collect();
    let x = DMatrix::from_fn(n, p, |i, j| {
        let shift = if j < strong && labels[i] == 2 { gap } else { 0.0 };
        gauss(&mut rng) + shift
    });
    (DataMatrix::new(x).unwrap(), LabelVector::from_labels(labels).unwrap())
}

#[test]
fn if_pca_recovers_a_planted_block() {
    let cfg = PipelineConfig::default();
    for seed in 0..20 {
        let (x, y) = planted(200, 10_000, 100, 4.0, derive_seed(77, seed));
        let spec = MethodSpec {
            repeats: 1,
            ..MethodSpec::new(Method::IfPca, 2, seed)
        };
        let r = run_method(&x, &spec, &cfg, Some(&y)).unwrap();
        assert!(r.per_repeat_errors.unwrap()[0] <= 2, "seed {seed}");
    }
}

#[test]
fn vae_methods_separate_clear_clusters() {
    let (x, y) = planted(100, 40, 20, 3.0, 9);
    let cfg = PipelineConfig {
        vae: VaeHyper {
            epochs: 60,
            batches: 10,
            learning_rate: 0.01,
            hidden: 32,
            latent_dim: 5,
            seed: 0,
        },
        ..fast_config()
    };
    for m in [Method::IfVae, Method::Vae] {
        let spec = MethodSpec {
            repeats: 5,
            ..MethodSpec::new(m, 2, 3)
        };
        let r = run_method(&x, &spec, &cfg, Some(&y)).unwrap();
        let rate = r.mean_error_rate().unwrap();
        assert!(rate < 0.1, "{m}: mean error {rate}");
    }
    let trained = train_vae(x.values(), &cfg.vae).unwrap();
    let z = encode(&trained.params, x.values()).unwrap();
    assert_eq!(z.means.shape(), (100, 5));
}

#[test]
fn phase_columns_degrade_as_alpha_grows() {
    let spec = PhaseGridSpec {
        p: 2000,
        theta: 0.6,
        beta_grid: vec![0.3],
        alpha_grid: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.35, 0.45],
        methods: vec![PhaseMethod::SimplifiedPca],
        reps: 30,
        base_seed: 12,
    };
    let cells = run_phase_grid(&spec, &PipelineConfig::default()).unwrap();
    let inversions = cells.windows(2).filter(|w| w[1].hamming_mean < w[0].hamming_mean).count();
    assert!(inversions <= 1, "{:?}", cells.iter().map(|c| c.hamming_mean).collect::<Vec<_>>());
    assert!(cells[0].hamming_mean < 0.1 && cells.last().unwrap().hamming_mean > 0.35);
}
