//! A one-hidden-layer variational autoencoder trained by plain mini-batch SGD.
//!
//! Encoder: `x -> relu(W1 x + b1) -> (mean, log_var)`.
//! Decoder: `z -> relu(W3 z + b3) -> sigmoid(W4 h + b4)`.
//! Loss per row: Bernoulli cross-entropy of the reconstruction plus
//! `KL(N(mean, exp(log_var)) || N(0, I))`, averaged over the batch.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::rng::{job_rng, JobRng};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeHyper {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// Mini-batches per epoch.
    pub batches: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VaeHyper {
    fn default() -> Self {
        Self {
            latent_dim: 25,
            hidden: 128,
            epochs: 100,
            batches: 50,
            learning_rate: 0.0005,
            seed: 0,
        }
    }
}

impl VaeHyper {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.epochs == 0 || self.batches == 0 {
            return Err(Error::InvalidArgument("VAE sizes and counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} outside (0, 1)",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Affine layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut JobRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::zeros(fan_out),
        }
    }

    /// Rows of `x` are inputs.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weight.transpose();
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    fn sgd(&mut self, grad: &Linear, lr: f64) {
        self.weight -= &grad.weight * lr;
        self.bias.axpy(-lr, &grad.bias, 1.0);
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    /// Gradient block from upstream `delta` (rows = batch) and layer input `x`.
    fn grad(delta: &DMatrix<f64>, x: &DMatrix<f64>) -> Self {
        Self {
            weight: delta.transpose() * x,
            bias: delta.row_sum().transpose(),
        }
    }
}

/// The five affine blocks; also used to hold gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeWeights {
    pub enc_hidden: Linear,
    pub enc_mean: Linear,
    pub enc_logvar: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
}

impl VaeWeights {
    pub fn blocks(&self) -> [(&'static str, &Linear); 5] {
        [
            ("enc_hidden", &self.enc_hidden),
            ("enc_mean", &self.enc_mean),
            ("enc_logvar", &self.enc_logvar),
            ("dec_hidden", &self.dec_hidden),
            ("dec_out", &self.dec_out),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Linear); 5] {
        [
            ("enc_hidden", &mut self.enc_hidden),
            ("enc_mean", &mut self.enc_mean),
            ("enc_logvar", &mut self.enc_logvar),
            ("dec_hidden", &mut self.dec_hidden),
            ("dec_out", &mut self.dec_out),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.enc_hidden.weight.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_mean.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub weights: VaeWeights,
    /// Per-feature `(min, max)` used to map inputs into `[0, 1]`.
    pub input_scaling: Vec<(f64, f64)>,
}

pub fn init_vae(p_in: usize, hyper: &VaeHyper) -> Result<VaeParams> {
    if p_in == 0 {
        return Err(Error::InvalidArgument("VAE input width must be positive".into()));
    }
    hyper.validate()?;
    let mut rng = job_rng(hyper.seed);
    let (h, d) = (hyper.hidden, hyper.latent_dim);
    let weights = VaeWeights {
        enc_hidden: Linear::init(p_in, h, &mut rng),
        enc_mean: Linear::init(h, d, &mut rng),
        enc_logvar: Linear::init(h, d, &mut rng),
        dec_hidden: Linear::init(d, h, &mut rng),
        dec_out: Linear::init(h, p_in, &mut rng),
    };
    Ok(VaeParams {
        weights,
        input_scaling: vec![(0.0, 1.0); p_in],
    })
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn relu_mask(pre: &DMatrix<f64>, upstream: DMatrix<f64>) -> DMatrix<f64> {
    upstream.zip_map(pre, |g, a| if a > 0.0 { g } else { 0.0 })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss pieces averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

struct EncoderPass {
    pre_hidden: DMatrix<f64>,
    hidden: DMatrix<f64>,
    mean: DMatrix<f64>,
    log_var: DMatrix<f64>,
}

fn encode_pass(w: &VaeWeights, batch: &DMatrix<f64>) -> EncoderPass {
    let pre_hidden = w.enc_hidden.forward(batch);
    let hidden = relu(&pre_hidden);
    let mean = w.enc_mean.forward(&hidden);
    let log_var = w.enc_logvar.forward(&hidden);
    EncoderPass {
        pre_hidden,
        hidden,
        mean,
        log_var,
    }
}

/// Loss and exact gradients for one batch (rows in `[0, 1]`) and a fixed noise draw.
pub fn elbo_and_gradients(
    weights: &VaeWeights,
    batch: &DMatrix<f64>,
    noise: &DMatrix<f64>,
) -> Result<(LossParts, VaeWeights)> {
    let b = batch.nrows();
    if b == 0 || batch.ncols() != weights.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch {}x{} for a VAE with input width {}",
            b,
            batch.ncols(),
            weights.input_dim()
        )));
    }
    if noise.shape() != (b, weights.latent_dim()) {
        return Err(Error::DimensionMismatch("noise must be batch x latent".into()));
    }
    let inv_b = 1.0 / b as f64;
    let enc = encode_pass(weights, batch);
    let std = enc.log_var.map(|l| (0.5 * l).exp());
    let z = &enc.mean + std.component_mul(noise);
    let pre_dec = weights.dec_hidden.forward(&z);
    let dec_hidden = relu(&pre_dec);
    let logits = weights.dec_out.forward(&dec_hidden);

    let reconstruction: f64 = logits
        .iter()
        .zip(batch.iter())
        .map(|(&o, &x)| softplus(o) - x * o)
        .sum::<f64>()
        * inv_b;
    let kl: f64 = enc
        .mean
        .iter()
        .zip(enc.log_var.iter())
        .map(|(&m, &l)| -0.5 * (1.0 + l - m * m - l.exp()))
        .sum::<f64>()
        * inv_b;
    let total = reconstruction + kl;
    if !total.is_finite() {
        return Err(Error::NonFinite("VAE loss".into()));
    }

    let d_logits = logits.zip_map(batch, |o, x| (sigmoid(o) - x) * inv_b);
    let g_dec_out = Linear::grad(&d_logits, &dec_hidden);
    let d_pre_dec = relu_mask(&pre_dec, &d_logits * &weights.dec_out.weight);
    let g_dec_hidden = Linear::grad(&d_pre_dec, &z);
    let d_z = &d_pre_dec * &weights.dec_hidden.weight;

    let d_mean = &d_z + &enc.mean * inv_b;
    let mut d_logvar = d_z.component_mul(noise).component_mul(&std) * 0.5;
    d_logvar += enc.log_var.map(|l| 0.5 * (l.exp() - 1.0) * inv_b);

    let g_enc_mean = Linear::grad(&d_mean, &enc.hidden);
    let g_enc_logvar = Linear::grad(&d_logvar, &enc.hidden);
    let d_hidden = &d_mean * &weights.enc_mean.weight + &d_logvar * &weights.enc_logvar.weight;
    let d_pre_hidden = relu_mask(&enc.pre_hidden, d_hidden);
    let g_enc_hidden = Linear::grad(&d_pre_hidden, batch);

    Ok((
        LossParts {
            total,
            reconstruction,
            kl,
        },
        VaeWeights {
            enc_hidden: g_enc_hidden,
            enc_mean: g_enc_mean,
            enc_logvar: g_enc_logvar,
            dec_hidden: g_dec_hidden,
            dec_out: g_dec_out,
        },
    ))
}

/// Per-feature `(min, max)`.
pub fn fit_min_max(data: &DMatrix<f64>) -> Vec<(f64, f64)> {
    data.column_iter()
        .map(|c| (c.min(), c.max()))
        .collect()
}

/// Map each feature into `[0, 1]`; constant features become 0.5.
pub fn apply_min_max(data: &DMatrix<f64>, scaling: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    if data.ncols() != scaling.len() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} features, scaling has {}",
            data.ncols(),
            scaling.len()
        )));
    }
    let mut out = data.clone();
    for (mut col, &(lo, hi)) in out.column_iter_mut().zip(scaling) {
        let span = hi - lo;
        if span > 0.0 {
            col.apply(|v| *v = (*v - lo) / span);
        } else {
            col.fill(0.5);
        }
    }
    Ok(out)
}

/// Split `0..n` (already shuffled) into `batches` contiguous chunks whose sizes differ by at most one.
pub fn partition_batches(order: &[usize], batches: usize) -> Vec<&[usize]> {
    let n = order.len();
    let base = n / batches;
    let extra = n % batches;
    let mut out = Vec::with_capacity(batches);
    let mut start = 0;
    for i in 0..batches {
        let len = base + usize::from(i < extra);
        out.push(&order[start..start + len]);
        start += len;
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub params: VaeParams,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

fn standard_normal(rows: usize, cols: usize, rng: &mut JobRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Min-max scale the data, then run `epochs x batches` SGD steps.
pub fn train_vae(data: &DMatrix<f64>, hyper: &VaeHyper) -> Result<TrainedVae> {
    hyper.validate()?;
    let n = data.nrows();
    if n < hyper.batches {
        return Err(Error::InvalidArgument(format!(
            "{n} rows cannot fill {} batches",
            hyper.batches
        )));
    }
    let scaling = fit_min_max(data);
    let scaled = apply_min_max(data, &scaling)?;
    let mut params = init_vae(data.ncols(), hyper)?;
    params.input_scaling = scaling;
    // Separate stream from initialization.
    let mut rng = job_rng(crate::rng::derive_seed(hyper.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, idx) in partition_batches(&order, hyper.batches).into_iter().enumerate() {
            let batch = scaled.select_rows(idx);
            let noise = standard_normal(idx.len(), hyper.latent_dim, &mut rng);
            let (loss, grad) = match elbo_and_gradients(&params.weights, &batch, &noise) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        trace,
                    })
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss.total;
            for ((_, p), (_, g)) in params.weights.blocks_mut().into_iter().zip(grad.blocks()) {
                p.sgd(g, hyper.learning_rate);
            }
            if !params.weights.blocks().iter().all(|(_, l)| l.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    trace,
                });
            }
        }
        trace.push(epoch_loss / hyper.batches as f64);
    }
    Ok(TrainedVae {
        params,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding {
    pub means: DMatrix<f64>,
    pub log_vars: DMatrix<f64>,
}

/// Posterior means and log-variances for each row; no sampling.
pub fn encode(params: &VaeParams, data: &DMatrix<f64>) -> Result<LatentEmbedding> {
    if data.ncols() != params.weights.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} features, VAE expects {}",
            data.ncols(),
            params.weights.input_dim()
        )));
    }
    let scaled = apply_min_max(data, &params.input_scaling)?;
    let enc = encode_pass(&params.weights, &scaled);
    Ok(LatentEmbedding {
        means: enc.mean,
        log_vars: enc.log_var,
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: VaeParams,
}

/// Versioned JSON checkpoint.
pub fn save_checkpoint(params: &VaeParams, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    write_atomic(path, |w| serde_json::to_writer(w, &ck).map_err(std::io::Error::other))
}

pub fn load_checkpoint(path: &Path) -> Result<VaeParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.into(),
            message: format!("checkpoint version {} is not {CHECKPOINT_VERSION}", ck.version),
        });
    }
    Ok(ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper(seed: u64) -> VaeHyper {
        VaeHyper {
            latent_dim: 2,
            hidden: 5,
            epochs: 3,
            batches: 2,
            learning_rate: 0.01,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_vae(7, &small_hyper(3)).unwrap();
        let b = init_vae(7, &small_hyper(3)).unwrap();
        assert_eq!(a, b);
        for (_, l) in a.weights.blocks() {
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
        assert_ne!(a, init_vae(7, &small_hyper(4)).unwrap());
    }

    #[test]
    fn init_spread_matches_fan_in() {
        let hyper = VaeHyper {
            hidden: 100,
            ..small_hyper(1)
        };
        let p = init_vae(100, &hyper).unwrap();
        let w = &p.weights.enc_hidden.weight;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = 1.0 / (3.0 * 100.0_f64).sqrt();
        assert!((sd / target - 1.0).abs() < 0.2, "sd {sd} target {target}");
    }

    #[test]
    fn kl_vanishes_at_standard_normal_heads() {
        let mut p = init_vae(4, &small_hyper(2)).unwrap();
        p.weights.enc_mean.weight.fill(0.0);
        p.weights.enc_logvar.weight.fill(0.0);
        let batch = DMatrix::from_fn(3, 4, |i, j| ((i + j) % 3) as f64 / 2.0);
        let noise = DMatrix::from_element(3, 2, 0.3);
        let (loss, _) = elbo_and_gradients(&p.weights, &batch, &noise).unwrap();
        assert_eq!(loss.kl, 0.0);
        assert!(loss.reconstruction >= 0.0);
    }

    #[test]
    fn duplicated_rows_leave_mean_loss_unchanged() {
        let p = init_vae(4, &small_hyper(5)).unwrap();
        let batch = DMatrix::from_fn(3, 4, |i, j| ((i * 3 + j) % 5) as f64 / 4.0);
        let noise = DMatrix::from_fn(3, 2, |i, j| (i as f64 - j as f64) * 0.4);
        let (single, _) = elbo_and_gradients(&p.weights, &batch, &noise).unwrap();
        let idx = [0, 1, 2, 0, 1, 2];
        let (double, _) =
            elbo_and_gradients(&p.weights, &batch.select_rows(&idx), &noise.select_rows(&idx)).unwrap();
        assert!((single.total - double.total).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_rows_once() {
        let order: Vec<usize> = (0..23).rev().collect();
        let parts = partition_batches(&order, 5);
        assert_eq!(parts.len(), 5);
        let mut seen: Vec<usize> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| p.len() == 4 || p.len() == 5));
        let singles: Vec<usize> = (0..4).collect();
        assert!(partition_batches(&singles, 4).iter().all(|p| p.len() == 1));
    }

    #[test]
    fn min_max_handles_constant_features() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 3.0, 4.0, 2.0, 4.0]);
        let s = apply_min_max(&d, &fit_min_max(&d)).unwrap();
        assert_eq!(s.column(0).as_slice(), &[0.0, 1.0, 0.5]);
        assert_eq!(s.column(1).as_slice(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn training_is_deterministic_and_checks_sizes() {
        let data = DMatrix::from_fn(6, 3, |i, j| (i * j) as f64 + 0.1 * i as f64);
        let a = train_vae(&data, &small_hyper(8)).unwrap();
        let b = train_vae(&data, &small_hyper(8)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace.len(), 3);
        let too_many = VaeHyper {
            batches: 7,
            ..small_hyper(8)
        };
        assert!(train_vae(&data, &too_many).is_err());
        let one_row_batches = VaeHyper {
            batches: 6,
            ..small_hyper(8)
        };
        assert!(train_vae(&data, &one_row_batches).is_ok());
    }

    #[test]
    fn encode_shapes_and_row_equivariance() {
        let data = DMatrix::from_fn(6, 3, |i, j| ((i + 2 * j) % 4) as f64);
        let t = train_vae(&data, &small_hyper(1)).unwrap();
        let z = encode(&t.params, &data).unwrap();
        assert_eq!(z.means.shape(), (6, 2));
        let perm = [5, 0, 3, 1, 4, 2];
        let zp = encode(&t.params, &data.select_rows(&perm)).unwrap();
        assert_eq!(zp.means, z.means.select_rows(&perm));
        assert!(encode(&t.params, &DMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_vae(3, &small_hyper(2)).unwrap();
        let path = dir.path().join("vae.json");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
