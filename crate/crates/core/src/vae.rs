//! Variational autoencoder over flattened grayscale patches.
//!
//! ```text
//! x (P·P) ─tanh─▶ h (H) ─┬─▶ mu (D)
//!                        └─▶ logvar (D), clamped to [-10, 10]
//! z = mu + exp(logvar / 2) ⊙ ε
//! z (D) ─tanh─▶ g (H) ─sigmoid─▶ x̂ (P·P)
//! ```
//!
//! The loss is summed per-pixel binary cross-entropy plus `beta` times the
//! closed-form KL divergence to N(0, I). Gradients are derived by hand and
//! checked against central finite differences by [`gradient_check`].

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Patch;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"VAE1";

/// Layer widths: patch side `P` (input is `P·P`), hidden width `H`, latent
/// dimension `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeShape {
    pub patch_size: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl VaeShape {
    pub fn new(patch_size: usize, hidden: usize, latent: usize) -> Self {
        Self {
            patch_size,
            hidden,
            latent,
        }
    }

    pub fn input(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Encoder and decoder weights. Matrices are row-major with one row per
/// output unit.
///
/// Block order (also the checkpoint order): encoder hidden weights `H×N`
/// and bias `H`, mean head `D×H` and `D`, log-variance head `D×H` and `D`,
/// decoder hidden `H×D` and `H`, decoder output `N×H` and `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub shape: VaeShape,
    /// KL weight the parameters were trained with. Informational.
    pub beta: f64,
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub mu_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub logvar_w: Vec<f64>,
    pub logvar_b: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl VaeParams {
    pub fn zeros(shape: VaeShape) -> Self {
        let (n, h, d) = (shape.input(), shape.hidden, shape.latent);
        Self {
            shape,
            beta: 0.0,
            enc_w: vec![0.0; h * n],
            enc_b: vec![0.0; h],
            mu_w: vec![0.0; d * h],
            mu_b: vec![0.0; d],
            logvar_w: vec![0.0; d * h],
            logvar_b: vec![0.0; d],
            dec_w: vec![0.0; h * d],
            dec_b: vec![0.0; h],
            out_w: vec![0.0; n * h],
            out_b: vec![0.0; n],
        }
    }

    /// Every weight and bias drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn init<R: Rng>(shape: VaeShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let fan_ins = p.fan_ins();
        for (block, fan_in) in p.blocks_mut().into_iter().zip(fan_ins) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in block.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    fn fan_ins(&self) -> [usize; 10] {
        let (n, h, d) = (self.shape.input(), self.shape.hidden, self.shape.latent);
        [n, n, h, h, h, h, d, d, h, h]
    }

    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            &self.enc_w,
            &self.enc_b,
            &self.mu_w,
            &self.mu_b,
            &self.logvar_w,
            &self.logvar_b,
            &self.dec_w,
            &self.dec_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.logvar_w,
            &mut self.logvar_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (bi, b) in self.blocks().iter().enumerate() {
            if index < b.len() {
                return (bi, index);
            }
            index -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Reads a parameter by its position in the flattened block order.
    pub fn get(&self, index: usize) -> f64 {
        let (b, i) = self.locate(index);
        self.blocks()[b][i]
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let (b, i) = self.locate(index);
        self.blocks_mut()[b][i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Writes the checkpoint: `VAE1`, little-endian `u32` P, H, D, the `f64`
    /// beta, then every parameter block as little-endian `f64` in block
    /// order.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for dim in [self.shape.patch_size, self.shape.hidden, self.shape.latent] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.beta.to_le_bytes())?;
        for block in self.blocks() {
            for v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let truncated = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
            _ => Error::Io(e),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf).map_err(truncated)?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Checkpoint(format!("zero dimension in {dims:?}")));
        }
        let mut params = Self::zeros(VaeShape::new(dims[0], dims[1], dims[2]));
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(truncated)?;
        params.beta = f64::from_le_bytes(buf);
        for block in params.blocks_mut() {
            for v in block.iter_mut() {
                r.read_exact(&mut buf).map_err(truncated)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.param_count());
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

/// Parameters of the diagonal Gaussian posterior for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// KL coefficient.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 10,
            rng_seed: 0,
            hidden: 256,
            latent: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::InvalidConfig(
                "batch size and layer widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^a)` without overflow.
#[inline]
fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// `w · x + b` for a row-major `rows × x.len()` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .zip(w.chunks_exact(cols))
        .map(|(bias, row)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Accumulates `wᵀ · delta` into `out`.
fn affine_transpose_into(w: &[f64], delta: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (d, row) in delta.iter().zip(w.chunks_exact(cols)) {
        if *d != 0.0 {
            for (o, wv) in out.iter_mut().zip(row) {
                *o += d * wv;
            }
        }
    }
}

/// Adds the outer product `delta ⊗ input` to a weight gradient and `delta`
/// to the bias gradient.
fn accumulate_outer(gw: &mut [f64], gb: &mut [f64], delta: &[f64], input: &[f64]) {
    let cols = input.len();
    for ((d, row), b) in delta.iter().zip(gw.chunks_exact_mut(cols)).zip(gb.iter_mut()) {
        *b += d;
        if *d != 0.0 {
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// Encodes a flattened patch.
pub fn encode(params: &VaeParams, x: &[f64]) -> Result<EncoderOutput> {
    check_len(params.shape.input(), x.len())?;
    let hidden: Vec<f64> = affine(&params.enc_w, &params.enc_b, x).into_iter().map(f64::tanh).collect();
    Ok(EncoderOutput {
        mu: affine(&params.mu_w, &params.mu_b, &hidden),
        logvar: affine(&params.logvar_w, &params.logvar_b, &hidden)
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect(),
    })
}

pub fn encode_patch(params: &VaeParams, patch: &Patch) -> Result<EncoderOutput> {
    check_len(params.shape.patch_size, patch.size)?;
    encode(params, &patch.pixels)
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(out: &EncoderOutput, noise: &[f64]) -> Result<Vec<f64>> {
    check_len(out.mu.len(), noise.len())?;
    Ok(out
        .mu
        .iter()
        .zip(&out.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

fn decode_logits(params: &VaeParams, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(params.shape.latent, z.len())?;
    let g: Vec<f64> = affine(&params.dec_w, &params.dec_b, z).into_iter().map(f64::tanh).collect();
    let logits = affine(&params.out_w, &params.out_b, &g);
    Ok((g, logits))
}

/// Decodes a latent into a flattened `P·P` reconstruction in `(0, 1)`.
pub fn decode(params: &VaeParams, z: &[f64]) -> Result<Vec<f64>> {
    let (_, logits) = decode_logits(params, z)?;
    Ok(logits.into_iter().map(sigmoid).collect())
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent dimensions.
pub fn kl_divergence(out: &EncoderOutput) -> f64 {
    let sum: f64 = out
        .mu
        .iter()
        .zip(&out.logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum();
    // Each summand is <= 0 analytically; rounding can leave a tiny positive total.
    (-0.5 * sum).max(0.0)
}

/// Summed binary cross-entropy. Reconstructions are clamped away from 0 and 1
/// so the logarithms stay finite.
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_len(x.len(), x_hat.len())?;
    const EPS: f64 = 1e-12;
    Ok(x.iter()
        .zip(x_hat)
        .map(|(t, p)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum())
}

/// Negative weighted ELBO: `recon(x, x̂) + beta · KL`.
pub fn elbo_loss(x: &[f64], x_hat: &[f64], out: &EncoderOutput, beta: f64) -> Result<f64> {
    Ok(reconstruction_loss(x, x_hat)? + beta * kl_divergence(out))
}

/// Loss for one sample with fixed noise, computed from logits. Adds the
/// gradient into `grad` when given.
fn sample_loss(params: &VaeParams, x: &[f64], noise: &[f64], beta: f64, grad: Option<&mut VaeParams>) -> f64 {
    let pre_h = affine(&params.enc_w, &params.enc_b, x);
    let h: Vec<f64> = pre_h.iter().map(|v| v.tanh()).collect();
    let mu = affine(&params.mu_w, &params.mu_b, &h);
    let raw_lv = affine(&params.logvar_w, &params.logvar_b, &h);
    let lv: Vec<f64> = raw_lv.iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
    let std: Vec<f64> = lv.iter().map(|v| (0.5 * v).exp()).collect();
    let z: Vec<f64> = mu.iter().zip(&std).zip(noise).map(|((m, s), e)| m + s * e).collect();
    let g: Vec<f64> = affine(&params.dec_w, &params.dec_b, &z).into_iter().map(f64::tanh).collect();
    let logits = affine(&params.out_w, &params.out_b, &g);

    // BCE(x, sigmoid(a)) = softplus(a) - x·a
    let recon: f64 = logits.iter().zip(x).map(|(a, t)| softplus(*a) - t * a).sum();
    let kl = kl_divergence(&EncoderOutput {
        mu: mu.clone(),
        logvar: lv.clone(),
    });
    let loss = recon + beta * kl;

    let Some(grad) = grad else { return loss };
    let (n, hdim) = (params.shape.input(), params.shape.hidden);

    let d_logits: Vec<f64> = logits.iter().zip(x).map(|(a, t)| sigmoid(*a) - t).collect();
    accumulate_outer(&mut grad.out_w, &mut grad.out_b, &d_logits, &g);

    let mut d_g = vec![0.0; hdim];
    affine_transpose_into(&params.out_w, &d_logits, &mut d_g);
    let d_pre_g: Vec<f64> = d_g.iter().zip(&g).map(|(d, gv)| d * (1.0 - gv * gv)).collect();
    accumulate_outer(&mut grad.dec_w, &mut grad.dec_b, &d_pre_g, &z);

    let mut d_z = vec![0.0; params.shape.latent];
    affine_transpose_into(&params.dec_w, &d_pre_g, &mut d_z);

    let d_mu: Vec<f64> = d_z.iter().zip(&mu).map(|(dz, m)| dz + beta * m).collect();
    let d_lv: Vec<f64> = (0..params.shape.latent)
        .map(|k| {
            if raw_lv[k] < LOGVAR_MIN || raw_lv[k] > LOGVAR_MAX {
                0.0
            } else {
                d_z[k] * noise[k] * 0.5 * std[k] + beta * 0.5 * (lv[k].exp() - 1.0)
            }
        })
        .collect();
    accumulate_outer(&mut grad.mu_w, &mut grad.mu_b, &d_mu, &h);
    accumulate_outer(&mut grad.logvar_w, &mut grad.logvar_b, &d_lv, &h);

    let mut d_h = vec![0.0; hdim];
    affine_transpose_into(&params.mu_w, &d_mu, &mut d_h);
    affine_transpose_into(&params.logvar_w, &d_lv, &mut d_h);
    let d_pre_h: Vec<f64> = d_h.iter().zip(&h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
    debug_assert_eq!(x.len(), n);
    accumulate_outer(&mut grad.enc_w, &mut grad.enc_b, &d_pre_h, x);

    loss
}

/// Loss and its gradient for a single sample with the noise held fixed.
pub fn loss_and_gradient(params: &VaeParams, x: &[f64], noise: &[f64], beta: f64) -> Result<(f64, VaeParams)> {
    check_len(params.shape.input(), x.len())?;
    check_len(params.shape.latent, noise.len())?;
    let mut grad = VaeParams::zeros(params.shape);
    let loss = sample_loss(params, x, noise, beta, Some(&mut grad));
    Ok((loss, grad))
}

/// Trained parameters and the mean per-patch loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: VaeParams,
    pub loss_trace: Vec<f64>,
}

/// Mini-batch SGD on the weighted ELBO. Initialization, shuffling and noise
/// all come from one ChaCha stream seeded with `cfg.rng_seed`, so a run is
/// bit-reproducible.
pub fn train(cfg: &TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = patches.first().ok_or(Error::EmptyDataset)?;
    let shape = VaeShape::new(first.size, cfg.hidden, cfg.latent);
    for p in patches {
        check_len(shape.patch_size, p.size)?;
        check_len(shape.input(), p.pixels.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = VaeParams::init(shape, &mut rng);
    params.beta = cfg.beta;

    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut grad = VaeParams::zeros(shape);
    let mut noise = vec![0.0; shape.latent];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill_zero();
            let mut batch_loss = 0.0;
            for &idx in batch {
                noise.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
                batch_loss += sample_loss(&params, &patches[idx].pixels, &noise, cfg.beta, Some(&mut grad));
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += batch_loss;
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in params.blocks_mut().into_iter().zip(grad.blocks()) {
                p.iter_mut().zip(g).for_each(|(p, g)| *p -= step * g);
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        trace.push(epoch_loss / patches.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step; must lie in `[1e-6, 1e-3]`.
    pub step: f64,
    pub samples: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples: 100,
            beta: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Denominator floor so coordinates with an exactly zero gradient compare
/// cleanly.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient with central finite differences on
/// `cfg.samples` distinct random coordinates. The noise vector is drawn once
/// from `cfg.seed` and held fixed. `params` is not modified.
pub fn gradient_check(params: &VaeParams, x: &[f64], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&cfg.step) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            cfg.step
        )));
    }
    check_len(params.shape.input(), x.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise: Vec<f64> = (0..params.shape.latent).map(|_| rng.sample(StandardNormal)).collect();
    let (_, grad) = loss_and_gradient(params, x, &noise, cfg.beta)?;

    let total = params.param_count();
    let count = cfg.samples.min(total);
    let coords = rand::seq::index::sample(&mut rng, total, count);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in coords.iter() {
        let original = params.get(idx);
        probe.set(idx, original + cfg.step);
        let plus = sample_loss(&probe, x, &noise, cfg.beta, None);
        probe.set(idx, original - cfg.step);
        let minus = sample_loss(&probe, x, &noise, cfg.beta, None);
        probe.set(idx, original);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        worst = worst.max(relative_error(grad.get(idx), numeric));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates: count,
    })
}
