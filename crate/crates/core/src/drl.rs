//! β-VAE: strided-convolution encoder to a diagonal Gaussian posterior,
//! reparameterized sampling, transposed-convolution decoder, and the
//! negated-ELBO objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{ParamId, ParamStore, Tensor, Var};
use crate::nn::{init_uniform, BatchNorm, Ctx, Dense, Mode, LEAKY_SLOPE};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// Encoder conv widths; the decoder mirrors them.
    pub filters: Vec<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_dim: 16,
            filters: vec![16, 32, 32],
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.filters.len();
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Invalid("filters must be a nonempty list of positive widths".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Invalid("latent_dim must be positive".into()));
        }
        if self.image_size % down != 0 || self.image_size < down {
            return Err(Error::Invalid(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size,
                self.filters.len()
            )));
        }
        Ok(())
    }

    /// Side of the deepest feature map.
    pub fn base_size(&self) -> usize {
        self.image_size >> self.filters.len()
    }
}

/// Graph handles of `q(z|x)`. `log_var` is absent for a deterministic
/// autoencoder.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub log_var: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvBlock {
    w: ParamId,
    bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    blocks: Vec<ConvBlock>,
    head: Dense,
    latent_dim: usize,
    stochastic: bool,
    image_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    fc: Dense,
    blocks: Vec<ConvBlock>,
    out_w: ParamId,
    out_b: ParamId,
    base_channels: usize,
    base_size: usize,
    latent_dim: usize,
}

/// Encoder and decoder registered under `vae.enc.*` and `vae.dec.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    /// `stochastic = false` builds a plain autoencoder (mean head only).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &VaeConfig, stochastic: bool) -> Result<Self> {
        config.validate()?;
        let k = config.latent_dim;
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.filters.iter().enumerate() {
            let prefix = format!("vae.enc.conv{i}");
            blocks.push(ConvBlock {
                w: store.add(format!("{prefix}.w"), init_uniform(rng, &[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL)),
                bn: BatchNorm::new(store, &format!("{prefix}.bn"), cout),
            });
            cin = cout;
        }
        let base = config.base_size();
        let flat = cin * base * base;
        let heads = if stochastic { 2 } else { 1 };
        let head = Dense::new(store, rng, "vae.enc.fc", flat, heads * k);
        let encoder = Encoder {
            blocks,
            head,
            latent_dim: k,
            stochastic,
            image_size: config.image_size,
        };

        let fc = Dense::new(store, rng, "vae.dec.fc", k, flat);
        let widths: Vec<usize> = config.filters.iter().rev().copied().collect();
        let mut dblocks = Vec::new();
        for (i, io) in widths.windows(2).enumerate() {
            let prefix = format!("vae.dec.convt{i}");
            dblocks.push(ConvBlock {
                w: store.add(format!("{prefix}.w"), init_uniform(rng, &[io[0], io[1], KERNEL, KERNEL], io[0] * KERNEL * KERNEL)),
                bn: BatchNorm::new(store, &format!("{prefix}.bn"), io[1]),
            });
        }
        let last = *widths.last().unwrap();
        let fan = last * KERNEL * KERNEL;
        let i = widths.len() - 1;
        let out_w = store.add(format!("vae.dec.convt{i}.w"), init_uniform(rng, &[last, 1, KERNEL, KERNEL], fan));
        let out_b = store.add(format!("vae.dec.convt{i}.b"), init_uniform(rng, &[1], fan));
        let decoder = Decoder {
            fc,
            blocks: dblocks,
            out_w,
            out_b,
            base_channels: widths[0],
            base_size: base,
            latent_dim: k,
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn encode(&self, ctx: &mut Ctx, x: Var, mode: Mode) -> Result<Posterior> {
        self.encoder.forward(ctx, x, mode)
    }

    pub fn decode(&self, ctx: &mut Ctx, z: Var, mode: Mode) -> Result<Var> {
        self.decoder.forward(ctx, z, mode)
    }
}

impl Encoder {
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `x (B, 1, S, S)` → posterior with `(B, k)` parts.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: Mode) -> Result<Posterior> {
        let shape = ctx.g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.image_size || shape[3] != self.image_size {
            return Err(Error::shape(
                "encode",
                format!("expected (B, 1, {s}, {s}), got {shape:?}", s = self.image_size),
            ));
        }
        let batch = shape[0];
        let mut h = x;
        for block in &self.blocks {
            let cout = ctx.store.get(block.w).shape()[0];
            let zero = ctx.constant(Tensor::zeros(&[cout]));
            let w = ctx.p(block.w);
            h = ctx.g.conv2d(h, w, zero, STRIDE, PAD)?;
            h = block.bn.forward(ctx, h, mode)?;
            h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let flat = ctx.g.value(h).len() / batch;
        let h = ctx.g.reshape(h, &[batch, flat])?;
        let out = self.head.forward(ctx, h)?;
        let k = self.latent_dim;
        if self.stochastic {
            let mu = ctx.g.narrow(out, 0, k)?;
            let log_var = ctx.g.narrow(out, k, k)?;
            Ok(Posterior {
                mu,
                log_var: Some(log_var),
            })
        } else {
            Ok(Posterior { mu: out, log_var: None })
        }
    }
}

impl Decoder {
    /// `z (B, k)` → `(B, 1, S, S)` in `(0, 1)`.
    pub fn forward(&self, ctx: &mut Ctx, z: Var, mode: Mode) -> Result<Var> {
        let shape = ctx.g.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::shape("decode", format!("expected (B, {}), got {shape:?}", self.latent_dim)));
        }
        let batch = shape[0];
        let h = self.fc.forward(ctx, z)?;
        let h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        let mut h = ctx.g.reshape(h, &[batch, self.base_channels, self.base_size, self.base_size])?;
        for block in &self.blocks {
            let cout = ctx.store.get(block.w).shape()[1];
            let zero = ctx.constant(Tensor::zeros(&[cout]));
            let w = ctx.p(block.w);
            h = ctx.g.conv_transpose2d(h, w, zero, STRIDE, PAD, 1)?;
            h = block.bn.forward(ctx, h, mode)?;
            h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let (w, b) = (ctx.p(self.out_w), ctx.p(self.out_b));
        let h = ctx.g.conv_transpose2d(h, w, b, STRIDE, PAD, 1)?;
        ctx.g.sigmoid(h)
    }
}

/// `z = μ + exp(½·log_var) ⊙ noise`; `noise` enters as a constant.
pub fn reparameterize(ctx: &mut Ctx, post: &Posterior, noise: Tensor) -> Result<Var> {
    let Some(log_var) = post.log_var else {
        return Ok(post.mu);
    };
    let shape = ctx.g.value(post.mu).shape().to_vec();
    if noise.shape() != shape {
        return Err(Error::shape("reparameterize", format!("noise {:?} vs mu {shape:?}", noise.shape())));
    }
    let half = ctx.g.scale(log_var, 0.5)?;
    let sigma = ctx.g.exp(half)?;
    let eps = ctx.constant(noise);
    let spread = ctx.g.mul(sigma, eps)?;
    ctx.g.add(post.mu, spread)
}

/// `KL(q ‖ N(0, I)) = ½ Σⱼ (μⱼ² + σⱼ² − ln σⱼ² − 1)`, mean over the batch.
pub fn kl_divergence(ctx: &mut Ctx, mu: Var, log_var: Var) -> Result<Var> {
    let batch = ctx.g.value(mu).shape()[0] as f64;
    let g = &mut ctx.g;
    let mu2 = g.square(mu)?;
    let var = g.exp(log_var)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5 / batch)
}

/// Closed-form KL of one diagonal Gaussian against the standard normal.
pub fn kl_closed_form(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Squared error summed over pixels, mean over the batch.
pub fn reconstruction_loss(ctx: &mut Ctx, x: Var, x_hat: Var) -> Result<Var> {
    let batch = ctx.g.value(x).shape()[0] as f64;
    let d = ctx.g.sub(x, x_hat)?;
    let d2 = ctx.g.square(d)?;
    let s = ctx.g.sum(d2)?;
    ctx.g.scale(s, 1.0 / batch)
}

/// Parts of the negated ELBO; `kl` is `None` without a posterior variance.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    pub recon: Var,
    pub kl: Option<Var>,
}

/// `mean_b [ Σ_pixels (x − x̂)² + β·KL ]`.
pub fn elbo_loss(ctx: &mut Ctx, x: Var, x_hat: Var, post: &Posterior, beta: f64) -> Result<ElboTerms> {
    if beta < 0.0 {
        return Err(Error::Invalid(format!("beta must be non-negative, got {beta}")));
    }
    let recon = reconstruction_loss(ctx, x, x_hat)?;
    let Some(log_var) = post.log_var else {
        return Ok(ElboTerms { loss: recon, recon, kl: None });
    };
    let kl = kl_divergence(ctx, post.mu, log_var)?;
    let weighted = ctx.g.scale(kl, beta)?;
    let loss = ctx.g.add(recon, weighted)?;
    if !ctx.g.value(loss).all_finite() {
        return Err(Error::NonFinite { op: "elbo_loss".into() });
    }
    Ok(ElboTerms {
        loss,
        recon,
        kl: Some(kl),
    })
}
