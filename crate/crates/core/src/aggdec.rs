//! Aggregation and decomposition between latent factors and concepts.
//!
//! Aggregation transforms each latent dimension with its own small network
//! (`z′ⱼ = aⱼ(zⱼ)`) and mixes the results linearly into concept logits.
//! Decomposition maps concept scores back with one linear layer followed by
//! per-dimension networks, so reconstructed factor `j` only sees row `j` of
//! the linear output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{ParamStore, Tensor, Var};
use crate::nn::{Ctx, Dense, GroupedMlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggDecConfig {
    pub n_annotated: usize,
    pub n_total: usize,
    /// Hidden widths of every `aⱼ` and `dⱼ`.
    pub hidden: Vec<usize>,
}

impl Default for AggDecConfig {
    fn default() -> Self {
        Self {
            n_annotated: 6,
            n_total: 16,
            hidden: vec![32, 32],
        }
    }
}

impl AggDecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_annotated == 0 || self.n_annotated > self.n_total {
            return Err(Error::Invalid(format!(
                "need 0 < n_annotated ({}) ≤ n_total ({})",
                self.n_annotated, self.n_total
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// Graph handles produced by [`Aggregator::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ConceptOut {
    /// `(B, k)` transformed factors.
    pub z_prime: Var,
    /// `(B, N)`.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub scores: Var,
}

/// `aⱼ` networks under `agg.a.*`, mixing layer `f` under `agg.f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub a: GroupedMlp,
    pub f: Dense,
    pub latent_dim: usize,
    pub n_total: usize,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, latent_dim: usize, cfg: &AggDecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            a: GroupedMlp::new(store, rng, "agg.a", latent_dim, &cfg.widths()),
            f: Dense::new(store, rng, "agg.f", latent_dim, cfg.n_total),
            latent_dim,
            n_total: cfg.n_total,
        })
    }

    pub fn transform(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let shape = ctx.g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::shape(
                "aggregate",
                format!("expected (B, {}), got {shape:?}", self.latent_dim),
            ));
        }
        self.a.forward(ctx, z)
    }

    /// Linear mixing of transformed factors into logits and scores.
    pub fn combine(&self, ctx: &mut Ctx, z_prime: Var) -> Result<(Var, Var)> {
        let logits = self.f.forward(ctx, z_prime)?;
        let scores = ctx.g.sigmoid(logits)?;
        Ok((logits, scores))
    }

    pub fn forward(&self, ctx: &mut Ctx, z: Var) -> Result<ConceptOut> {
        let z_prime = self.transform(ctx, z)?;
        let (logits, scores) = self.combine(ctx, z_prime)?;
        Ok(ConceptOut {
            z_prime,
            logits,
            scores,
        })
    }
}

/// Mixing layer `g` under `dec.g`, `dⱼ` networks under `dec.d.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposer {
    pub g: Dense,
    pub d: GroupedMlp,
    pub latent_dim: usize,
    pub n_total: usize,
}

impl Decomposer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, latent_dim: usize, cfg: &AggDecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            g: Dense::new(store, rng, "dec.g", cfg.n_total, latent_dim),
            d: GroupedMlp::new(store, rng, "dec.d", latent_dim, &cfg.widths()),
            latent_dim,
            n_total: cfg.n_total,
        })
    }

    /// `c (B, N)` scores → `(ẑ′, ẑ)`, both `(B, k)`.
    pub fn forward(&self, ctx: &mut Ctx, scores: Var) -> Result<(Var, Var)> {
        let shape = ctx.g.value(scores).shape();
        if shape.len() != 2 || shape[1] != self.n_total {
            return Err(Error::shape(
                "decompose",
                format!("expected (B, {}), got {shape:?}", self.n_total),
            ));
        }
        let z_hat_prime = self.g.forward(ctx, scores)?;
        let z_hat = self.d.forward(ctx, z_hat_prime)?;
        Ok((z_hat_prime, z_hat))
    }
}

/// Weighted BCE over the first `n` logits, summed over concepts and
/// averaged over the batch. `labels` is `(B, n)` in {0, 1}.
pub fn concept_loss(ctx: &mut Ctx, logits: Var, labels: &Tensor, weights: &[f64]) -> Result<Var> {
    let n = weights.len();
    let annotated = ctx.g.narrow(logits, 0, n)?;
    ctx.g.bce_with_logits(annotated, labels, weights)
}

/// `‖z − ẑ‖²`, mean over the batch.
pub fn drc_loss(ctx: &mut Ctx, z: Var, z_hat: Var) -> Result<Var> {
    let batch = ctx.g.value(z).shape()[0] as f64;
    let d = ctx.g.sub(z, z_hat)?;
    let d2 = ctx.g.square(d)?;
    let s = ctx.g.sum(d2)?;
    ctx.g.scale(s, 1.0 / batch)
}

/// `‖z′‖₁`, mean over the batch.
pub fn sparsity_penalty(ctx: &mut Ctx, z_prime: Var) -> Result<Var> {
    let batch = ctx.g.value(z_prime).shape()[0] as f64;
    let a = ctx.g.abs(z_prime)?;
    let s = ctx.g.sum(a)?;
    ctx.g.scale(s, 1.0 / batch)
}
