//! Staged optimization of the total objective
//! `ELBO + λ₁·L_con + λ₂·L_pred + λ₃·L_drc + λ₄·‖z′‖₁`.
//!
//! Stage 1 fits the VAE alone. Stage 2 freezes it (batch norm on running
//! statistics) and fits the concept mappings with `λ₂ = 0`. Stage 3 trains
//! everything with the full weights. Each stage starts a fresh Adam.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggdec::{concept_loss, drc_loss, sparsity_penalty};
use crate::drl::elbo_loss;
use crate::error::{Error, Result};
use crate::model::{argmax, Architecture, Model, ModelConfig, Net, Outputs};
use crate::ndgrad::{Adam, ParamId, Tensor, Var};
use crate::nn::{apply_bn_stats, Ctx, Mode, BN_MOMENTUM};
use crate::rng::{substream_at, Stream};
use crate::spritegen::SplitData;
use crate::taskhead::pred_loss;
use crate::xeval::{concept_error, ConceptErrorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    /// Autoencoder + linear concept layer + linear head.
    Cbm,
    /// `λ₃ = 0`.
    NoDrc,
    /// `β = 1`.
    VanillaVae,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cbm" => Ok(Self::Cbm),
            "no_drc" => Ok(Self::NoDrc),
            "vanilla_vae" => Ok(Self::VanillaVae),
            _ => Err(Error::Invalid(format!(
                "unknown ablation {s:?} (expected none, cbm, no_drc or vanilla_vae)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Cbm => "cbm",
            Self::NoDrc => "no_drc",
            Self::VanillaVae => "vanilla_vae",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `(λ₁, λ₂, λ₃, λ₄)`: concept, prediction, consistency, sparsity.
    pub lambdas: [f64; 4],
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs of stages 1, 2 and 3.
    pub epochs: [usize; 3],
    pub seed: u64,
    pub ablation: Ablation,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: [0.5, 0.2, 1.0, 0.1],
            beta: 0.05,
            lr: 1e-3,
            batch_size: 64,
            epochs: [20, 10, 10],
            seed: 0,
            ablation: Ablation::None,
            clip_norm: 5.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Invalid(format!("lambdas must be finite and ≥ 0, got {:?}", self.lambdas)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Invalid(format!("beta must be finite and ≥ 0, got {}", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Invalid(format!("batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        self.model.validate()
    }

    /// The configuration with the ablation's overrides applied.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        match self.ablation {
            Ablation::NoDrc => c.lambdas[2] = 0.0,
            Ablation::VanillaVae => c.beta = 1.0,
            Ablation::Cbm => {
                c.beta = 0.0;
                c.lambdas[2] = 0.0;
                c.lambdas[3] = 0.0;
            }
            Ablation::None => {}
        }
        c
    }

    pub fn architecture(&self) -> Architecture {
        match self.ablation {
            Ablation::Cbm => Architecture::Bottleneck,
            _ => Architecture::Concept,
        }
    }

    /// Term weights active in `stage`.
    pub fn stage_weights(&self, stage: usize) -> Result<Weights> {
        let c = self.effective();
        let lambdas = match stage {
            1 => [0.0; 4],
            2 => [c.lambdas[0], 0.0, c.lambdas[2], c.lambdas[3]],
            3 => c.lambdas,
            _ => return Err(Error::Invalid(format!("stage must be 1, 2 or 3, got {stage}"))),
        };
        Ok(Weights { beta: c.beta, lambdas })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub beta: f64,
    pub lambdas: [f64; 4],
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(B, 1, S, S)`.
    pub images: Tensor,
    /// `(B, n)` annotated labels.
    pub concepts: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_split(data: &SplitData, idx: &[usize]) -> Self {
        Self {
            images: data.images.gather_rows(idx),
            concepts: data.concepts.gather_rows(idx),
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unweighted term values and the weighted total. `kl`, `drc` and
/// `sparsity` are absent when the model has no such term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub elbo: f64,
    pub recon: f64,
    pub kl: Option<f64>,
    pub concept: f64,
    pub pred: f64,
    pub drc: Option<f64>,
    pub sparsity: Option<f64>,
    pub total: f64,
}

impl Breakdown {
    /// `elbo + Σ λᵢ·termᵢ`, recomputed from the parts.
    pub fn recombine(&self, lambdas: &[f64; 4]) -> f64 {
        let parts = [Some(self.concept), Some(self.pred), self.drc, self.sparsity];
        let mut total = self.elbo;
        for (l, t) in lambdas.iter().zip(parts) {
            if let (true, Some(t)) = (*l > 0.0, t) {
                total += l * t;
            }
        }
        total
    }
}

pub struct LossGraph {
    pub total: Var,
    pub out: Outputs,
    pub breakdown: Breakdown,
}

/// Builds the weighted objective for `batch`. Terms with zero weight are
/// evaluated for the breakdown but left out of `total`.
pub fn total_loss(
    ctx: &mut Ctx,
    net: &Net,
    batch: &Batch,
    noise: Option<Tensor>,
    mode: Mode,
    weights: &Weights,
    pos_weights: &[f64],
) -> Result<LossGraph> {
    let x = ctx.constant(batch.images.clone());
    let out = net.forward(ctx, x, noise, mode, true)?;
    let x_hat = out.x_hat.expect("decoded");
    let elbo = elbo_loss(ctx, x, x_hat, &out.post, weights.beta)?;
    let con = concept_loss(ctx, out.concept_logits, &batch.concepts, pos_weights)?;
    let pred = pred_loss(ctx, out.task_logits, &batch.labels)?;
    let drc = out.z_hat.map(|z_hat| drc_loss(ctx, out.z, z_hat)).transpose()?;
    let l1 = out.z_prime.map(|zp| sparsity_penalty(ctx, zp)).transpose()?;

    let value = |ctx: &Ctx, name: &str, v: Var| -> Result<f64> {
        let t = ctx.g.value(v).item();
        if t.is_finite() {
            Ok(t)
        } else {
            Err(Error::NonFinite {
                op: format!("total_loss term {name}"),
            })
        }
    };
    let mut breakdown = Breakdown {
        elbo: value(ctx, "elbo", elbo.loss)?,
        recon: value(ctx, "recon", elbo.recon)?,
        kl: elbo.kl.map(|v| value(ctx, "kl", v)).transpose()?,
        concept: value(ctx, "concept", con)?,
        pred: value(ctx, "pred", pred)?,
        drc: drc.map(|v| value(ctx, "drc", v)).transpose()?,
        sparsity: l1.map(|v| value(ctx, "sparsity", v)).transpose()?,
        total: 0.0,
    };

    let mut total = elbo.loss;
    for (l, term) in weights.lambdas.iter().zip([Some(con), Some(pred), drc, l1]) {
        if let (true, Some(term)) = (*l > 0.0, term) {
            let w = ctx.g.scale(term, *l)?;
            total = ctx.g.add(total, w)?;
        }
    }
    breakdown.total = value(ctx, "total", total)?;
    Ok(LossGraph { total, out, breakdown })
}

/// Per-epoch record. Term values are batch-size-weighted means over the
/// epoch; accuracy and concept RMSE are measured on the training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub terms: Breakdown,
    pub task_accuracy: f64,
    pub concept_error: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10e}")).unwrap_or_default()
}

impl TrainLog {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Metrics table. Wall time is kept out so reruns are byte-identical.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("stage,epoch,total,elbo,recon,kl,concept,pred,drc,sparsity,task_accuracy,concept_error\n");
        for r in &self.records {
            let t = &r.terms;
            writeln!(
                s,
                "{},{},{:.10e},{:.10e},{:.10e},{},{:.10e},{:.10e},{},{},{:.6},{:.6}",
                r.stage,
                r.epoch,
                t.total,
                t.elbo,
                t.recon,
                opt(t.kl),
                t.concept,
                t.pred,
                opt(t.drc),
                opt(t.sparsity),
                r.task_accuracy,
                r.concept_error
            )
            .unwrap();
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("stage,epoch,wall_seconds\n");
        for r in &self.records {
            writeln!(s, "{},{},{:.3}", r.stage, r.epoch, r.wall_seconds).unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(METRICS_FILE), self.metrics_csv())?;
        fs::write(dir.join(TIMINGS_FILE), self.timings_csv())?;
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";

pub fn stage_checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.cldr")
}

fn check_data(model: &Model, data: &SplitData) -> Result<()> {
    let n = model.net.n_annotated();
    if data.n_concepts() != n {
        return Err(Error::Invalid(format!(
            "dataset has {} annotated concepts, model expects {n}",
            data.n_concepts()
        )));
    }
    if data.size != model.config.vae.image_size {
        return Err(Error::Invalid(format!(
            "dataset images are {0}×{0}, model expects {1}×{1}",
            data.size, model.config.vae.image_size
        )));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= model.config.classes) {
        return Err(Error::Invalid(format!("label {y} outside {} classes", model.config.classes)));
    }
    Ok(())
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs one stage in place. On error the model holds the parameters from
/// before the failing step.
pub fn train_stage(model: &mut Model, stage: usize, data: &SplitData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    cfg.validate()?;
    check_data(model, data)?;
    let weights = cfg.stage_weights(stage)?;
    let epochs = cfg.epochs[stage - 1];
    let frozen_vae = stage == 2;
    let mode = if frozen_vae { Mode::Eval } else { Mode::Train };
    let differentiate = |name: &str| !(frozen_vae && name.starts_with("vae."));
    let ids: Vec<ParamId> = model
        .store
        .trainable_ids()
        .filter(|&id| differentiate(model.store.name(id)))
        .collect();
    let pos_weights = data.pos_weights();
    let stochastic = model.arch() == Architecture::Concept;
    let k = model.config.vae.latent_dim;

    let mut shuffle = substream_at(cfg.seed, Stream::Shuffle, stage as u64);
    let mut noise_rng = substream_at(cfg.seed, Stream::Noise, stage as u64);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut sums = Breakdown::default();
        let (mut kl, mut drc, mut l1) = (0.0, 0.0, 0.0);
        let (mut seen, mut correct, mut sq_err) = (0usize, 0usize, 0.0);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = Batch::from_split(data, idx);
            let b = batch.len();
            let noise = stochastic.then(|| {
                let draws = (0..b * k).map(|_| noise_rng.sample(StandardNormal)).collect();
                Tensor::new(vec![b, k], draws).expect("noise shape")
            });
            let (grads, bn_stats, lg_breakdown, scores, logits) = {
                let mut ctx = Ctx::new(&model.store, differentiate);
                let lg = total_loss(&mut ctx, &model.net, &batch, noise, mode, &weights, &pos_weights)?;
                let vars: Vec<Var> = ids.iter().map(|&id| ctx.p(id)).collect();
                let scores = ctx.g.value(lg.out.scores).clone();
                let logits = ctx.g.value(lg.out.task_logits).clone();
                let g = ctx.g.backward(lg.total)?;
                let grads: Vec<Tensor> = ids
                    .iter()
                    .zip(vars)
                    .map(|(&id, v)| g.get_or_zeros(v, model.store.get(id)))
                    .collect();
                (grads, std::mem::take(&mut ctx.bn_stats), lg.breakdown, scores, logits)
            };
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("stage {stage} gradient"),
                });
            }
            let grads: Vec<Tensor> = if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grads.iter().map(|g| g.map(|v| v * s)).collect()
            } else {
                grads
            };
            adam.step(&mut model.store.tensors_mut(&ids), &grads)?;
            apply_bn_stats(&mut model.store, &bn_stats, BN_MOMENTUM);

            let w = b as f64;
            let t = &lg_breakdown;
            sums.total += w * t.total;
            sums.elbo += w * t.elbo;
            sums.recon += w * t.recon;
            sums.concept += w * t.concept;
            sums.pred += w * t.pred;
            kl += w * t.kl.unwrap_or(0.0);
            drc += w * t.drc.unwrap_or(0.0);
            l1 += w * t.sparsity.unwrap_or(0.0);
            let m = logits.shape()[1];
            let width = scores.shape()[1];
            let n = model.net.n_annotated();
            for i in 0..b {
                correct += (argmax(&logits.data()[i * m..(i + 1) * m]) == batch.labels[i]) as usize;
                for j in 0..n {
                    let d = scores.data()[i * width + j] - batch.concepts.data()[i * n + j];
                    sq_err += d * d;
                }
            }
            seen += b;
        }
        let denom = seen.max(1) as f64;
        let terms = Breakdown {
            total: sums.total / denom,
            elbo: sums.elbo / denom,
            recon: sums.recon / denom,
            kl: stochastic.then(|| kl / denom),
            concept: sums.concept / denom,
            pred: sums.pred / denom,
            drc: stochastic.then(|| drc / denom),
            sparsity: stochastic.then(|| l1 / denom),
        };
        log.push(EpochRecord {
            stage,
            epoch,
            terms,
            task_accuracy: correct as f64 / denom,
            concept_error: (sq_err / (denom * model.net.n_annotated() as f64)).sqrt(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Runs `stages` in order, writing `stage{n}.cldr` after each one and the
/// metrics tables at the end when `out` is given. A failing stage leaves
/// `stage{n}.last_good.cldr` with the parameters from before the failure.
pub fn train_stages(
    model: &mut Model,
    stages: &[usize],
    data: &SplitData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    out: Option<&Path>,
) -> Result<()> {
    for &stage in stages {
        if let Err(e) = train_stage(model, stage, data, cfg, log) {
            if let Some(dir) = out {
                model.save(dir.join(format!("stage{stage}.last_good.cldr")))?;
                log.write(dir)?;
            }
            return Err(e);
        }
        if let Some(dir) = out {
            model.save(dir.join(stage_checkpoint_name(stage)))?;
        }
    }
    if let Some(dir) = out {
        log.write(dir)?;
    }
    Ok(())
}

/// Fresh model for `cfg` trained through all three stages.
pub fn train(data: &SplitData, cfg: &TrainConfig, out: Option<&Path>) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::new(&cfg.model, cfg.architecture(), cfg.seed)?;
    let mut log = TrainLog::default();
    train_stages(&mut model, &[1, 2, 3], data, cfg, &mut log, out)?;
    Ok((model, log))
}

/// Held-out task accuracy and annotated-concept RMSE, with `z = μ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_accuracy: f64,
    pub concept_error: f64,
}

pub fn evaluate(model: &Model, data: &SplitData) -> Result<Metrics> {
    check_data(model, data)?;
    let p = model.predict(&data.images, 256)?;
    let n = model.net.n_annotated();
    let width = p.scores.shape()[1];
    let mut scores = Vec::with_capacity(data.len() * n);
    for i in 0..data.len() {
        scores.extend_from_slice(&p.scores.data()[i * width..i * width + n]);
    }
    let correct = (0..data.len()).filter(|&i| p.predicted_class(i) == data.labels[i]).count();
    Ok(Metrics {
        task_accuracy: correct as f64 / data.len().max(1) as f64,
        concept_error: concept_error(&scores, data.concepts.data(), ConceptErrorKind::Rmse)?,
    })
}

/// Trains the `kind` variant of `cfg` and scores it on `test`.
pub fn run_ablation(
    kind: Ablation,
    train_data: &SplitData,
    test_data: &SplitData,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog, Metrics)> {
    if kind == Ablation::None {
        return Err(Error::Invalid("ablation kind must be cbm, no_drc or vanilla_vae".into()));
    }
    let cfg = TrainConfig {
        ablation: kind,
        ..cfg.clone()
    };
    let (model, log) = train(train_data, &cfg, None)?;
    let metrics = evaluate(&model, test_data)?;
    Ok((model, log, metrics))
}
