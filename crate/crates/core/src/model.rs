//! Full models: the concept model (VAE → aggregation → task head, with the
//! decomposition path) and the concept-bottleneck baseline (autoencoder →
//! linear concept layer → task head). Also the checkpoint layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggdec::{AggDecConfig, Aggregator, Decomposer};
use crate::drl::{reparameterize, Posterior, Vae, VaeConfig};
use crate::error::{Error, Result};
use crate::ndgrad::{checkpoint, ParamStore, Tensor, Var};
use crate::nn::{Ctx, Dense, Mode};
use crate::rng::{substream, Stream};
use crate::taskhead::TaskHead;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub aggdec: AggDecConfig,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            aggdec: AggDecConfig::default(),
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.aggdec.validate()?;
        if self.classes < 2 {
            return Err(Error::Invalid(format!("need at least two classes, got {}", self.classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// β-VAE with aggregation/decomposition.
    Concept,
    /// Deterministic autoencoder with a linear concept layer.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConceptPath {
    AggDec { agg: Aggregator, dec: Decomposer },
    /// `cbm.c`: bottleneck `k` → annotated concepts.
    Linear(Dense),
}

/// Module layout; parameters live in the owning [`Model`]'s store.
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub arch: Architecture,
    pub vae: Vae,
    pub concepts: ConceptPath,
    pub head: TaskHead,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub post: Posterior,
    /// The sampled (or mean) latent vector fed downstream.
    pub z: Var,
    pub x_hat: Option<Var>,
    pub z_prime: Option<Var>,
    pub concept_logits: Var,
    pub scores: Var,
    pub z_hat: Option<Var>,
    pub task_logits: Var,
}

/// Concept-side outputs from a latent vector.
#[derive(Clone, Copy, Debug)]
pub struct ConceptHandles {
    pub z_prime: Option<Var>,
    pub logits: Var,
    pub scores: Var,
}

impl Net {
    pub fn latent_dim(&self) -> usize {
        self.vae.config.latent_dim
    }

    pub fn n_annotated(&self) -> usize {
        self.head.n_annotated
    }

    pub fn concepts_from_z(&self, ctx: &mut Ctx, z: Var) -> Result<ConceptHandles> {
        match &self.concepts {
            ConceptPath::AggDec { agg, .. } => {
                let out = agg.forward(ctx, z)?;
                Ok(ConceptHandles {
                    z_prime: Some(out.z_prime),
                    logits: out.logits,
                    scores: out.scores,
                })
            }
            ConceptPath::Linear(layer) => {
                let logits = layer.forward(ctx, z)?;
                let scores = ctx.g.sigmoid(logits)?;
                Ok(ConceptHandles {
                    z_prime: None,
                    logits,
                    scores,
                })
            }
        }
    }

    /// `noise = None` uses `z = μ`. `decode` controls whether the image is
    /// reconstructed.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, noise: Option<Tensor>, mode: Mode, decode: bool) -> Result<Outputs> {
        let post = self.vae.encode(ctx, x, mode)?;
        let z = match noise {
            Some(n) => reparameterize(ctx, &post, n)?,
            None => post.mu,
        };
        let x_hat = if decode { Some(self.vae.decode(ctx, z, mode)?) } else { None };
        let c = self.concepts_from_z(ctx, z)?;
        let z_hat = match &self.concepts {
            ConceptPath::AggDec { dec, .. } => Some(dec.forward(ctx, c.scores)?.1),
            ConceptPath::Linear(_) => None,
        };
        let task_logits = self.head.predict(ctx, c.scores)?;
        Ok(Outputs {
            post,
            z,
            x_hat,
            z_prime: c.z_prime,
            concept_logits: c.logits,
            scores: c.scores,
            z_hat,
            task_logits,
        })
    }
}

/// Parameters plus layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Net,
}

/// Inference results for a batch, as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `(B, k)` posterior means.
    pub mu: Tensor,
    /// `(B, N)` concept scores (`N = n` for the bottleneck model).
    pub scores: Tensor,
    /// `(B, m)` task logits.
    pub task_logits: Tensor,
}

impl Predictions {
    pub fn predicted_class(&self, i: usize) -> usize {
        let m = self.task_logits.shape()[1];
        argmax(&self.task_logits.data()[i * m..(i + 1) * m])
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

const GROUPED: [&str; 2] = ["agg.a.", "dec.d."];

impl Model {
    /// Fresh parameters drawn from the init substream of `seed`.
    pub fn new(config: &ModelConfig, arch: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let stochastic = arch == Architecture::Concept;
        let vae = Vae::new(&mut store, &mut rng, &config.vae, stochastic)?;
        let k = config.vae.latent_dim;
        let n = config.aggdec.n_annotated;
        let concepts = match arch {
            Architecture::Concept => ConceptPath::AggDec {
                agg: Aggregator::new(&mut store, &mut rng, k, &config.aggdec)?,
                dec: Decomposer::new(&mut store, &mut rng, k, &config.aggdec)?,
            },
            Architecture::Bottleneck => ConceptPath::Linear(Dense::new(&mut store, &mut rng, "cbm.c", k, n)),
        };
        let head = TaskHead::new(&mut store, &mut rng, n, config.classes)?;
        Ok(Self {
            config: config.clone(),
            store,
            net: Net {
                arch,
                vae,
                concepts,
                head,
            },
        })
    }

    pub fn arch(&self) -> Architecture {
        self.net.arch
    }

    /// Eval-mode inference with `z = μ`, in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Predictions> {
        let total = images.shape()[0];
        let (mut mu, mut scores, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        let mut widths = (0, 0, 0);
        let mut start = 0;
        while start < total {
            let count = chunk.max(1).min(total - start);
            let mut ctx = Ctx::frozen(&self.store);
            let x = ctx.constant(images.rows(start, count));
            let out = self.net.forward(&mut ctx, x, None, Mode::Eval, false)?;
            for (dst, v, w) in [
                (&mut mu, out.z, &mut widths.0),
                (&mut scores, out.scores, &mut widths.1),
                (&mut logits, out.task_logits, &mut widths.2),
            ] {
                let t = ctx.g.value(v);
                *w = t.shape()[1];
                dst.extend_from_slice(t.data());
            }
            start += count;
        }
        Ok(Predictions {
            mu: Tensor::new(vec![total, widths.0], mu)?,
            scores: Tensor::new(vec![total, widths.1], scores)?,
            task_logits: Tensor::new(vec![total, widths.2], logits)?,
        })
    }

    /// Store contents with every per-dimension network split into its own
    /// section: `agg.a.l0.w (k, o, i)` becomes `agg.a.{j}.l0.w (o, i)`.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let entries: Vec<(&str, &Tensor)> = self.store.iter().collect();
        let mut out = Vec::new();
        let mut emitted = [false; GROUPED.len()];
        for &(name, t) in &entries {
            match GROUPED.iter().position(|p| name.starts_with(p)) {
                None => out.push((name.to_string(), t.clone())),
                Some(g) if !emitted[g] => {
                    emitted[g] = true;
                    let prefix = GROUPED[g];
                    let members: Vec<_> = entries.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
                    for j in 0..t.shape()[0] {
                        for (n, m) in &members {
                            let rest = &n[prefix.len()..];
                            let slice = m.rows(j, 1);
                            let shape = slice.shape()[1..].to_vec();
                            out.push((format!("{prefix}{j}.{rest}"), slice.reshape(shape).expect("row shape")));
                        }
                    }
                }
                Some(_) => {}
            }
        }
        out
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.checkpoint_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_tensors())
    }

    /// Inverse of [`Model::checkpoint_tensors`].
    pub fn restore(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let value = match GROUPED.iter().find(|p| name.starts_with(*p)) {
                None => lookup(&name)?.clone(),
                Some(prefix) => {
                    let rest = &name[prefix.len()..];
                    let groups = self.store.get(id).shape()[0];
                    let mut data = Vec::with_capacity(self.store.get(id).len());
                    for j in 0..groups {
                        data.extend_from_slice(lookup(&format!("{prefix}{j}.{rest}"))?.data());
                    }
                    Tensor::new(self.store.get(id).shape().to_vec(), data)?
                }
            };
            self.store.set(id, value)?;
        }
        let known = self.checkpoint_tensors().len();
        if tensors.len() != known {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {known}",
                tensors.len()
            )));
        }
        Ok(())
    }

    /// Builds the layout for `config` and fills it from a checkpoint. The
    /// architecture is read off the tensor names.
    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let tensors = checkpoint::load(path)?;
        Self::from_tensors(config, &tensors)
    }

    pub fn from_tensors(config: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let arch = if tensors.iter().any(|(n, _)| n.starts_with("cbm.")) {
            Architecture::Bottleneck
        } else {
            Architecture::Concept
        };
        let mut model = Self::new(config, arch, 0)?;
        model.restore(tensors)?;
        Ok(model)
    }
}
