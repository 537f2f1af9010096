//! Layer helpers shared by the model modules: parameter registration,
//! initialization, batch norm with running statistics, dense and grouped
//! (per-dimension) networks.

use rand::Rng;

use crate::error::Result;
use crate::ndgrad::{finite_diff_report, BatchStats, BnMode, Bound, GradCheck, Graph, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour and, by convention, whether a module is being fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a graph with every parameter of `store` bound as a leaf.
pub struct Ctx<'a> {
    pub g: Graph,
    bound: Bound,
    pub store: &'a ParamStore,
    /// Batch statistics of every train-mode batch norm, in call order.
    pub bn_stats: Vec<(BatchNorm, BatchStats)>,
}

impl<'a> Ctx<'a> {
    /// Parameters accepted by `differentiate` are differentiable leaves.
    pub fn new(store: &'a ParamStore, differentiate: impl Fn(&str) -> bool) -> Self {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, differentiate);
        Self {
            g,
            bound,
            store,
            bn_stats: Vec::new(),
        }
    }

    /// Everything constant: inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    /// Finite-difference check of the scalar built by `f` with respect to
    /// parameter `id`, all other parameters held constant.
    pub fn check_param(
        store: &ParamStore,
        id: ParamId,
        h: f64,
        coords: Option<&[usize]>,
        mut f: impl FnMut(&mut Ctx) -> Result<Var>,
    ) -> Result<GradCheck> {
        finite_diff_report(
            |g, var| {
                let mut graph = std::mem::take(g);
                let bound = store.bind_with(&mut graph, id, var);
                let mut ctx = Ctx {
                    g: graph,
                    bound,
                    store,
                    bn_stats: Vec::new(),
                };
                let out = f(&mut ctx);
                *g = ctx.g;
                out
            },
            store.get(id),
            h,
            coords,
        )
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }
}

/// Uniform in `±1/√fan_in`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mode: Mode) -> Result<Var> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let store = ctx.store;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            },
        };
        let (y, stats) = ctx.g.batch_norm(x, gamma, beta, bn_mode)?;
        if let Some(stats) = stats {
            ctx.bn_stats.push((*self, stats));
        }
        Ok(y)
    }
}

/// Folds collected batch statistics into the running buffers; momentum 1
/// overwrites them.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[(BatchNorm, BatchStats)], momentum: f64) {
    for (bn, s) in stats {
        for (id, batch) in [(bn.running_mean, &s.mean), (bn.running_var, &s.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Runs `f` once on a frozen graph and stores its train-mode batch
/// statistics as the running statistics.
pub fn calibrate_bn(store: &mut ParamStore, f: impl FnOnce(&mut Ctx) -> Result<()>) -> Result<()> {
    let stats = {
        let mut ctx = Ctx::frozen(store);
        f(&mut ctx)?;
        ctx.bn_stats
    };
    apply_bn_stats(store, &stats, 1.0);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), init_uniform(rng, &[outputs, inputs], inputs)),
            b: store.add(format!("{prefix}.b"), init_uniform(rng, &[outputs], inputs)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.linear(x, w, b)
    }
}

/// `groups` independent scalar-to-scalar MLPs evaluated side by side, so
/// output `j` depends on input `j` alone. Hidden layers use leaky ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupedMlp {
    pub groups: usize,
    pub layers: Vec<Dense>,
}

impl GroupedMlp {
    /// `widths` runs from input to output, e.g. `[1, 32, 32, 1]`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, groups: usize, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, io)| Dense {
                w: store.add(format!("{prefix}.l{l}.w"), init_uniform(rng, &[groups, io[1], io[0]], io[0])),
                b: store.add(format!("{prefix}.l{l}.b"), init_uniform(rng, &[groups, io[1]], io[0])),
            })
            .collect();
        Self { groups, layers }
    }

    /// `x (B, groups)` → `(B, groups)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let batch = ctx.g.value(x).shape()[0];
        let mut h = ctx.g.reshape(x, &[batch, self.groups, 1])?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = (ctx.p(layer.w), ctx.p(layer.b));
            h = ctx.g.grouped_linear(h, w, b)?;
            if l + 1 < self.layers.len() {
                h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        ctx.g.reshape(h, &[batch, self.groups])
    }
}

/// Outcome of [`check_params`] for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheck,
    /// Coordinates compared, out of `total`.
    pub checked: usize,
    pub total: usize,
}

/// Finite-difference check of every trainable parameter accepted by
/// `select`. Only coordinates with `|analytic| ≥ floor` are compared: below
/// that, the roundoff of `f(x ± h)` dominates the central difference.
pub fn check_params(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    h: f64,
    floor: f64,
    mut f: impl FnMut(&mut Ctx) -> Result<Var>,
) -> Result<Vec<ParamCheck>> {
    let ids: Vec<ParamId> = store.trainable_ids().filter(|&id| select(store.name(id))).collect();
    let mut ctx = Ctx::new(store, |name| select(name));
    let loss = f(&mut ctx)?;
    let vars: Vec<Var> = ids.iter().map(|&id| ctx.p(id)).collect();
    let grads = ctx.g.backward(loss)?;
    let mut out = Vec::new();
    for (&id, var) in ids.iter().zip(vars) {
        let analytic = grads.get_or_zeros(var, store.get(id));
        let coords: Vec<usize> = (0..analytic.len()).filter(|&i| analytic.data()[i].abs() >= floor).collect();
        let report = if coords.is_empty() {
            GradCheck {
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            }
        } else {
            Ctx::check_param(store, id, h, Some(&coords), &mut f)?
        };
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            report,
            checked: coords.len(),
            total: analytic.len(),
        });
    }
    Ok(out)
}
