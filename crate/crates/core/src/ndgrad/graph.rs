//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op in construction order, so the node list is
//! already topologically sorted; [`Graph::backward`] walks it in exact
//! reverse. Leaves are created with [`Graph::param`] (differentiable) or
//! [`Graph::constant`]. Ops whose inputs are all constant are evaluated but
//! skipped by the backward pass.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the form folded into running statistics.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        /// Geometry of the adjoint convolution (output map → input map).
        geom: ConvGeom,
        in_channels: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        pos_weight: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to the graph's differentiable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance to a non-differentiable point (`relu`, `leaky_relu`
    /// and `abs` inputs at zero) over ops on a differentiable path.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, &[a, b], op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::Shift(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, &[a], Op::Reshape(a))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| Error::shape("narrow", "scalar input"))?;
        if start + len > d {
            return Err(Error::shape("narrow", format!("[{start}, {}) of last axis {d}", start + len)));
        }
        let rows = t.len() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        self.push("narrow", value, &[a], Op::Narrow { x: a, start })
    }

    /// Fully connected layer: `x (B, in)`, `w (out, in)`, `b (out)` → `(B, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 2 || tw.ndim() != 2 || tb.shape() != [tw.shape()[0]] || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (batch, fan_in, fan_out) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut y = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            y.extend_from_slice(tb.data());
        }
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            (tx.data(), fan_in as isize, 1),
            (tw.data(), 1, fan_in as isize),
            1.0,
            &mut y,
            fan_out as isize,
        );
        let value = Tensor::new(vec![batch, fan_out], y)?;
        self.push("linear", value, &[x, w, b], Op::Linear { x, w, b })
    }

    /// `G` independent fully connected layers applied group-wise:
    /// `x (B, G, in)`, `w (G, out, in)`, `b (G, out)` → `(B, G, out)`.
    /// Output group `g` depends only on input group `g`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.ndim() == 3
            && tw.ndim() == 3
            && tb.ndim() == 2
            && tx.shape()[1] == tw.shape()[0]
            && tx.shape()[2] == tw.shape()[2]
            && tb.shape() == [tw.shape()[0], tw.shape()[1]];
        if !ok {
            return Err(Error::shape(
                "grouped_linear",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (batch, groups, fan_in, fan_out) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tw.shape()[1]);
        let mut y = Vec::with_capacity(batch * groups * fan_out);
        for _ in 0..batch {
            y.extend_from_slice(tb.data());
        }
        for g in 0..groups {
            kernels::gemm(
                batch,
                fan_in,
                fan_out,
                (&tx.data()[g * fan_in..], (groups * fan_in) as isize, 1),
                (&tw.data()[g * fan_out * fan_in..], 1, fan_in as isize),
                1.0,
                &mut y[g * fan_out..],
                (groups * fan_out) as isize,
            );
        }
        let value = Tensor::new(vec![batch, groups, fan_out], y)?;
        self.push("grouped_linear", value, &[x, w, b], Op::GroupedLinear { x, w, b })
    }

    /// 2-D convolution, `x (B, Cin, H, W)`, `w (Cout, Cin, k, k)`, `b (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.ndim() == 4
            && tw.ndim() == 4
            && tw.shape()[1] == tx.shape()[1]
            && tw.shape()[2] == tw.shape()[3]
            && tb.shape() == [tw.shape()[0]]
            && stride > 0;
        if !ok {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (batch, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, kernel) = (tw.shape()[0], tw.shape()[2]);
        if h + 2 * pad < kernel || wd + 2 * pad < kernel {
            return Err(Error::shape("conv2d", format!("input {h}x{wd} smaller than kernel {kernel}")));
        }
        let geom = ConvGeom {
            batch,
            channels: cin,
            h,
            w: wd,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (wd + 2 * pad - kernel) / stride + 1,
            kernel,
            stride,
            pad,
        };
        let plane = geom.out_h * geom.out_w;
        let cols = kernels::im2col(tx.data(), &geom);
        let (k, n) = (geom.col_rows(), geom.col_cols());
        let mut y = vec![0.0; cout * n];
        kernels::gemm(cout, k, n, (tw.data(), k as isize, 1), (&cols, n as isize, 1), 0.0, &mut y, n as isize);
        let mut out = kernels::channel_to_batch_major(&y, batch, cout, plane);
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = tb.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(vec![batch, cout, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", value, &[x, w, b], Op::Conv2d { x, w, b, geom })
    }

    /// Transposed 2-D convolution, `x (B, Cin, H, W)`, `w (Cin, Cout, k, k)`,
    /// `b (Cout)`; output side is `(H − 1)·stride − 2·pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.ndim() == 4
            && tw.ndim() == 4
            && tw.shape()[0] == tx.shape()[1]
            && tw.shape()[2] == tw.shape()[3]
            && tb.shape() == [tw.shape()[1]]
            && stride > 0
            && out_pad < stride;
        if !ok {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (batch, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, kernel) = (tw.shape()[1], tw.shape()[2]);
        let out_h = ((h - 1) * stride + kernel + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output"))?;
        let out_w = ((wd - 1) * stride + kernel + out_pad) - 2 * pad;
        let geom = ConvGeom {
            batch,
            channels: cout,
            h: out_h,
            w: out_w,
            out_h: h,
            out_w: wd,
            kernel,
            stride,
            pad,
        };
        let plane = h * wd;
        let xp = kernels::batch_to_channel_major(tx.data(), batch, cin, plane);
        let (k, n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; k * n];
        kernels::gemm(k, cin, n, (tw.data(), 1, k as isize), (&xp, n as isize, 1), 0.0, &mut cols, n as isize);
        let mut out = kernels::col2im(&cols, &geom);
        let out_plane = out_h * out_w;
        for (i, chunk) in out.chunks_mut(out_plane).enumerate() {
            let bias = tb.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(vec![batch, cout, out_h, out_w], out)?;
        self.push(
            "conv_transpose2d",
            value,
            &[x, w, b],
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_channels: cin,
            },
        )
    }

    /// Batch normalization over every axis except axis 1 (channels).
    /// Returns the batch statistics in training mode.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.ndim() < 2 || tg.shape() != [tx.shape()[1]] || tb.shape() != tg.shape() {
            return Err(Error::shape(
                "batch_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let (batch, channels) = (tx.shape()[0], tx.shape()[1]);
        let plane: usize = tx.shape()[2..].iter().product();
        let count = (batch * plane) as f64;
        let at = |b: usize, c: usize| (b * channels + c) * plane;

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += tx.data()[at(b, c)..at(b, c) + plane].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        ss += tx.data()[at(b, c)..at(b, c) + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = ss / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape("batch_norm", "running statistics length != channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut y = vec![0.0; tx.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = at(b, c);
                for i in base..base + plane {
                    let h = (tx.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = tg.data()[c] * h + tb.data()[c];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), y)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, stats))
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = vec![0.0; t.len()];
        for (row, dst) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, &[a], Op::Softmax(a))
    }

    /// Mean over the batch of the softmax cross-entropy, `logits (B, m)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        let m = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= m) {
            return Err(Error::Invalid(format!("class index {bad} out of range for {m} classes")));
        }
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for ((row, dst), &y) in t.data().chunks(m).zip(probs.chunks_mut(m)).zip(targets) {
            let lse = softmax_row(row, dst);
            loss += lse - row[y];
        }
        loss /= targets.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Weighted binary cross-entropy from logits, summed over the last axis
    /// and averaged over rows. `pos_weight` scales the positive-label term.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, pos_weight: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        check_same("bce_with_logits", t, targets)?;
        let d = *t.shape().last().ok_or_else(|| Error::shape("bce_with_logits", "scalar input"))?;
        if pos_weight.len() != d {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} weights for last axis {d}", pos_weight.len()),
            ));
        }
        let rows = (t.len() / d).max(1) as f64;
        let mut loss = 0.0;
        for (i, (&x, &y)) in t.data().iter().zip(targets.data()).enumerate() {
            loss += pos_weight[i % d] * y * softplus(-x) + (1.0 - y) * softplus(x);
        }
        loss /= rows;
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            &[logits],
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                pos_weight: pos_weight.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Detached);
        };
        if !node.value.is_scalar() {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| c * v).collect()),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect()),
            Op::Abs(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(a) => acc(*a, g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect()),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter().zip(node.value.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::Relu(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { slope * g }).collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; nodes[a.0].value.len()]),
            Op::Narrow { x, start } => {
                let src = &nodes[x.0].value;
                let d = *src.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; src.len()];
                for (r, chunk) in g.chunks(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(chunk);
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let tx = &nodes[x.0].value;
                let (batch, fan_in) = (tx.shape()[0], tx.shape()[1]);
                let fan_out = nodes[w.0].value.shape()[0];
                if wants(*x) {
                    let mut dx = vec![0.0; batch * fan_in];
                    kernels::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        (g, fan_out as isize, 1),
                        (val(*w), fan_in as isize, 1),
                        0.0,
                        &mut dx,
                        fan_in as isize,
                    );
                    acc(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    kernels::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        (g, 1, fan_out as isize),
                        (tx.data(), fan_in as isize, 1),
                        0.0,
                        &mut dw,
                        fan_in as isize,
                    );
                    acc(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; fan_out];
                    for row in g.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::GroupedLinear { x, w, b } => {
                let tx = &nodes[x.0].value;
                let (batch, groups, fan_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let fan_out = nodes[w.0].value.shape()[1];
                let (x_rs, g_rs) = ((groups * fan_in) as isize, (groups * fan_out) as isize);
                if wants(*x) {
                    let mut dx = vec![0.0; tx.len()];
                    for grp in 0..groups {
                        kernels::gemm(
                            batch,
                            fan_out,
                            fan_in,
                            (&g[grp * fan_out..], g_rs, 1),
                            (&val(*w)[grp * fan_out * fan_in..], fan_in as isize, 1),
                            0.0,
                            &mut dx[grp * fan_in..],
                            x_rs,
                        );
                    }
                    acc(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; groups * fan_out * fan_in];
                    for grp in 0..groups {
                        kernels::gemm(
                            fan_out,
                            batch,
                            fan_in,
                            (&g[grp * fan_out..], 1, g_rs),
                            (&tx.data()[grp * fan_in..], x_rs, 1),
                            0.0,
                            &mut dw[grp * fan_out * fan_in..],
                            fan_in as isize,
                        );
                    }
                    acc(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; groups * fan_out];
                    for row in g.chunks(groups * fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cout = nodes[w.0].value.shape()[0];
                let plane = geom.out_h * geom.out_w;
                let (k, n) = (geom.col_rows(), geom.col_cols());
                let dy = kernels::batch_to_channel_major(g, geom.batch, cout, plane);
                if wants(*w) {
                    let cols = kernels::im2col(val(*x), geom);
                    let mut dw = vec![0.0; cout * k];
                    kernels::gemm(cout, n, k, (&dy, n as isize, 1), (&cols, 1, n as isize), 0.0, &mut dw, k as isize);
                    acc(*w, dw);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        cout,
                        n,
                        (val(*w), 1, k as isize),
                        (&dy, n as isize, 1),
                        0.0,
                        &mut dcols,
                        n as isize,
                    );
                    acc(*x, kernels::col2im(&dcols, geom));
                }
                if wants(*b) {
                    acc(*b, dy.chunks(n).map(|r| r.iter().sum()).collect());
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_channels,
            } => {
                let cin = *in_channels;
                let cout = geom.channels;
                let (k, n) = (geom.col_rows(), geom.col_cols());
                let plane = geom.out_h * geom.out_w;
                let dcols = kernels::im2col(g, geom);
                if wants(*x) {
                    let mut dxp = vec![0.0; cin * n];
                    kernels::gemm(
                        cin,
                        k,
                        n,
                        (val(*w), k as isize, 1),
                        (&dcols, n as isize, 1),
                        0.0,
                        &mut dxp,
                        n as isize,
                    );
                    acc(*x, kernels::channel_to_batch_major(&dxp, geom.batch, cin, plane));
                }
                if wants(*w) {
                    let xp = kernels::batch_to_channel_major(val(*x), geom.batch, cin, plane);
                    let mut dw = vec![0.0; cin * k];
                    kernels::gemm(cin, n, k, (&xp, n as isize, 1), (&dcols, 1, n as isize), 0.0, &mut dw, k as isize);
                    acc(*w, dw);
                }
                if wants(*b) {
                    let out_plane = geom.h * geom.w;
                    let mut db = vec![0.0; cout];
                    for (i, chunk) in g.chunks(out_plane).enumerate() {
                        db[i % cout] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = nodes[x.0].value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let count = (batch * plane) as f64;
                let at = |b: usize, c: usize| (b * channels + c) * plane;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for c in 0..channels {
                    for bi in 0..batch {
                        for i in at(bi, c)..at(bi, c) + plane {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for c in 0..channels {
                        let k = gam[c] * inv_std[c];
                        for bi in 0..batch {
                            for i in at(bi, c)..at(bi, c) + plane {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let m = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    dx[r * m + y] -= scale;
                }
                acc(*logits, dx);
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let d = pos_weight.len();
                let x = val(*logits);
                let scale = g[0] / (x.len() / d).max(1) as f64;
                let dx = x
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&x, &y))| {
                        let s = sigmoid(x);
                        scale * (-pos_weight[i % d] * y * (1.0 - s) + (1.0 - y) * s)
                    })
                    .collect();
                acc(*logits, dx);
            }
        }
        Ok(())
    }
}

/// Writes softmax of `row` into `dst` and returns log-sum-exp of `row`.
fn softmax_row(row: &[f64], dst: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &x) in dst.iter_mut().zip(row) {
        *d = (x - max).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
    max + z.ln()
}
