//! Evaluation: concept error, integrated gradients over latent dimensions,
//! per-dimension input saliency and its IoU against sprite masks, latent
//! traversals, and test-time concept intervention.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Model, Net};
use crate::ndgrad::{ParamStore, Tensor, Var};
use crate::nn::{Ctx, Mode};
use crate::rng::{substream, Stream};
use crate::spritegen::SplitData;

/// Pixels with heat above this are salient.
pub const SALIENCY_THRESHOLD: f64 = 150.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptErrorKind {
    Rmse,
    ZeroOne,
}

impl FromStr for ConceptErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Self::Rmse),
            "zero_one" => Ok(Self::ZeroOne),
            _ => Err(Error::Invalid(format!("unknown concept error kind {s:?} (rmse or zero_one)"))),
        }
    }
}

/// `rmse = √mean((s − l)²)`, `zero_one = mean(round(s) ≠ l)`.
pub fn concept_error(scores: &[f64], labels: &[f64], kind: ConceptErrorKind) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let n = scores.len() as f64;
    let pairs = scores.iter().zip(labels);
    Ok(match kind {
        ConceptErrorKind::Rmse => (pairs.map(|(s, l)| (s - l) * (s - l)).sum::<f64>() / n).sqrt(),
        ConceptErrorKind::ZeroOne => pairs.filter(|(s, l)| s.round() != **l).count() as f64 / n,
    })
}

/// Integrated-gradient attributions with the two endpoint values.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub values: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl Attribution {
    /// `|Σ IG − (F(z) − F(z′))| / |F(z) − F(z′)|`.
    pub fn completeness_error(&self) -> f64 {
        let delta = self.f_input - self.f_baseline;
        (self.values.iter().sum::<f64>() - delta).abs() / delta.abs()
    }
}

/// Midpoint-rule integrated gradients of `score` from `baseline` to `z`.
///
/// `score` maps a `(P, k)` batch of points to `(P, 1)` or `(P,)` values,
/// row by row; all `steps` path points go through one pass.
pub fn integrated_gradients(
    store: &ParamStore,
    mut score: impl FnMut(&mut Ctx, Var) -> Result<Var>,
    z: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Attribution> {
    let k = z.len();
    if baseline.len() != k {
        return Err(Error::Invalid(format!("baseline has {} dims, input {k}", baseline.len())));
    }
    if steps == 0 {
        return Err(Error::Invalid("steps must be positive".into()));
    }
    let mut points = Vec::with_capacity((steps + 2) * k);
    for i in 0..steps {
        let alpha = (i as f64 + 0.5) / steps as f64;
        points.extend(z.iter().zip(baseline).map(|(x, b)| b + alpha * (x - b)));
    }
    points.extend_from_slice(z);
    points.extend_from_slice(baseline);
    let mut ctx = Ctx::frozen(store);
    let leaf = ctx.g.param(Tensor::new(vec![steps + 2, k], points)?);
    let out = score(&mut ctx, leaf)?;
    let values = ctx.g.value(out).data().to_vec();
    if values.len() != steps + 2 {
        return Err(Error::Invalid(format!("score returned {} values for {} points", values.len(), steps + 2)));
    }
    let total = ctx.g.sum(out)?;
    let grads = ctx.g.backward(total);
    let grad = match grads {
        Ok(g) => g.get_or_zeros(leaf, &Tensor::zeros(&[steps + 2, k])),
        Err(Error::Detached) => Tensor::zeros(&[steps + 2, k]),
        Err(e) => return Err(e),
    };
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            op: "integrated_gradients".into(),
        });
    }
    let g = grad.data();
    let attr = (0..k)
        .map(|j| {
            let mean = (0..steps).map(|i| g[i * k + j]).sum::<f64>() / steps as f64;
            (z[j] - baseline[j]) * mean
        })
        .collect();
    Ok(Attribution {
        values: attr,
        f_input: values[steps],
        f_baseline: values[steps + 1],
    })
}

/// Score function of concept `concept` over latent vectors.
pub fn concept_score(net: &Net, concept: usize) -> impl FnMut(&mut Ctx, Var) -> Result<Var> + '_ {
    move |ctx, z| {
        let c = net.concepts_from_z(ctx, z)?;
        ctx.g.narrow(c.scores, concept, 1)
    }
}

/// Absolute attributions scaled by the largest one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub dim_scores: Vec<f64>,
    /// All dimensions, most attributed first.
    pub top_k: Vec<usize>,
}

impl AttributionMap {
    pub fn from_attributions(values: &[f64]) -> Self {
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dim_scores: Vec<f64> = values
            .iter()
            .map(|v| if max > 0.0 { v.abs() / max } else { 0.0 })
            .collect();
        let top_k = rank(&dim_scores);
        Self { dim_scores, top_k }
    }
}

fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The `k_sel` highest-scoring dimensions, ties to the lower index.
pub fn top_k_dims(attr: &AttributionMap, k_sel: usize) -> Result<Vec<usize>> {
    if k_sel == 0 || k_sel > attr.dim_scores.len() {
        return Err(Error::Invalid(format!(
            "k_sel must be in 1..={}, got {k_sel}",
            attr.dim_scores.len()
        )));
    }
    Ok(rank(&attr.dim_scores)[..k_sel].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub size: usize,
    /// Row-major, in `[0, 1]`.
    pub heat: Vec<f64>,
    pub binary: Vec<bool>,
}

impl SaliencyMask {
    /// Smooths `|grad|` with a 3×3 box, scales to max 1, thresholds.
    pub fn from_gradient(grad: &[f64], size: usize) -> Self {
        let mut heat = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                let (mut s, mut n) = (0.0, 0.0);
                for rr in r.saturating_sub(1)..(r + 2).min(size) {
                    for cc in c.saturating_sub(1)..(c + 2).min(size) {
                        s += grad[rr * size + cc].abs();
                        n += 1.0;
                    }
                }
                heat[r * size + c] = s / n;
            }
        }
        let max = heat.iter().fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            heat.iter_mut().for_each(|v| *v /= max);
        }
        let binary = heat.iter().map(|&v| v > SALIENCY_THRESHOLD).collect();
        Self { size, heat, binary }
    }
}

/// Input-gradient saliency of `μ[d]` for each `d` in `dims`, eval mode.
pub fn dim_saliencies(model: &Model, image: &[f64], dims: &[usize]) -> Result<Vec<SaliencyMask>> {
    let size = model.config.vae.image_size;
    let k = model.config.vae.latent_dim;
    if image.len() != size * size {
        return Err(Error::Invalid(format!("image has {} pixels, expected {}", image.len(), size * size)));
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= k) {
        return Err(Error::Invalid(format!("dimension {d} out of range for latent size {k}")));
    }
    if dims.is_empty() {
        return Ok(Vec::new());
    }
    // One copy of the image per requested dimension; row i selects μ[dims[i]].
    let b = dims.len();
    let mut ctx = Ctx::frozen(&model.store);
    let data = (0..b).flat_map(|_| image.iter().copied()).collect();
    let x = ctx.g.param(Tensor::new(vec![b, 1, size, size], data)?);
    let post = model.net.vae.encode(&mut ctx, x, Mode::Eval)?;
    let mut select = vec![0.0; b * k];
    for (i, &d) in dims.iter().enumerate() {
        select[i * k + d] = 1.0;
    }
    let sel = ctx.constant(Tensor::new(vec![b, k], select)?);
    let picked = ctx.g.mul(post.mu, sel)?;
    let total = ctx.g.sum(picked)?;
    let grads = ctx.g.backward(total)?;
    let g = grads.get_or_zeros(x, &Tensor::zeros(&[b, 1, size, size]));
    let p = size * size;
    Ok((0..b)
        .map(|i| SaliencyMask::from_gradient(&g.data()[i * p..(i + 1) * p], size))
        .collect())
}

pub fn dim_saliency(model: &Model, image: &[f64], dim: usize) -> Result<SaliencyMask> {
    Ok(dim_saliencies(model, image, &[dim])?.remove(0))
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Decodes `z` with `z[dim]` swept linearly over `[lo, hi]`.
pub fn latent_traversal(model: &Model, z: &[f64], dim: usize, lo: f64, hi: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let k = model.config.vae.latent_dim;
    if z.len() != k || dim >= k {
        return Err(Error::Invalid(format!("need a {k}-dim z and dim < {k}")));
    }
    if !(lo < hi) || steps < 2 {
        return Err(Error::Invalid(format!("need lo < hi and steps ≥ 2, got [{lo}, {hi}] × {steps}")));
    }
    let mut points = Vec::with_capacity(steps * k);
    for i in 0..steps {
        let mut p = z.to_vec();
        p[dim] = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        points.extend(p);
    }
    let mut ctx = Ctx::frozen(&model.store);
    let zv = ctx.constant(Tensor::new(vec![steps, k], points)?);
    let x = model.net.vae.decode(&mut ctx, zv, Mode::Eval)?;
    let p = model.config.vae.image_size.pow(2);
    Ok(ctx.g.value(x).data().chunks(p).map(<[f64]>::to_vec).collect())
}

/// Task logits from full concept scores.
fn head_logits(model: &Model, scores: &[f64]) -> Result<Vec<f64>> {
    let mut ctx = Ctx::frozen(&model.store);
    let c = ctx.constant(Tensor::new(vec![1, scores.len()], scores.to_vec())?);
    let logits = model.net.head.predict(&mut ctx, c)?;
    Ok(ctx.g.value(logits).data().to_vec())
}

/// Replaces `scores[i]` by `truth[i]` for every index and reruns the head;
/// true when the new prediction is `label`.
pub fn intervene(model: &Model, scores: &[f64], truth: &[f64], label: usize, indices: &[usize]) -> Result<bool> {
    let n = model.net.n_annotated();
    if let Some(&i) = indices.iter().find(|&&i| i >= n || i >= truth.len()) {
        return Err(Error::Invalid(format!("intervention index {i} outside the {n} annotated concepts")));
    }
    let mut s = scores.to_vec();
    for &i in indices {
        s[i] = truth[i];
    }
    Ok(argmax(&head_logits(model, &s)?) == label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionOrder {
    /// Largest `|score − truth|` first, lower index on ties.
    MostDeviant,
    /// A seeded random permutation per sample.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub fraction_intervened: f64,
    pub corrected_rate: f64,
    pub sample_count: usize,
}

/// Corrected rate over the misclassified samples of `data` for each
/// fraction of intervened concepts. Empty when nothing is misclassified.
pub fn intervention_curve(
    model: &Model,
    data: &SplitData,
    fractions: &[f64],
    seed: u64,
    order: InterventionOrder,
) -> Result<Vec<InterventionResult>> {
    if fractions.iter().any(|p| !(0.0..=1.0).contains(p)) || fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Invalid(format!("fractions must be ascending in [0, 1], got {fractions:?}")));
    }
    let n = model.net.n_annotated();
    let pred = model.predict(&data.images, 256)?;
    let width = pred.scores.shape()[1];
    let wrong: Vec<usize> = (0..data.len()).filter(|&i| pred.predicted_class(i) != data.labels[i]).collect();
    if wrong.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = substream(seed, Stream::Intervention);
    let orders: Vec<Vec<usize>> = wrong
        .iter()
        .map(|&i| {
            let scores = &pred.scores.data()[i * width..i * width + n];
            let truth = data.concept_row(i);
            let mut idx: Vec<usize> = (0..n).collect();
            match order {
                InterventionOrder::MostDeviant => {
                    let dev = |j: usize| (scores[j] - truth[j]).abs();
                    idx.sort_by(|&a, &b| dev(b).total_cmp(&dev(a)).then(a.cmp(&b)));
                }
                InterventionOrder::Random => idx.shuffle(&mut rng),
            }
            idx
        })
        .collect();
    fractions
        .iter()
        .map(|&p| {
            let count = (p * n as f64).round() as usize;
            let mut corrected = 0;
            for (&i, idx) in wrong.iter().zip(&orders) {
                let scores = &pred.scores.data()[i * width..(i + 1) * width];
                corrected += intervene(model, scores, data.concept_row(i), data.labels[i], &idx[..count])? as usize;
            }
            Ok(InterventionResult {
                fraction_intervened: p,
                corrected_rate: corrected as f64 / wrong.len() as f64,
                sample_count: wrong.len(),
            })
        })
        .collect()
}

pub fn intervention_csv(rows: &[InterventionResult]) -> String {
    let mut s = String::from("fraction_intervened,corrected_rate,sample_count\n");
    for r in rows {
        writeln!(s, "{},{:.6},{}", r.fraction_intervened, r.corrected_rate, r.sample_count).unwrap();
    }
    s
}

/// Attribution and saliency-IoU measurements for one sample and concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptAttribution {
    pub sample: usize,
    pub concept: usize,
    pub map: AttributionMap,
    pub raw: Vec<f64>,
    pub completeness_error: f64,
    /// Mean IoU of the top-`k` dimensions' masks, per requested `k`.
    pub iou_top: Vec<f64>,
}

/// Per sample and annotated concept: IG over `z = μ` from the zero
/// baseline, then the mean mask IoU of the top dimensions against the
/// sprite mask.
pub fn attribute_samples(
    model: &Model,
    data: &SplitData,
    samples: &[usize],
    steps: usize,
    tops: &[usize],
    workers: usize,
) -> Result<Vec<ConceptAttribution>> {
    let k = model.config.vae.latent_dim;
    if let Some(&t) = tops.iter().find(|&&t| t == 0 || t > k) {
        return Err(Error::Invalid(format!("top-{t} outside 1..={k}")));
    }
    let one = |&s: &usize| -> Result<Vec<ConceptAttribution>> {
        let pred = model.predict(&data.images.rows(s, 1), 1)?;
        let z = pred.mu.data().to_vec();
        let baseline = vec![0.0; k];
        let all: Vec<usize> = (0..k).collect();
        let masks = dim_saliencies(model, data.image(s), &all)?;
        (0..model.net.n_annotated())
            .map(|c| {
                let a = integrated_gradients(&model.store, concept_score(&model.net, c), &z, &baseline, steps)?;
                let map = AttributionMap::from_attributions(&a.values);
                let iou_top = tops
                    .iter()
                    .map(|&t| {
                        let ious = map.top_k[..t]
                            .iter()
                            .map(|&d| iou(&masks[d].binary, &data.masks[s]))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(ious.iter().sum::<f64>() / t as f64)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ConceptAttribution {
                    sample: s,
                    concept: c,
                    completeness_error: a.completeness_error(),
                    raw: a.values,
                    map,
                    iou_top,
                })
            })
            .collect()
    };
    let per_sample = parallel_map(samples, workers, one)?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// Order-preserving map over `items` on up to `workers` threads.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn attribution_csv(rows: &[ConceptAttribution], concept_names: &[String], top: usize) -> String {
    let mut s = String::from("sample,concept,rank,dim,score,raw\n");
    for r in rows {
        let name = concept_names.get(r.concept).map(String::as_str).unwrap_or("?");
        for (rank, &d) in r.map.top_k.iter().take(top).enumerate() {
            writeln!(s, "{},{name},{rank},{d},{:.6},{:.6e}", r.sample, r.map.dim_scores[d], r.raw[d]).unwrap();
        }
    }
    s
}

/// Mean IoU per concept for each requested top-`k`.
pub fn iou_by_concept(rows: &[ConceptAttribution], n: usize, tops: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; tops]; n];
    let mut counts = vec![0usize; n];
    for r in rows {
        counts[r.concept] += 1;
        for (s, v) in sums[r.concept].iter_mut().zip(&r.iou_top) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect()
}

/// Mean over all rows of the IoU at position `t` of the requested tops.
pub fn mean_iou(rows: &[ConceptAttribution], t: usize) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.iou_top[t]).sum::<f64>() / rows.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task_accuracy: f64,
    pub concept_error: f64,
    pub mean_iou_top2: f64,
    pub mean_iou_top5: f64,
}

/// Binary greyscale PGM, values in `[0, 1]` mapped to 0..=255.
pub fn pgm_bytes(pixels: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Invalid(format!("{} pixels for a {width}×{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    fs::write(path, pgm_bytes(pixels, width, height)?)?;
    Ok(())
}

/// Frames side by side in one strip.
pub fn strip(frames: &[Vec<f64>], size: usize) -> Vec<f64> {
    let w = size * frames.len();
    let mut out = vec![0.0; w * size];
    for (f, frame) in frames.iter().enumerate() {
        for r in 0..size {
            out[r * w + f * size..r * w + (f + 1) * size].copy_from_slice(&frame[r * size..(r + 1) * size]);
        }
    }
    out
}
