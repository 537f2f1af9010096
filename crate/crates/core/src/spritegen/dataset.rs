use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{default_concepts, derive_concepts, render_sprite, ConceptDef, FactorSpec, TaskDef};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::{substream, Stream};

pub const MIN_COUNT: usize = 100;
pub const TRAIN_FRACTION: f64 = 0.7;
/// Below this positive rate a task counts as unsatisfiable.
pub const MIN_POSITIVE_RATE: f64 = 0.01;
const PILOT_DRAWS: usize = 10_000;

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub task: TaskDef,
    pub concepts: Vec<ConceptDef>,
}

impl DatasetSpec {
    pub fn new(count: usize, size: usize, task: TaskDef, seed: u64) -> Self {
        Self {
            count,
            size,
            seed,
            task,
            concepts: default_concepts(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSample {
    pub image: Vec<f64>,
    pub factors: FactorSpec,
    pub concept_labels: Vec<bool>,
    pub task_label: u8,
    pub shape_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// In generation order.
    pub samples: Vec<SpriteSample>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Label-balanced rejection sampling: factors are drawn independently and a
/// draw is kept only while its label's quota (half of `count`) is open.
/// Only the joint law of the two task factors is altered by the rejection.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.count < MIN_COUNT {
        return Err(Error::Invalid(format!("count {} is below the minimum {MIN_COUNT}", spec.count)));
    }
    if spec.concepts.is_empty() {
        return Err(Error::Invalid("no concept definitions".into()));
    }
    TaskDef::new(spec.task.a, spec.task.b)?;

    let mut pilot = substream(spec.seed, Stream::Pilot);
    let hits = (0..PILOT_DRAWS)
        .filter(|_| spec.task.label(&FactorSpec::sample(&mut pilot)) == 1)
        .count();
    let rate = hits as f64 / PILOT_DRAWS as f64;
    if rate < MIN_POSITIVE_RATE {
        return Err(Error::Unsatisfiable(format!(
            "task {} has positive rate {rate:.4} < {MIN_POSITIVE_RATE}",
            spec.task
        )));
    }

    let mut rng = substream(spec.seed, Stream::Data);
    let mut quota = [spec.count - spec.count / 2, spec.count / 2];
    let max_attempts = spec.count.saturating_mul(200);
    let mut samples = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while samples.len() < spec.count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Unsatisfiable(format!(
                "task {} not balanced after {max_attempts} draws",
                spec.task
            )));
        }
        let factors = FactorSpec::sample(&mut rng);
        let label = spec.task.label(&factors);
        if quota[label as usize] == 0 {
            continue;
        }
        quota[label as usize] -= 1;
        let r = render_sprite(&factors, spec.size)?;
        samples.push(SpriteSample {
            image: r.image,
            factors,
            concept_labels: derive_concepts(&factors, &spec.concepts),
            task_label: label,
            shape_mask: r.mask,
        });
    }

    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut substream(spec.seed, Stream::Split));
    let n_train = (spec.count as f64 * TRAIN_FRACTION).round() as usize;
    let mut train_indices = order[..n_train].to_vec();
    let mut test_indices = order[n_train..].to_vec();
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    Ok(Dataset {
        spec: spec.clone(),
        samples,
        train_indices,
        test_indices,
    })
}

/// Tensor view of one split, the form consumed by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub size: usize,
    /// `(N, 1, size, size)`.
    pub images: Tensor,
    /// `(N, n)` in {0, 1}.
    pub concepts: Tensor,
    pub labels: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub factors: Vec<FactorSpec>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.shape()[1]
    }

    pub fn concept_row(&self, i: usize) -> &[f64] {
        let n = self.n_concepts();
        &self.concepts.data()[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.size * self.size;
        &self.images.data()[i * p..(i + 1) * p]
    }

    pub fn subset(&self, idx: &[usize]) -> SplitData {
        SplitData {
            size: self.size,
            images: self.images.gather_rows(idx),
            concepts: self.concepts.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            factors: idx.iter().map(|&i| self.factors[i]).collect(),
        }
    }

    /// Per-concept positive weights `negatives / positives`, clipped to
    /// `[0.1, 10]`.
    pub fn pos_weights(&self) -> Vec<f64> {
        let n = self.n_concepts();
        (0..n)
            .map(|j| {
                let pos = (0..self.len()).filter(|&i| self.concept_row(i)[j] > 0.5).count();
                let neg = self.len() - pos;
                if pos == 0 {
                    10.0
                } else {
                    (neg as f64 / pos as f64).clamp(0.1, 10.0)
                }
            })
            .collect()
    }
}

impl Dataset {
    pub fn split(&self, indices: &[usize]) -> SplitData {
        let size = self.spec.size;
        let n = self.spec.concepts.len();
        let mut images = Vec::with_capacity(indices.len() * size * size);
        let mut concepts = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let s = &self.samples[i];
            images.extend_from_slice(&s.image);
            concepts.extend(s.concept_labels.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        SplitData {
            size,
            images: Tensor::new(vec![indices.len(), 1, size, size], images).expect("image tensor"),
            concepts: Tensor::new(vec![indices.len(), n], concepts).expect("concept tensor"),
            labels: indices.iter().map(|&i| self.samples[i].task_label as usize).collect(),
            masks: indices.iter().map(|&i| self.samples[i].shape_mask.clone()).collect(),
            factors: indices.iter().map(|&i| self.samples[i].factors).collect(),
        }
    }

    pub fn train(&self) -> SplitData {
        self.split(&self.train_indices)
    }

    pub fn test(&self) -> SplitData {
        self.split(&self.test_indices)
    }
}
