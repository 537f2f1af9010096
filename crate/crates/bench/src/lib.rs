//! Shared inputs for the benchmarks.

use colidr::ndgrad::Tensor;
use colidr::spritegen::{generate_dataset, DatasetSpec, SplitData, TaskDef};

/// Deterministic pseudo-random tensor with values in `[-1, 1]`.
pub fn filled(shape: &[usize], salt: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + salt) * 0.7381).sin()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Training split of a small desk-size dataset.
pub fn sprites(count: usize, size: usize) -> SplitData {
    let task: TaskDef = "shape=square,x>0.5".parse().expect("valid task");
    generate_dataset(&DatasetSpec::new(count, size, task, 0)).expect("satisfiable task").train()
}
