//! On-disk dataset layout: `data.cldr` (tensor container, one block of
//! tensors per split), `masks.cldm` (packed bitmaps, same block order) and
//! `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConceptDef, Dataset, DatasetSpec, FactorSpec, SpriteSample, TaskDef};
use crate::error::{Error, Result};
use crate::ndgrad::{checkpoint, Tensor};

pub const DATA_FILE: &str = "data.cldr";
pub const MASK_FILE: &str = "masks.cldm";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MASK_MAGIC: &[u8; 4] = b"CLDM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
    pub task: TaskDef,
    pub concepts: Vec<ConceptDef>,
    pub split: SplitIndices,
    /// Ground-truth spatial extent used for every concept.
    pub concept_masks: String,
    pub data_file: String,
    pub mask_file: String,
}

impl Manifest {
    pub fn for_dataset(ds: &Dataset) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            seed: ds.spec.seed,
            size: ds.spec.size,
            count: ds.spec.count,
            task: ds.spec.task,
            concepts: ds.spec.concepts.clone(),
            split: SplitIndices {
                train: ds.train_indices.clone(),
                test: ds.test_indices.clone(),
            },
            concept_masks: "all concepts share the sprite shape_mask".into(),
            data_file: DATA_FILE.into(),
            mask_file: MASK_FILE.into(),
        }
    }

    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.count,
            size: self.size,
            seed: self.seed,
            task: self.task,
            concepts: self.concepts.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                expected: DATASET_FORMAT_VERSION,
                found: m.format_version,
            });
        }
        Ok(m)
    }
}

const SPLITS: [&str; 2] = ["train", "test"];

fn split_indices(ds: &Dataset, split: &str) -> Vec<usize> {
    if split == "train" {
        ds.train_indices.clone()
    } else {
        ds.test_indices.clone()
    }
}

pub fn encode_data(ds: &Dataset) -> Vec<u8> {
    let size = ds.spec.size;
    let n = ds.spec.concepts.len();
    let mut tensors = Vec::new();
    for split in SPLITS {
        let idx = split_indices(ds, split);
        let rows = idx.len();
        let pick = |f: &dyn Fn(&SpriteSample) -> Vec<f64>| idx.iter().flat_map(|&i| f(&ds.samples[i])).collect();
        let images = pick(&|s| s.image.clone());
        let concepts = pick(&|s| s.concept_labels.iter().map(|&b| f64::from(u8::from(b))).collect());
        let labels = pick(&|s| vec![f64::from(s.task_label)]);
        let factors = pick(&|s| s.factors.to_row().to_vec());
        let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("split tensor");
        tensors.push((format!("{split}.images"), t(vec![rows, size, size], images)));
        tensors.push((format!("{split}.concepts"), t(vec![rows, n], concepts)));
        tensors.push((format!("{split}.labels"), t(vec![rows], labels)));
        tensors.push((format!("{split}.factors"), t(vec![rows, 5], factors)));
    }
    checkpoint::encode(&tensors)
}

pub fn encode_masks(ds: &Dataset) -> Vec<u8> {
    let size = ds.spec.size;
    let bytes_per_mask = (size * size).div_ceil(8);
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(SPLITS.len() as u32).to_le_bytes());
    for split in SPLITS {
        let idx = split_indices(ds, split);
        out.extend_from_slice(&(split.len() as u32).to_le_bytes());
        out.extend_from_slice(split.as_bytes());
        for v in [idx.len(), size, size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &i in &idx {
            let mut packed = vec![0u8; bytes_per_mask];
            for (p, &bit) in ds.samples[i].shape_mask.iter().enumerate() {
                if bit {
                    packed[p / 8] |= 1 << (p % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
    }
    out
}

fn decode_masks(bytes: &[u8]) -> Result<Vec<(String, Vec<Vec<bool>>)>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(Error::Format("truncated mask container".into()));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != MASK_MAGIC {
        return Err(Error::Format("bad magic, not a CLDM mask container".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            expected: DATASET_FORMAT_VERSION,
            found: version,
        });
    }
    let blocks = u32_at(take(4)?);
    let mut out = Vec::new();
    for _ in 0..blocks {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let count = u32_at(take(4)?) as usize;
        let h = u32_at(take(4)?) as usize;
        let w = u32_at(take(4)?) as usize;
        let per = (h * w).div_ceil(8);
        let mut masks = Vec::with_capacity(count);
        for _ in 0..count {
            let packed = take(per)?;
            masks.push((0..h * w).map(|p| packed[p / 8] >> (p % 8) & 1 == 1).collect());
        }
        out.push((name, masks));
    }
    Ok(out)
}

/// Writes the three dataset files into `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest::for_dataset(ds);
    fs::write(dir.join(DATA_FILE), encode_data(ds))?;
    fs::write(dir.join(MASK_FILE), encode_masks(ds))?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir.join(MANIFEST_FILE))?;
    let tensors = checkpoint::load(dir.join(&manifest.data_file))?;
    let masks = decode_masks(&fs::read(dir.join(&manifest.mask_file))?)?;
    let get = |name: String| {
        tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("dataset is missing {name}")))
    };
    let spec = manifest.spec();
    let pixels = spec.size * spec.size;
    let n = spec.concepts.len();
    let mut slots: Vec<Option<SpriteSample>> = vec![None; spec.count];
    for (split, idx) in [("train", &manifest.split.train), ("test", &manifest.split.test)] {
        let images = get(format!("{split}.images"))?;
        let concepts = get(format!("{split}.concepts"))?;
        let labels = get(format!("{split}.labels"))?;
        let factors = get(format!("{split}.factors"))?;
        let split_masks = &masks
            .iter()
            .find(|(name, _)| name == split)
            .ok_or_else(|| Error::Format(format!("mask container is missing {split}")))?
            .1;
        if images.len() != idx.len() * pixels || split_masks.len() != idx.len() || labels.len() != idx.len() {
            return Err(Error::Format(format!("{split}: record counts disagree with manifest")));
        }
        for (row, &i) in idx.iter().enumerate() {
            let slot = slots
                .get_mut(i)
                .ok_or_else(|| Error::Format(format!("split index {i} out of range")))?;
            *slot = Some(SpriteSample {
                image: images.data()[row * pixels..(row + 1) * pixels].to_vec(),
                factors: FactorSpec::from_row(&factors.data()[row * 5..(row + 1) * 5])?,
                concept_labels: concepts.data()[row * n..(row + 1) * n].iter().map(|&v| v > 0.5).collect(),
                task_label: labels.data()[row] as u8,
                shape_mask: split_masks[row].clone(),
            });
        }
    }
    let samples = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Format(format!("sample {i} is in no split"))))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec,
        samples,
        train_indices: manifest.split.train,
        test_indices: manifest.split.test,
    })
}
