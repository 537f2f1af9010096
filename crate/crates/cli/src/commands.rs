use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use colidr::model::Model;
use colidr::spritegen::io::{load_dataset, save_dataset, Manifest, MANIFEST_FILE};
use colidr::spritegen::{generate_dataset, Dataset, DatasetSpec, SplitData, TaskDef};
use colidr::trainer::{evaluate, stage_checkpoint_name, train, TrainConfig, METRICS_FILE, TIMINGS_FILE};
use colidr::xeval::{
    attribute_samples, attribution_csv, concept_error, dim_saliencies, intervention_csv, intervention_curve,
    iou_by_concept, latent_traversal, mean_iou, strip, write_pgm, ConceptErrorKind, EvalSummary,
};

use crate::manifest::{sha256_file, unix_now, version, DatasetRef, Outputs, RunManifest, RUN_MANIFEST_FILE, SUBSTREAMS};
use crate::{AttributeArgs, Command, EvalArgs, GenerateArgs, InterveneArgs, ModelArgs, TrainArgs, TraverseArgs};

/// A mistake in the invocation or its inputs, as opposed to a failure of
/// the program itself.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// 1 for bad input (flags, configs, files), 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    use colidr::Error as E;
    for cause in e.chain() {
        if cause.is::<UserError>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Invalid(_)
                | E::FactorRange { .. }
                | E::Unsatisfiable(_)
                | E::Format(_)
                | E::Version { .. }
                | E::Json(_) => 1,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound { 1 } else { 2 };
        }
    }
    2
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Attribute(a) => attribute(a),
        Command::Traverse(a) => traverse(a),
        Command::Intervene(a) => intervene(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let task: TaskDef = a.task.parse()?;
    let ds = generate_dataset(&DatasetSpec::new(a.count, a.size, task, a.seed))?;
    create_dir(&a.out)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        a.count,
        ds.train_indices.len(),
        ds.test_indices.len(),
        a.out.display()
    );
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(user(format!("no dataset at {} (missing {MANIFEST_FILE})", dir.display())));
    }
    let manifest = Manifest::load(&manifest_path).with_context(|| format!("dataset {}", dir.display()))?;
    let ds = load_dataset(dir).with_context(|| format!("dataset {}", dir.display()))?;
    Ok((ds, manifest))
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let bytes = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("config {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(ablation) = a.ablation {
        cfg.ablation = ablation;
    }
    cfg.validate()?;
    let (ds, manifest) = read_dataset(&a.data)?;
    if manifest.size != cfg.model.vae.image_size {
        return Err(user(format!(
            "dataset images are {0}×{0} but the model expects {1}×{1}",
            manifest.size, cfg.model.vae.image_size
        )));
    }
    create_dir(&a.out)?;
    let mut run = RunManifest {
        version: version(),
        seed: cfg.seed,
        substreams: SUBSTREAMS.iter().map(|s| s.to_string()).collect(),
        effective: cfg.effective(),
        config: cfg.clone(),
        dataset: DatasetRef::new(&a.data, &manifest)?,
        outputs: Outputs {
            dir: a.out.clone(),
            checkpoints: (1..=3).map(stage_checkpoint_name).collect(),
            metrics: METRICS_FILE.into(),
            timings: TIMINGS_FILE.into(),
        },
        started_unix: unix_now(),
        finished_unix: None,
        final_checkpoint_sha256: None,
    };
    run.write(&a.out)?;
    let (model, log) = train(&ds.train(), &cfg, Some(&a.out))?;
    let test = evaluate(&model, &ds.test())?;
    run.finished_unix = Some(unix_now());
    run.final_checkpoint_sha256 = Some(sha256_file(&a.out.join(stage_checkpoint_name(3)))?);
    run.write(&a.out)?;
    if let Some(last) = log.last() {
        println!(
            "stage {} epoch {}: total {:.4}, train accuracy {:.4}",
            last.stage, last.epoch, last.terms.total, last.task_accuracy
        );
    }
    println!(
        "test accuracy {:.4}, concept rmse {:.4}; outputs in {}",
        test.task_accuracy,
        test.concept_error,
        a.out.display()
    );
    Ok(())
}

struct Loaded {
    model: Model,
    dataset: Dataset,
    data: SplitData,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => {
            let dir = a.ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            let path = dir.join(RUN_MANIFEST_FILE);
            if !path.exists() {
                return Err(user(format!(
                    "no {RUN_MANIFEST_FILE} next to {}; pass --config",
                    a.ckpt.display()
                )));
            }
            RunManifest::load(&path)?.config
        }
    };
    if !a.ckpt.exists() {
        return Err(user(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let model = Model::load(&a.ckpt, &cfg.model).with_context(|| format!("checkpoint {}", a.ckpt.display()))?;
    let (dataset, _) = read_dataset(&a.data)?;
    let data = if a.split == "train" { dataset.train() } else { dataset.test() };
    if data.size != model.config.vae.image_size || data.n_concepts() != model.net.n_annotated() {
        return Err(user(format!(
            "dataset ({0}×{0}, {1} concepts) does not match the checkpoint ({2}×{2}, {3} concepts)",
            data.size,
            data.n_concepts(),
            model.config.vae.image_size,
            model.net.n_annotated()
        )));
    }
    Ok(Loaded { model, dataset, data })
}

fn concept_names(ds: &Dataset) -> Vec<String> {
    ds.spec.concepts.iter().map(|c| c.name.clone()).collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let metrics = evaluate(&l.model, &l.data)?;
    let concept_err = match a.error_kind {
        ConceptErrorKind::Rmse => metrics.concept_error,
        kind => {
            let p = l.model.predict(&l.data.images, 256)?;
            let n = l.model.net.n_annotated();
            let width = p.scores.shape()[1];
            let scores: Vec<f64> = (0..l.data.len())
                .flat_map(|i| p.scores.data()[i * width..i * width + n].to_vec())
                .collect();
            concept_error(&scores, l.data.concepts.data(), kind)?
        }
    };
    let samples: Vec<usize> = (0..a.iou_samples.min(l.data.len())).collect();
    let rows = attribute_samples(&l.model, &l.data, &samples, a.steps, &[2, 5], a.model.workers)?;
    let summary = EvalSummary {
        task_accuracy: metrics.task_accuracy,
        concept_error: concept_err,
        mean_iou_top2: mean_iou(&rows, 0),
        mean_iou_top5: mean_iou(&rows, 1),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    println!("{json}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        fs::write(out.join("summary.json"), json + "\n")?;
        let names = concept_names(&l.dataset);
        let mut csv = String::from("concept,iou_top2,iou_top5\n");
        for (name, v) in names.iter().zip(iou_by_concept(&rows, names.len(), 2)) {
            csv += &format!("{name},{:.6},{:.6}\n", v[0], v[1]);
        }
        fs::write(out.join("iou_by_concept.csv"), csv)?;
    }
    Ok(())
}

fn check_samples(samples: &[usize], len: usize) -> Result<()> {
    match samples.iter().find(|&&s| s >= len) {
        Some(s) => Err(user(format!("sample {s} out of range for a split of {len}"))),
        None => Ok(()),
    }
}

fn attribute(a: AttributeArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let names = concept_names(&l.dataset);
    let concept = names
        .iter()
        .position(|n| *n == a.concept)
        .ok_or_else(|| user(format!("unknown concept {:?} (expected one of {})", a.concept, names.join(", "))))?;
    check_samples(&a.samples, l.data.len())?;
    let k = l.model.net.latent_dim();
    if a.top == 0 || a.top > k {
        return Err(user(format!("--top must be in 1..={k}")));
    }
    let rows: Vec<_> = attribute_samples(&l.model, &l.data, &a.samples, a.steps, &[a.top], a.model.workers)?
        .into_iter()
        .filter(|r| r.concept == concept)
        .collect();
    create_dir(&a.out)?;
    fs::write(a.out.join("attribution.csv"), attribution_csv(&rows, &names, a.top))?;
    let size = l.data.size;
    let mut iou_csv = String::from("sample,concept,mean_iou_top\n");
    for r in &rows {
        let dims = &r.map.top_k[..a.top];
        for (d, mask) in dims.iter().zip(dim_saliencies(&l.model, l.data.image(r.sample), dims)?) {
            write_pgm(a.out.join(format!("sample{}_dim{d}.pgm", r.sample)), &mask.heat, size, size)?;
        }
        iou_csv += &format!("{},{},{:.6}\n", r.sample, a.concept, r.iou_top[0]);
    }
    fs::write(a.out.join("iou.csv"), iou_csv)?;
    println!("wrote attributions for {} sample(s) to {}", rows.len(), a.out.display());
    Ok(())
}

fn traverse(a: TraverseArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    check_samples(&[a.sample], l.data.len())?;
    let k = l.model.net.latent_dim();
    let dims: Vec<usize> = if a.dims.is_empty() { (0..k).collect() } else { a.dims.clone() };
    let z = l.model.predict(&l.data.images.rows(a.sample, 1), 1)?.mu.data().to_vec();
    create_dir(&a.out)?;
    let size = l.data.size;
    for &d in &dims {
        let frames = latent_traversal(&l.model, &z, d, a.lo, a.hi, a.steps)?;
        write_pgm(a.out.join(format!("traverse_dim{d}.pgm")), &strip(&frames, size), size * frames.len(), size)?;
    }
    println!("wrote {} traversal strip(s) to {}", dims.len(), a.out.display());
    Ok(())
}

fn intervene(a: InterveneArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let rows = intervention_curve(&l.model, &l.data, &a.fractions, a.seed, a.order)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("intervention.csv"), intervention_csv(&rows))?;
    if rows.is_empty() {
        println!("no misclassified samples; the curve is empty");
    } else {
        for r in &rows {
            println!("{:.2} {:.4}", r.fraction_intervened, r.corrected_rate);
        }
    }
    Ok(())
}
