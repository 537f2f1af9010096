use std::f64::consts::{FRAC_PI_2, TAU};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{encode_data, encode_masks, load_dataset, save_dataset, Manifest, MANIFEST_FILE};
use super::*;
use crate::error::Error;

fn spec(shape: Shape, scale: f64, orientation: f64, x: f64, y: f64) -> FactorSpec {
    FactorSpec {
        shape,
        scale,
        orientation,
        x_pos: x,
        y_pos: y,
    }
}

/// Independent brute-force pixel count for an axis-aligned square: counts
/// integer-offset pixel centers within the half-side.
fn brute_square_pixels(size: usize, scale: f64) -> usize {
    let half = 0.5 * scale * SQUARE_SIDE_FRACTION * size as f64;
    let c = size as f64 / 2.0;
    let inside_1d = (0..size).filter(|&i| (i as f64 + 0.5 - c).abs() <= half).count();
    inside_1d * inside_1d
}

#[test]
fn centered_square_pixel_count() {
    let r = render_sprite(&spec(Shape::Square, 1.0, 0.0, 0.5, 0.5), 32).unwrap();
    let side = SQUARE_SIDE_FRACTION * 32.0;
    assert_eq!(r.area(), brute_square_pixels(32, 1.0));
    assert_eq!(r.area(), (side.round() as usize).pow(2));
    assert_eq!(r.area(), 64);
    for (m, v) in r.mask.iter().zip(&r.image) {
        assert_eq!(*v, if *m { 1.0 } else { 0.0 });
    }
}

#[test]
fn square_quarter_turn_is_identical() {
    let a = render_sprite(&spec(Shape::Square, 1.0, 0.0, 0.5, 0.5), 32).unwrap();
    let b = render_sprite(&spec(Shape::Square, 1.0, FRAC_PI_2, 0.5, 0.5), 32).unwrap();
    assert_eq!(a.mask, b.mask);
}

#[test]
fn smaller_ellipse_is_strictly_contained() {
    let small = render_sprite(&spec(Shape::Ellipse, 0.5, 0.3, 0.45, 0.55), 32).unwrap();
    let large = render_sprite(&spec(Shape::Ellipse, 1.0, 0.3, 0.45, 0.55), 32).unwrap();
    assert!(small.area() > 0);
    assert!(small.mask.iter().zip(&large.mask).all(|(s, l)| !s || *l));
    assert!(small.area() < large.area());
}

#[test]
fn every_shape_renders_nonempty_at_every_size() {
    for size in SUPPORTED_SIZES {
        for shape in Shape::ALL {
            let r = render_sprite(&spec(shape, 0.5, 1.0, 0.2, 0.8), size).unwrap();
            assert!(r.area() > 0, "{shape:?} at {size}");
        }
    }
}

#[test]
fn heart_lobes_point_up() {
    let r = render_sprite(&spec(Shape::Heart, 1.0, 0.0, 0.5, 0.5), 64).unwrap();
    let rows: Vec<usize> = (0..64).filter(|&row| r.mask[row * 64..(row + 1) * 64].iter().any(|&m| m)).collect();
    let width = |row: usize| r.mask[row * 64..(row + 1) * 64].iter().filter(|&&m| m).count();
    // wide near the top, tapering to the tip at the bottom
    assert!(width(rows[2]) > width(rows[rows.len() - 2]));
}

#[test]
fn render_rejects_bad_inputs() {
    let ok = spec(Shape::Square, 1.0, 0.0, 0.5, 0.5);
    assert!(matches!(render_sprite(&ok, 28), Err(Error::Invalid(_))));
    for bad in [
        spec(Shape::Square, 1.2, 0.0, 0.5, 0.5),
        spec(Shape::Square, 1.0, TAU, 0.5, 0.5),
        spec(Shape::Square, 1.0, 0.0, 0.1, 0.5),
        spec(Shape::Square, 1.0, 0.0, 0.5, 0.9),
    ] {
        assert!(matches!(render_sprite(&bad, 32), Err(Error::FactorRange { .. })));
    }
}

#[test]
fn concept_examples() {
    let defs = default_concepts();
    let heart = derive_concepts(&spec(Shape::Heart, 0.6, 0.0, 0.3, 0.3), &defs);
    assert_eq!(&heart[..3], &[false, false, true]);
    let right = derive_concepts(&spec(Shape::Square, 0.6, 0.0, 0.7, 0.3), &defs);
    assert!(right[4]);
    let boundary = derive_concepts(&spec(Shape::Square, 0.75, 0.0, 0.5, 0.5), &defs);
    assert!(!boundary[3] && !boundary[4] && !boundary[5]);
}

#[test]
fn task_label_is_conjunction() {
    assert_eq!(derive_task_label(true, true), 1);
    assert_eq!(derive_task_label(true, false), 0);
    assert_eq!(derive_task_label(false, true), 0);
    assert_eq!(derive_task_label(false, false), 0);
}

#[test]
fn parse_conditions_and_tasks() {
    let t: TaskDef = "shape=square, x>0.5".parse().unwrap();
    assert_eq!(t, TaskDef::default());
    assert_eq!(t.to_string().parse::<TaskDef>().unwrap(), t);
    assert_eq!(t.concept_indices(&default_concepts()), Some((0, 4)));
    assert!("x>0.5,x<0.7".parse::<TaskDef>().is_err());
    assert!("shape>0.5,x>0.5".parse::<TaskDef>().is_err());
    assert!("scale=heart,x>0.5".parse::<TaskDef>().is_err());
    assert!("shape=circle,x>0.5".parse::<TaskDef>().is_err());
    let c: Condition = "scale<0.6".parse().unwrap();
    assert_eq!(c.criterion, Criterion::Below(0.6));
}

#[test]
fn positive_rate_matches_product_of_marginals() {
    // P(square) · P(x > 0.5) under independent uniform factors
    let expected = (1.0 / 3.0) * ((POS_RANGE.1 - 0.5) / (POS_RANGE.1 - POS_RANGE.0));
    let task = TaskDef::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let hits = (0..draws).filter(|_| task.label(&FactorSpec::sample(&mut rng)) == 1).count();
    let rate = hits as f64 / draws as f64;
    let sd = (expected * (1.0 - expected) / draws as f64).sqrt();
    assert!((rate - expected).abs() < 5.0 * sd, "rate {rate} vs {expected}");
}

fn small_dataset(seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec::new(1000, 16, TaskDef::default(), seed)).unwrap()
}

#[test]
fn dataset_split_balance_and_invariants() {
    let ds = small_dataset(3);
    assert_eq!(ds.train_indices.len(), 700);
    assert_eq!(ds.test_indices.len(), 300);
    let mut all: Vec<usize> = ds.train_indices.iter().chain(&ds.test_indices).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    let pos = ds.samples.iter().filter(|s| s.task_label == 1).count() as f64 / 1000.0;
    assert!((0.45..=0.55).contains(&pos));
    for s in &ds.samples {
        assert!(s.shape_mask.iter().any(|&m| m));
        s.factors.validate().unwrap();
        assert_eq!(s.task_label, ds.spec.task.label(&s.factors));
        assert_eq!(s.concept_labels, derive_concepts(&s.factors, &ds.spec.concepts));
    }
}

#[test]
fn dataset_is_deterministic_and_seed_sensitive() {
    let a = small_dataset(5);
    let b = small_dataset(5);
    assert_eq!(encode_data(&a), encode_data(&b));
    assert_eq!(encode_masks(&a), encode_masks(&b));
    assert_ne!(encode_data(&a), encode_data(&small_dataset(6)));
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn factor_correlations_are_small_off_the_task_pair() {
    let ds = generate_dataset(&DatasetSpec::new(3000, 16, TaskDef::default(), 8)).unwrap();
    // shape enters as the indicator the task tests; the other shape
    // indicators are tied to it, so shape stands for all three
    let cols: Vec<(Factor, Vec<f64>)> = vec![
        (Factor::Shape, ds.samples.iter().map(|s| f64::from(u8::from(s.factors.shape == Shape::Square))).collect()),
        (Factor::Scale, ds.samples.iter().map(|s| s.factors.scale).collect()),
        (Factor::Orientation, ds.samples.iter().map(|s| s.factors.orientation).collect()),
        (Factor::X, ds.samples.iter().map(|s| s.factors.x_pos).collect()),
        (Factor::Y, ds.samples.iter().map(|s| s.factors.y_pos).collect()),
    ];
    let task = (ds.spec.task.a.factor, ds.spec.task.b.factor);
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            let pair = (cols[i].0, cols[j].0);
            if pair == task || (pair.1, pair.0) == task {
                continue;
            }
            let r = pearson(&cols[i].1, &cols[j].1);
            assert!(r.abs() < 0.1, "{pair:?}: r = {r}");
        }
    }
}

#[test]
fn large_sprites_cover_more_pixels_per_shape() {
    let ds = generate_dataset(&DatasetSpec::new(1500, 32, TaskDef::default(), 2)).unwrap();
    for shape in Shape::ALL {
        let mean = |large: bool| {
            let areas: Vec<f64> = ds
                .samples
                .iter()
                .filter(|s| s.factors.shape == shape && s.concept_labels[3] == large)
                .map(|s| s.shape_mask.iter().filter(|&&m| m).count() as f64)
                .collect();
            areas.iter().sum::<f64>() / areas.len() as f64
        };
        assert!(mean(true) > mean(false), "{shape:?}");
    }
}

#[test]
fn generation_errors() {
    let small = DatasetSpec::new(10, 32, TaskDef::default(), 0);
    assert!(matches!(generate_dataset(&small), Err(Error::Invalid(_))));
    let impossible: TaskDef = "x>0.8,y>0.5".parse().unwrap();
    let r = generate_dataset(&DatasetSpec::new(200, 32, impossible, 0));
    assert!(matches!(r, Err(Error::Unsatisfiable(_))));
}

#[test]
fn files_round_trip_and_regenerate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(9);
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, ds);
    let read = Manifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read, manifest);
    let again = generate_dataset(&read.spec()).unwrap();
    assert_eq!(encode_data(&again), encode_data(&ds));
    assert_eq!(encode_masks(&again), encode_masks(&ds));
}

#[test]
fn split_tensors_match_samples() {
    let ds = small_dataset(4);
    let test = ds.test();
    assert_eq!(test.images.shape(), &[300, 1, 16, 16]);
    assert_eq!(test.concepts.shape(), &[300, 6]);
    let i = ds.test_indices[7];
    assert_eq!(test.image(7), ds.samples[i].image.as_slice());
    assert_eq!(test.labels[7], ds.samples[i].task_label as usize);
    let w = ds.train().pos_weights();
    assert!(w.iter().all(|v| (0.1..=10.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_shifts_mask(
        shape_idx in 0usize..3,
        scale in 0.5f64..=1.0,
        orientation in 0.0f64..TAU,
        x in 0.3f64..0.5,
        y in 0.2f64..=0.8,
        d in 1i32..=6,
    ) {
        let size = 32;
        let base = spec(Shape::ALL[shape_idx], scale, orientation, x, y);
        let moved = FactorSpec { x_pos: x + f64::from(d) / size as f64, ..base };
        let a = render_sprite(&base, size).unwrap();
        let b = render_sprite(&moved, size).unwrap();
        let d = d as usize;
        for row in 0..size {
            for col in 0..size - d {
                prop_assert_eq!(a.mask[row * size + col], b.mask[row * size + col + d]);
            }
        }
        prop_assert_eq!(a.area(), b.area());
    }

    #[test]
    fn sampled_factors_are_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let f = FactorSpec::sample(&mut rng);
            prop_assert!(f.validate().is_ok());
            prop_assert!(render_sprite(&f, 16).unwrap().area() > 0);
        }
    }
}
