use colidr::aggdec::AggDecConfig;
use colidr::drl::VaeConfig;
use colidr::model::{Architecture, Model, ModelConfig};
use colidr::ndgrad::Tensor;
use colidr::nn::{Ctx, Mode};
use colidr::spritegen::{generate_dataset, DatasetSpec, SplitData, TaskDef};
use colidr::xeval::*;
use proptest::prelude::*;

fn small_model() -> ModelConfig {
    ModelConfig {
        vae: VaeConfig {
            image_size: 16,
            latent_dim: 6,
            filters: vec![4, 8, 8],
        },
        aggdec: AggDecConfig {
            n_annotated: 6,
            n_total: 8,
            hidden: vec![6, 6],
        },
        classes: 2,
    }
}

fn model(seed: u64) -> Model {
    Model::new(&small_model(), Architecture::Concept, seed).unwrap()
}

fn test_split(seed: u64) -> SplitData {
    let task: TaskDef = "shape=square,x>0.5".parse().unwrap();
    generate_dataset(&DatasetSpec::new(200, 16, task, seed)).unwrap().test()
}

/// Head that computes `is_square ∧ is_right` exactly from true concepts.
fn oracle_head(m: &mut Model) {
    let w = m.net.head.h.w;
    let b = m.net.head.h.b;
    let mut weights = vec![0.0; 12];
    weights[6] = 10.0;
    weights[6 + 4] = 10.0;
    m.store.set(w, Tensor::new(vec![2, 6], weights).unwrap()).unwrap();
    m.store.set(b, Tensor::from_vec(vec![0.0, -15.0])).unwrap();
}

#[test]
fn concept_error_examples() {
    let labels = [1.0, 0.0, 1.0, 0.0];
    for kind in [ConceptErrorKind::Rmse, ConceptErrorKind::ZeroOne] {
        assert_eq!(concept_error(&labels, &labels, kind).unwrap(), 0.0);
    }
    assert_eq!(concept_error(&[0.5; 4], &labels, ConceptErrorKind::Rmse).unwrap(), 0.5);
    assert_eq!(concept_error(&[0.9, 0.2], &[1.0, 1.0], ConceptErrorKind::ZeroOne).unwrap(), 0.5);
    assert!(concept_error(&[0.9], &[1.0, 1.0], ConceptErrorKind::Rmse).is_err());
    assert!("hamming".parse::<ConceptErrorKind>().is_err());
    assert_eq!("zero_one".parse::<ConceptErrorKind>().unwrap(), ConceptErrorKind::ZeroOne);
}

fn linear_score(w: Vec<f64>) -> impl FnMut(&mut Ctx, colidr::ndgrad::Var) -> colidr::Result<colidr::ndgrad::Var> {
    move |ctx, z| {
        let k = w.len();
        let wv = ctx.constant(Tensor::new(vec![1, k], w.clone()).unwrap());
        let b = ctx.constant(Tensor::from_vec(vec![0.25]));
        ctx.g.linear(z, wv, b)
    }
}

#[test]
fn quadratic_completeness() {
    let store = colidr::ndgrad::ParamStore::new();
    for steps in [1, 8, 128] {
        let a = integrated_gradients(&store, |ctx, z| ctx.g.square(z), &[2.0], &[0.0], steps).unwrap();
        assert!((a.values[0] - 4.0).abs() < 1e-12, "{steps}: {}", a.values[0]);
        assert_eq!((a.f_input, a.f_baseline), (4.0, 0.0));
    }
    assert!(integrated_gradients(&store, |ctx, z| ctx.g.square(z), &[2.0], &[0.0], 0).is_err());
    assert!(integrated_gradients(&store, |ctx, z| ctx.g.square(z), &[2.0], &[0.0, 1.0], 8).is_err());
}

/// Direct path integral: central-difference gradients of `F` along the
/// straight path, integrated with composite Simpson on 2000 panels.
fn brute_ig(f: &dyn Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
    let k = z.len();
    let panels = 2000;
    let h = 1e-5;
    (0..k)
        .map(|j| {
            let grad_at = |alpha: f64| {
                let mut p: Vec<f64> = z.iter().map(|v| alpha * v).collect();
                p[j] += h;
                let up = f(&p);
                p[j] -= 2.0 * h;
                (up - f(&p)) / (2.0 * h)
            };
            let mut s = grad_at(0.0) + grad_at(1.0);
            for i in 1..panels {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * grad_at(i as f64 / panels as f64);
            }
            z[j] * s / (3.0 * panels as f64)
        })
        .collect()
}

#[test]
fn concept_score_attributions_match_a_direct_path_integral() {
    let m = model(3);
    let z = [0.8, -1.2, 0.3, 1.5, -0.4, 0.9];
    let f = |p: &[f64]| {
        let mut ctx = Ctx::frozen(&m.store);
        let zv = ctx.constant(Tensor::new(vec![1, 6], p.to_vec()).unwrap());
        let c = m.net.concepts_from_z(&mut ctx, zv).unwrap();
        ctx.g.value(c.scores).data()[2]
    };
    let oracle = brute_ig(&f, &z);
    let a = integrated_gradients(&m.store, concept_score(&m.net, 2), &z, &[0.0; 6], 1024).unwrap();
    let scale = oracle.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for (got, want) in a.values.iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-3 * scale, "{got} vs {want}");
    }
    assert!((a.f_input - f(&z)).abs() < 1e-12 && (a.f_baseline - f(&[0.0; 6])).abs() < 1e-12);
    assert!(a.completeness_error() < 0.01, "{}", a.completeness_error());
}

proptest! {
    #[test]
    fn linear_scores_are_attributed_exactly(
        wz in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..8),
        steps in 1usize..64,
    ) {
        let (w, z): (Vec<f64>, Vec<f64>) = wz.into_iter().unzip();
        let store = colidr::ndgrad::ParamStore::new();
        let a = integrated_gradients(&store, linear_score(w.clone()), &z, &vec![0.0; z.len()], steps).unwrap();
        for j in 0..z.len() {
            prop_assert!((a.values[j] - w[j] * z[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_reflexive(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200),
    ) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.iter().any(|&x| x) {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn rmse_vanishes_only_at_equality(
        labels in prop::collection::vec(any::<bool>(), 1..30),
        idx in any::<prop::sample::Index>(),
        delta in 1e-9f64..0.5,
    ) {
        let labels: Vec<f64> = labels.into_iter().map(|b| b as u8 as f64).collect();
        prop_assert_eq!(concept_error(&labels, &labels, ConceptErrorKind::Rmse).unwrap(), 0.0);
        let mut scores = labels.clone();
        let i = idx.index(scores.len());
        scores[i] = (scores[i] - delta).abs();
        prop_assert!(concept_error(&scores, &labels, ConceptErrorKind::Rmse).unwrap() > 0.0);
    }

    #[test]
    fn attribution_maps_are_normalized(values in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let map = AttributionMap::from_attributions(&values);
        prop_assert!(map.dim_scores.iter().all(|s| (0.0..=1.0).contains(s)));
        if values.iter().any(|&v| v != 0.0) {
            prop_assert_eq!(map.dim_scores.iter().cloned().fold(0.0, f64::max), 1.0);
        }
        let k = values.len();
        prop_assert_eq!(top_k_dims(&map, k).unwrap(), map.top_k.clone());
        for w in map.top_k.windows(2) {
            prop_assert!(map.dim_scores[w[0]] >= map.dim_scores[w[1]]);
        }
    }
}

#[test]
fn top_k_examples() {
    let map = |s: Vec<f64>| AttributionMap::from_attributions(&s);
    assert_eq!(top_k_dims(&map(vec![0.1, 0.5, 0.3]), 2).unwrap(), vec![1, 2]);
    assert_eq!(top_k_dims(&map(vec![0.4; 4]), 2).unwrap(), vec![0, 1]);
    assert_eq!(top_k_dims(&map(vec![0.2, -0.9, 0.5]), 3).unwrap(), vec![1, 2, 0]);
    assert!(top_k_dims(&map(vec![0.2, 0.1]), 0).is_err());
    assert!(top_k_dims(&map(vec![0.2, 0.1]), 3).is_err());
    assert_eq!(map(vec![0.0, 0.0]).dim_scores, vec![0.0, 0.0]);
}

#[test]
fn iou_examples() {
    let mask = |on: std::ops::Range<usize>| (0..300).map(|i| on.contains(&i)).collect::<Vec<_>>();
    assert_eq!(iou(&mask(10..60), &mask(10..60)).unwrap(), 1.0);
    assert_eq!(iou(&mask(0..10), &mask(20..30)).unwrap(), 0.0);
    assert!((iou(&mask(0..100), &mask(50..150)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&mask(0..0), &mask(0..0)).unwrap(), 0.0);
    assert!(iou(&[true], &[true, false]).is_err());
}

#[test]
fn saliency_smoothing_and_threshold() {
    let mut grad = vec![0.0; 25];
    grad[12] = -3.0;
    let s = SaliencyMask::from_gradient(&grad, 5);
    for r in 0..5 {
        for c in 0..5 {
            let inside = (1..4).contains(&r) && (1..4).contains(&c);
            assert_eq!(s.heat[r * 5 + c], if inside { 1.0 } else { 0.0 });
            assert_eq!(s.binary[r * 5 + c], inside);
        }
    }
    let mut ramp: Vec<f64> = (0..25).map(|i| i as f64).collect();
    ramp[0] = -30.0;
    let s = SaliencyMask::from_gradient(&ramp, 5);
    assert_eq!(s.heat.iter().cloned().fold(0.0, f64::max), 1.0);
    for (h, b) in s.heat.iter().zip(&s.binary) {
        assert_eq!(*b, *h > SALIENCY_THRESHOLD);
    }
    assert!(SaliencyMask::from_gradient(&[0.0; 9], 3).heat.iter().all(|&h| h == 0.0));
}

#[test]
fn dimension_saliency_matches_finite_differences() {
    let m = model(4);
    let data = test_split(4);
    // offset the flat background so no pre-activation sits on the LeakyReLU kink
    let image: Vec<f64> = data.image(0).iter().enumerate().map(|(i, v)| v + 0.05 * (i as f64 * 0.7).sin()).collect();
    let mu = |img: &[f64]| {
        let p = m.predict(&Tensor::new(vec![1, 1, 16, 16], img.to_vec()).unwrap(), 1).unwrap();
        p.mu.data().to_vec()
    };
    let masks = dim_saliencies(&m, &image, &[1, 4]).unwrap();
    let single = dim_saliency(&m, &image, 4).unwrap();
    assert_eq!(masks[1], single);
    assert_eq!(single, dim_saliency(&m, &image, 4).unwrap());

    // raw gradient oracle for dim 1, smoothed the same way
    let h = 1e-5;
    let grad: Vec<f64> = (0..256)
        .map(|p| {
            let mut up = image.clone();
            up[p] += h;
            let mut down = image.clone();
            down[p] -= h;
            (mu(&up)[1] - mu(&down)[1]) / (2.0 * h)
        })
        .collect();
    let want = SaliencyMask::from_gradient(&grad, 16);
    for (a, b) in masks[0].heat.iter().zip(&want.heat) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    assert!(dim_saliency(&m, &image, 6).is_err());
}

#[test]
fn traversal_contracts() {
    let m = model(5);
    let z = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5];
    let frames = latent_traversal(&m, &z, 2, -2.0, 2.0, 8).unwrap();
    assert_eq!(frames.len(), 8);
    assert!(frames.iter().all(|f| f.len() == 256 && f.iter().all(|v| (0.0..=1.0).contains(v))));
    let close = latent_traversal(&m, &z, 2, 1.0 - 1e-9, 1.0, 2).unwrap();
    let d: f64 = close[0].iter().zip(&close[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(d < 1e-8, "{d}");
    let mut ctx = Ctx::frozen(&m.store);
    let zv = ctx.constant(Tensor::new(vec![1, 6], vec![0.1, -0.2, -2.0, 0.0, 0.5, -0.5]).unwrap());
    let x = m.net.vae.decode(&mut ctx, zv, Mode::Eval).unwrap();
    assert_eq!(ctx.g.value(x).data(), frames[0].as_slice());
    assert!(latent_traversal(&m, &z, 6, -2.0, 2.0, 8).is_err());
    assert!(latent_traversal(&m, &z, 0, 2.0, 2.0, 8).is_err());
    assert!(latent_traversal(&m, &z, 0, -2.0, 2.0, 1).is_err());
}

#[test]
fn intervention_examples() {
    let mut m = model(6);
    oracle_head(&mut m);
    let truth = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let scores = [0.1, 0.8, 0.2, 0.6, 0.3, 0.4, 0.5, 0.5];
    assert!(!intervene(&m, &scores, &truth, 1, &[]).unwrap());
    assert!(!intervene(&m, &scores, &truth, 1, &[0]).unwrap());
    assert!(intervene(&m, &scores, &truth, 1, &[0, 4]).unwrap());
    assert!(intervene(&m, &scores, &truth, 1, &[0, 1, 2, 3, 4, 5]).unwrap());
    let settled = [1.0, 0.8, 0.2, 0.6, 0.3, 0.4, 0.5, 0.5];
    assert_eq!(
        intervene(&m, &settled, &truth, 0, &[0]).unwrap(),
        intervene(&m, &settled, &truth, 0, &[]).unwrap()
    );
    assert!(intervene(&m, &scores, &truth, 1, &[6]).is_err());
}

#[test]
fn intervention_curve_contracts() {
    let mut m = model(7);
    oracle_head(&mut m);
    let data = test_split(7);
    let curve = intervention_curve(&m, &data, &[0.0, 0.25, 0.5, 0.75, 1.0], 7, InterventionOrder::MostDeviant).unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(curve[0].corrected_rate, 0.0);
    assert_eq!(curve[4].corrected_rate, 1.0);
    assert!(curve.iter().all(|r| r.sample_count == curve[0].sample_count && r.sample_count > 0));
    let random = intervention_curve(&m, &data, &[0.0, 1.0], 7, InterventionOrder::Random).unwrap();
    assert_eq!(random[1].corrected_rate, 1.0);
    assert_eq!(intervention_csv(&curve).lines().count(), 6);
    assert!(intervention_curve(&m, &data, &[0.5, 0.25], 7, InterventionOrder::MostDeviant).is_err());
    assert!(intervention_curve(&m, &data, &[1.5], 7, InterventionOrder::MostDeviant).is_err());
}

#[test]
fn attribution_rows_cover_every_concept() {
    let m = model(8);
    let data = test_split(8);
    let rows = attribute_samples(&m, &data, &[0, 3], 32, &[2, 5], 1).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.iou_top.len() == 2 && r.map.top_k.len() == 6));
    assert_eq!(rows, attribute_samples(&m, &data, &[0, 3], 32, &[2, 5], 2).unwrap());
    let csv = attribution_csv(&rows, &data_names(), 2);
    assert_eq!(csv.lines().count(), 1 + 12 * 2);
    assert!(attribute_samples(&m, &data, &[0], 32, &[7], 1).is_err());
}

fn data_names() -> Vec<String> {
    colidr::spritegen::default_concepts().into_iter().map(|c| c.name).collect()
}

#[test]
fn pgm_layout() {
    let bytes = pgm_bytes(&[0.0, 1.0, 0.5, 2.0, -1.0, 0.2], 3, 2).unwrap();
    let mut want = b"P5\n3 2\n255\n".to_vec();
    want.extend([0u8, 255, 128, 255, 0, 51]);
    assert_eq!(bytes, want);
    assert!(pgm_bytes(&[0.0; 5], 3, 2).is_err());
    let s = strip(&[vec![0.0; 4], vec![1.0; 4]], 2);
    assert_eq!(s, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
}
