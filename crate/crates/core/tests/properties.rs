//! Randomized invariants.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use styledomain::apps::{assemble_styles, morph_weights, render_morph, MorphAssets, MorphPlan};
use styledomain::arch::{sample_latent, SamplerConfig};
use styledomain::autodiff::{Graph, Var};
use styledomain::directions::{apply, mix};
use styledomain::losses::{
    directional_loss_towards, hinge_losses, one_shot_loss, EmbeddingBackend, NormGuard, OneShotSpec, StubBackend,
};
use styledomain::metrics::{diversity_of_embeddings, frechet_distance, quality_of_embeddings, FeatureStats};
use styledomain::Tensor;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

/// Embeds by flattening, so `ΔI` is the raw pixel difference.
struct Identity;

impl EmbeddingBackend for Identity {
    fn id(&self) -> &str {
        "identity"
    }
    fn dim(&self) -> usize {
        12
    }
    fn encode_image<'g>(&self, image: Var<'g>) -> Var<'g> {
        image.flatten()
    }
    fn encode_text(&self, _: &str) -> Tensor {
        Tensor::zeros(&[12])
    }
}

fn images(seed: u64, n: usize, shape: &[usize]) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| Tensor::randn(shape, 1.0, &mut r)).collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn directional_loss_is_scale_free(seed in 0u64..1000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let base = images(seed, 3, &[3, 2, 2]);
        let gen = images(seed + 1, 3, &[3, 2, 2]);
        let dt = images(seed + 2, 1, &[12]).remove(0);
        let g = Graph::new();
        let vars: Vec<_> = gen.iter().map(|t| g.constant(t.clone())).collect();
        let l0 = directional_loss_towards(&vars, &base, &dt, &Identity, NormGuard::Strict).unwrap().item();
        // base + b·(gen − base) rescales each ΔI by b.
        let scaled: Vec<_> = gen
            .iter()
            .zip(&base)
            .map(|(x, y)| g.constant(y.add(&x.sub(y).scale(b))))
            .collect();
        let l1 = directional_loss_towards(&scaled, &base, &dt.scale(a), &Identity, NormGuard::Strict).unwrap().item();
        prop_assert!((l0 - l1).abs() < 1e-6);
    }

    #[test]
    fn losses_ignore_batch_order(seed in 0u64..1000, rot in 1usize..4) {
        let backend = StubBackend::new("p", 7);
        let base = images(seed, 4, &[3, 16, 16]);
        let gen = images(seed + 1, 4, &[3, 16, 16]);
        let dt = backend.encode_text("x").sub(&backend.encode_text("y"));
        let spec = OneShotSpec::new(images(seed + 2, 1, &[3, 16, 16]).remove(0));
        let g = Graph::new();
        let vars: Vec<_> = gen.iter().map(|t| g.constant(t.clone())).collect();
        let mut pv = vars.clone();
        pv.rotate_left(rot);
        let mut pb = base.clone();
        pb.rotate_left(rot);

        let d0 = directional_loss_towards(&vars, &base, &dt, &backend, NormGuard::Strict).unwrap().item();
        let d1 = directional_loss_towards(&pv, &pb, &dt, &backend, NormGuard::Strict).unwrap().item();
        prop_assert!((d0 - d1).abs() < 1e-12);
        let o0 = one_shot_loss(&vars, &base, None, &spec, &backend, NormGuard::Strict).unwrap().total.item();
        let o1 = one_shot_loss(&pv, &pb, None, &spec, &backend, NormGuard::Strict).unwrap().total.item();
        prop_assert!((o0 - o1).abs() < 1e-12);

        let logits: Vec<f64> = gen.iter().map(|t| t.data()[0]).collect();
        let real: Vec<_> = logits.iter().map(|&v| g.scalar(-v)).collect();
        let fake: Vec<_> = logits.iter().map(|&v| g.scalar(v)).collect();
        let mut pr = real.clone();
        pr.rotate_left(rot);
        let h0 = hinge_losses(&real, &fake).unwrap();
        let h1 = hinge_losses(&pr, &fake).unwrap();
        prop_assert!((h0.d_loss.item() - h1.d_loss.item()).abs() < 1e-12);
    }

    #[test]
    fn generator_hinge_falls_when_a_fake_logit_rises(logits in prop::collection::vec(-3.0f64..3.0, 1..6), k in 0usize..6, bump in 1e-3f64..2.0) {
        let k = k % logits.len();
        let g = Graph::new();
        let real = [g.scalar(0.0)];
        let fake: Vec<_> = logits.iter().map(|&v| g.scalar(v)).collect();
        let mut raised = logits.clone();
        raised[k] += bump;
        let fake_up: Vec<_> = raised.iter().map(|&v| g.scalar(v)).collect();
        let before = hinge_losses(&real, &fake).unwrap().g_loss.item();
        let after = hinge_losses(&real, &fake_up).unwrap().g_loss.item();
        prop_assert!(after < before);
    }

    #[test]
    fn applying_a_mix_equals_sequential_application(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (desc, w) = toy("toy8", 0);
        let d1 = random_direction(&desc, None, seed, 0.5);
        let d2 = random_direction(&desc, None, seed + 1, 0.5);
        let s = w.affine_styles(&w.map_latent(&sample_latent(seed, desc.latent_dim), 1.0).unwrap()).unwrap();
        let seq = apply(&apply(&s, &d1, a).unwrap(), &d2, b).unwrap();
        let once = apply(&s, &mix(&[(&d1, a), (&d2, b)]).unwrap(), 1.0).unwrap();
        let err = seq.flatten().iter().zip(once.flatten()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn morph_is_linear_in_alpha(alpha in 0.0f64..=1.0) {
        let (_, a) = toy("toy8", 0);
        let (_, b) = toy("toy8", 1);
        let m = morph_weights(&a, &b, alpha).unwrap();
        for ((x, y), z) in a.tensors().iter().zip(b.tensors()).zip(m.tensors()) {
            let want = x.add(&y.sub(x).scale(alpha));
            prop_assert!(z.max_abs_diff(&want) <= 1e-7);
        }
    }

    #[test]
    fn style_assembly_is_idempotent(seed in 0u64..1000, split in 0usize..=5) {
        let (desc, w) = toy("toy8", 0);
        let styles = |s: u64| w.affine_styles(&w.map_latent(&sample_latent(s, desc.latent_dim), 1.0).unwrap()).unwrap();
        let (src, refr) = (styles(seed), styles(seed + 1));
        let out = assemble_styles(&src, &refr, split).unwrap();
        let again = assemble_styles(&out, &out, split).unwrap();
        prop_assert_eq!(&again, &out);
        prop_assert_eq!(&assemble_styles(&out, &refr, split).unwrap(), &out);
    }

    #[test]
    fn embedding_metrics_ignore_order_and_scale(seed in 0u64..1000, scale in 0.1f64..10.0, rot in 1usize..5) {
        let embs = images(seed, 5, &[6]);
        let target = images(seed + 1, 1, &[6]).remove(0);
        let unit = |t: &Tensor| t.scale(1.0 / t.norm());
        let normed: Vec<Tensor> = embs.iter().map(unit).collect();
        let mut shuffled: Vec<Tensor> = embs.iter().map(|t| unit(&t.scale(scale))).collect();
        shuffled.rotate_left(rot);
        let q0 = quality_of_embeddings(&normed, &unit(&target)).unwrap();
        let q1 = quality_of_embeddings(&shuffled, &unit(&target)).unwrap();
        let d0 = diversity_of_embeddings(&normed).unwrap();
        let d1 = diversity_of_embeddings(&shuffled).unwrap();
        prop_assert!((q0 - q1).abs() < 1e-12 && (d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn frechet_distance_is_symmetric_and_bounded(seed in 0u64..1000) {
        let mut r = rng(seed);
        let stats = |r: &mut rand_chacha::ChaCha8Rng| {
            let a = Tensor::randn(&[16], 1.0, r);
            let m = DMatrix::from_row_slice(4, 4, a.data());
            let mu = Tensor::randn(&[4], 1.0, r);
            FeatureStats::new(DVector::from_column_slice(mu.data()), &m * m.transpose() + DMatrix::identity(4, 4) * 0.1)
        };
        let (a, b) = (stats(&mut r), stats(&mut r));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0));
        prop_assert!(ab + 1e-9 >= (&a.mean - &b.mean).norm_squared());
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }
}

#[test]
fn morph_frames_get_closer_with_more_frames() {
    let (desc, a) = toy("toy8", 0);
    let (_, b) = toy("toy8", 1);
    let mut assets = MorphAssets::default();
    assets.generators.insert("A".into(), a);
    assets.generators.insert("B".into(), b);
    assets.directions.insert("d1".into(), random_direction(&desc, None, 1, 0.4));
    assets.directions.insert("d2".into(), random_direction(&desc, Some(8), 2, 0.4));
    let z = sample_latent(3, desc.latent_dim);
    let max_jump = |frames: usize| {
        let plan = MorphPlan::four_stage("A", "B", "d1", "d2", frames);
        let out = render_morph(&plan, &assets, &z, &SamplerConfig::default()).unwrap();
        out.windows(2)
            .map(|w| w[0].image.max_abs_diff(&w[1].image))
            .fold(0.0, f64::max)
    };
    let jumps: Vec<f64> = [3, 6, 12].into_iter().map(max_jump).collect();
    assert!(jumps[0].is_finite() && jumps[0] < 5.0);
    assert!(jumps[1] < jumps[0] && jumps[2] < jumps[1], "{jumps:?}");
}

#[test]
fn zero_direction_ramp_is_static() {
    let (desc, w) = toy("toy8", 0);
    let mut assets = MorphAssets::default();
    assets.generators.insert("G".into(), w);
    assets
        .directions
        .insert("zero".into(), styledomain::directions::StyleDomainDirection::zeros(&desc, "zero"));
    let plan: MorphPlan = serde_json::from_value(serde_json::json!({
        "frames_per_stage": 4,
        "stages": [{"kind": "direction_ramp", "generator": "G", "direction": "zero"}]
    }))
    .unwrap();
    let frames = render_morph(&plan, &assets, &sample_latent(0, desc.latent_dim), &SamplerConfig::default()).unwrap();
    assert!(frames.windows(2).all(|w| w[0].image.bit_eq(&w[1].image)));
}
