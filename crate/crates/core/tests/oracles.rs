//! Library results against independently written reference computations.

mod common;

use common::reference;
use common::*;
use styledomain::apps::morph_weights;
use styledomain::arch::{sample_latent, ArchConfig, ArchitectureDescriptor, NoiseMode, SamplerConfig, StyleSpacePoint};
use styledomain::autodiff::Graph;
use styledomain::directions::apply;
use styledomain::losses::{
    directional_loss, one_shot_loss, EmbeddingBackend, NormGuard, OneShotSpec, StubBackend, TextDomainSpec,
};
use styledomain::metrics::kernel_distance;
use styledomain::paramspace::{count, ParamSpaceKind, WeightOffsets};
use styledomain::trainer::{adapt, preset, AdaptOptions, MeanColorObjective, Regime};
use styledomain::Tensor;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn toy32_enumeration_by_hand() {
    let cfg = ArchConfig::preset("toy32").unwrap();
    let (d, k) = (cfg.latent_dim, cfg.kernel_size);
    // (in, out, kernel) for every modulated layer, walking the blocks by hand.
    let mut layers = Vec::new();
    let mut prev = None;
    for &ch in &cfg.channels {
        if let Some(p) = prev {
            layers.push((p, ch, k));
        }
        layers.push((ch, ch, k));
        layers.push((ch, 3, 1));
        prev = Some(ch);
    }
    let desc = ArchitectureDescriptor::preset("toy32").unwrap();
    assert_eq!(desc.num_styles(), layers.len());

    let mapping = cfg.mapping_layers * (d * d + d);
    let affine: usize = layers.iter().map(|&(i, _, _)| i * d + i).sum();
    let synthesis: usize = layers
        .iter()
        .map(|&(i, o, k)| o * i * k * k + o + usize::from(o != 3))
        .sum::<usize>()
        + cfg.channels[0] * 16;
    let styles: usize = layers.iter().map(|&(i, _, _)| i).sum();
    assert_eq!(count(&desc, ParamSpaceKind::Mapping).unwrap(), mapping);
    assert_eq!(count(&desc, ParamSpaceKind::Affine).unwrap(), affine);
    assert_eq!(count(&desc, ParamSpaceKind::SyntConv).unwrap(), synthesis);
    assert_eq!(count(&desc, ParamSpaceKind::Full).unwrap(), mapping + affine + synthesis);
    assert_eq!(count(&desc, ParamSpaceKind::StyleSpace).unwrap(), styles);

    // The fingerprint is a function of the structure alone.
    let (_, w) = toy("toy32", 9);
    assert_eq!(w.derive_descriptor().unwrap().fingerprint, desc.fingerprint);
}

#[test]
fn affine_styles_match_matvec() {
    let (desc, w) = toy("toy8", 2);
    for seed in 0..3 {
        let z = sample_latent(seed, desc.latent_dim);
        let wl = w.map_latent(&z, 0.6).unwrap();
        let got = w.affine_styles(&wl).unwrap();
        let want = reference::styles(&w, wl.0.data());
        for (g, r) in got.styles.iter().zip(&want) {
            assert!(max_diff(g.data(), r) < 1e-6);
        }
        assert!(max_diff(wl.0.data(), &reference::mapping(&w, z.0.data(), 0.6)) < 1e-6);
    }
}

#[test]
fn forward_matches_monolithic_reference() {
    for (name, seed) in [("toy8", 1), ("toy32", 2)] {
        let (desc, parent) = toy(name, seed);
        // Non-zero noise strengths so the noise path is exercised too.
        let mut r = rng(seed);
        let tensors = parent
            .named()
            .map(|(s, t)| {
                if s.name.ends_with("noise_strength") {
                    Tensor::randn(t.shape(), 0.3, &mut r)
                } else {
                    t.clone()
                }
            })
            .collect();
        let w = parent.derive_child(tensors, "noisy").unwrap();
        let cfg = SamplerConfig {
            truncation_psi: 0.7,
            seed: 5,
            noise_mode: NoiseMode::FixedSeeded,
        };
        for s in 0..2 {
            let z = sample_latent(100 + s, desc.latent_dim);
            let img = w.generate(&z, &cfg).unwrap();
            let want = reference::generate(&w, z.0.data(), None, &cfg);
            let err = max_diff(img.data(), &want);
            assert!(err < 1e-5, "{name}: {err:e}");
        }
    }
}

#[test]
fn offsets_match_reference_kernels() {
    let (desc, w) = toy("toy32", 4);
    let mut r = rng(8);
    let mut o = WeightOffsets::zeros(&desc, 16).unwrap();
    for t in o.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.1, &mut r);
    }
    let z = sample_latent(3, desc.latent_dim);
    let cfg = SamplerConfig::default();
    let styles = w.affine_styles(&w.map_latent(&z, 1.0).unwrap()).unwrap();
    let got = w.synthesize(&styles, Some(&o), &cfg).unwrap();
    let flat: Vec<Vec<f64>> = o.tensors().map(|t| t.data().to_vec()).collect();
    let s: Vec<Vec<f64>> = styles.styles.iter().map(|t| t.data().to_vec()).collect();
    let want = reference::synthesize(&w, &s, Some((16, &flat)), &cfg);
    assert!(max_diff(got.data(), &want) < 1e-5);
}

/// Stub embedding of a 16×16 image computed by hand.
fn stub_embed(b: &StubBackend, img: &Tensor) -> Vec<f64> {
    let v = reference::matvec(b.projection().data(), StubBackend::DIM, img.data());
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn directional_loss_matches_cosine_arithmetic() {
    let backend = StubBackend::new("oracle", 3);
    let mut r = rng(1);
    let base: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[3, 16, 16], 1.0, &mut r)).collect();
    let gen: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[3, 16, 16], 1.0, &mut r)).collect();
    let spec = TextDomainSpec::new("a watercolor", "a photo").unwrap();
    let g = Graph::new();
    let vars: Vec<_> = gen.iter().map(|t| g.constant(t.clone())).collect();
    let got = directional_loss(&vars, &base, &spec, &backend).unwrap().item();

    let dt = sub(
        backend.encode_text("a watercolor").data(),
        backend.encode_text("a photo").data(),
    );
    let want = (0..2)
        .map(|i| 1.0 - cosine(&sub(&stub_embed(&backend, &gen[i]), &stub_embed(&backend, &base[i])), &dt))
        .sum::<f64>()
        / 2.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn one_shot_singleton_matches_term_sum() {
    let backend = StubBackend::new("oracle", 4);
    let mut r = rng(2);
    let reference_img = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
    let base = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
    let gen = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
    let rec = Tensor::randn(&[3, 16, 16], 1.0, &mut r);
    let spec = OneShotSpec::new(reference_img.clone());
    let g = Graph::new();
    let terms = one_shot_loss(
        &[g.constant(gen.clone())],
        std::slice::from_ref(&base),
        Some(g.constant(rec.clone())),
        &spec,
        &backend,
        NormGuard::Strict,
    )
    .unwrap();

    let (e_ref, e_base, e_gen) = (
        stub_embed(&backend, &reference_img),
        stub_embed(&backend, &base),
        stub_embed(&backend, &gen),
    );
    let across = 1.0 - cosine(&sub(&e_gen, &e_base), &sub(&e_ref, &e_base));
    let within = 0.0;
    let refclip = 1.0 - cosine(&e_gen, &e_ref);
    let refrec = sub(rec.data(), reference_img.data()).iter().map(|v| v * v).sum::<f64>() / rec.numel() as f64;
    let want = across
        + OneShotSpec::LAMBDA_CW * within
        + OneShotSpec::LAMBDA_RC * refclip
        + OneShotSpec::LAMBDA_RR * refrec;
    assert!((terms.total.item() - want).abs() < 1e-6);
    assert!((terms.across.item() - across).abs() < 1e-9);
    assert!((terms.refclip.item() - refclip).abs() < 1e-9);
    assert!((terms.refrec.item() - refrec).abs() < 1e-9);
    assert_eq!(terms.within.item(), within);
}

#[test]
fn apply_is_elementwise_addition() {
    let (desc, w) = toy("toy32", 0);
    let dir = random_direction(&desc, None, 6, 0.5);
    let styles = w.affine_styles(&w.map_latent(&sample_latent(1, desc.latent_dim), 1.0).unwrap()).unwrap();
    let shifted = apply(&styles, &dir, 1.0).unwrap();
    let flat_s = styles.flatten();
    let flat_d = dir.flatten();
    let want: Vec<f64> = flat_s.iter().zip(&flat_d).map(|(a, b)| a + b).collect();
    assert_eq!(shifted.flatten(), want);
    assert_eq!(shifted.total_dim(), StyleSpacePoint::zeros(&desc).total_dim());
}

#[test]
fn morph_is_per_tensor_lerp() {
    let (_, a) = toy("toy8", 0);
    let (_, b) = toy("toy8", 1);
    for alpha in [0.25, 0.5, 0.9] {
        let m = morph_weights(&a, &b, alpha).unwrap();
        for ((x, y), got) in a.tensors().iter().zip(b.tensors()).zip(m.tensors()) {
            let want: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + alpha * (q - p)).collect();
            assert!(max_diff(got.data(), &want) < 1e-7);
        }
    }
    let same = morph_weights(&a, &a, 0.5).unwrap();
    assert!(same.tensors().iter().zip(a.tensors()).all(|(x, y)| x.bit_eq(y)));
}

/// Mean-colour loss of a fixed batch under style shifts, via the reference forward.
fn color_loss(w: &styledomain::arch::GeneratorWeights, zs: &[Vec<f64>], delta: &[Vec<f64>], target: [f64; 3]) -> f64 {
    let cfg = SamplerConfig::default();
    zs.iter()
        .map(|z| {
            let img = reference::generate(w, z, Some(delta), &cfg);
            let plane = img.len() / 3;
            (0..3)
                .map(|c| {
                    let m = img[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
                    (m - target[c]).powi(2)
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / zs.len() as f64
}

#[test]
fn mean_color_threshold_is_reachable() {
    let (desc, w) = toy("toy8", 0);
    let target = [0.5, -0.3, 0.2];
    let zs: Vec<Vec<f64>> = (0..4).map(|s| sample_latent(700 + s, desc.latent_dim).0.data().to_vec()).collect();

    // Independent script: central-difference gradient descent with backtracking.
    let mut delta: Vec<Vec<f64>> = desc.style_dims().iter().map(|&n| vec![0.0; n]).collect();
    let initial = color_loss(&w, &zs, &delta, target);
    let mut loss = initial;
    let mut step = 1.0;
    for _ in 0..25 {
        let h = 1e-5;
        let mut grad = delta.clone();
        for l in 0..delta.len() {
            for i in 0..delta[l].len() {
                let mut p = delta.clone();
                p[l][i] += h;
                let mut m = delta.clone();
                m[l][i] -= h;
                grad[l][i] = (color_loss(&w, &zs, &p, target) - color_loss(&w, &zs, &m, target)) / (2.0 * h);
            }
        }
        loop {
            let cand: Vec<Vec<f64>> = delta
                .iter()
                .zip(&grad)
                .map(|(d, g)| d.iter().zip(g).map(|(a, b)| a - step * b).collect())
                .collect();
            let l = color_loss(&w, &zs, &cand, target);
            if l < loss {
                delta = cand;
                loss = l;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            assert!(step > 1e-12, "descent stalled at {loss}");
        }
    }
    assert!(loss < 0.5 * initial, "reference descent {initial} -> {loss}");

    // The library loop clears the same bar within its 300-iteration budget.
    let hp = preset(ParamSpaceKind::StyleSpace, Regime::SimilarText).unwrap();
    assert!(hp.iterations <= 300);
    let run = adapt(&w, ParamSpaceKind::StyleSpace, &MeanColorObjective { target }, &hp, &AdaptOptions::default())
        .unwrap();
    let (first, last) = (run.loss_trace[0], *run.loss_trace.last().unwrap());
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn kernel_distance_grows_with_separation() {
    let mut r = rng(3);
    let xs: Vec<Tensor> = (0..12).map(|_| Tensor::randn(&[5], 0.3, &mut r)).collect();
    let noise: Vec<Tensor> = (0..12).map(|_| Tensor::randn(&[5], 0.3, &mut r)).collect();
    let mut prev = f64::NEG_INFINITY;
    for sep in [1.0, 2.0, 4.0, 8.0] {
        let ys: Vec<Tensor> = noise.iter().map(|t| t.map(|v| v + sep)).collect();
        let k = kernel_distance(&xs, &ys).unwrap();
        assert!(k > 0.0 && k > prev, "separation {sep}: {k} after {prev}");
        prev = k;
    }
}
