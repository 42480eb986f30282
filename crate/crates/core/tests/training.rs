//! Longer optimization runs: adversarial fitting and image translation.

mod common;

use common::*;
use styledomain::apps::{translate, TranslationConfig};
use styledomain::arch::{sample_latent, SamplerConfig};
use styledomain::directions::render;
use styledomain::losses::AugmentationPolicy;
use styledomain::paramspace::ParamSpaceKind;
use styledomain::trainer::{adapt_adversarial, preset, AdversarialOptions, Regime, ADA_ITERATIONS};

fn channel_means(img: &styledomain::Image) -> [f64; 3] {
    let plane = img.numel() / 3;
    let d = img.data();
    std::array::from_fn(|c| d[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
}

#[test]
fn adversarial_fit_matches_two_color_data_mean() {
    let (desc, parent) = toy("toy8", 1);
    let (a, b) = ([0.6, -0.4, 0.1], [-0.2, 0.5, 0.7]);
    let data: Vec<_> = (0..8).map(|i| solid(if i % 2 == 0 { a } else { b }, 8)).collect();
    // Computed from the colours, not from the images.
    let data_mean: [f64; 3] = std::array::from_fn(|c| (a[c] + b[c]) / 2.0);

    let kind = ParamSpaceKind::StyleSpacePlus(8);
    let hp = preset(kind, Regime::Ada).unwrap();
    assert_eq!(hp.iterations, ADA_ITERATIONS);
    let (run, _) = adapt_adversarial(
        &parent,
        kind,
        &data,
        &AugmentationPolicy::bgc(1),
        &hp,
        &AdversarialOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(run.loss_trace.len(), 500);
    let dir = run.direction.expect("StyleSpace+ yields a direction");
    assert!(dir.is_plus());

    let n = 200;
    let mut mean = [0.0; 3];
    for s in 0..n {
        let img = render(&parent, Some(&dir), &sample_latent(5000 + s, desc.latent_dim), 1.0, &SamplerConfig::default())
            .unwrap();
        for (m, v) in mean.iter_mut().zip(channel_means(&img)) {
            *m += v / n as f64;
        }
    }
    let err = mean.iter().zip(&data_mean).fold(0.0f64, |e, (x, y)| e.max((x - y).abs()));
    assert!(err < 0.1, "generated mean {mean:?} vs data {data_mean:?}");
}

#[test]
fn self_translation_reproduces_the_source() {
    let (desc, gen) = toy("toy8", 6);
    let cfg = TranslationConfig {
        psi_infer: 0.7,
        style_split_index: desc.num_styles(),
        ..TranslationConfig::default()
    };
    let source = gen
        .generate(&sample_latent(31, desc.latent_dim), &SamplerConfig::with_psi(cfg.psi_opt))
        .unwrap();
    let out = translate(&source, &gen, &gen, &cfg).unwrap();
    assert!(rms(&out, &source) < 5e-3, "{}", rms(&out, &source));
    // A fixed inversion seed makes translation repeatable.
    let again = translate(&source, &gen, &gen, &cfg).unwrap();
    assert!(again.bit_eq(&out));
}
