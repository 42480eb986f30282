//! One-shot adaptation towards a single reference image.

use std::sync::Arc;

use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::render;
use styledomain::losses::{BackendRegistry, OneShotSpec, TRAIN_BACKEND};
use styledomain::paramspace::ParamSpaceKind;
use styledomain::trainer::{adapt, preset, AdaptOptions, OneShotObjective, Regime};

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy32")?;
    let parent = GeneratorWeights::random(&desc, 1)?;
    let backend = BackendRegistry::with_stubs().get(TRAIN_BACKEND)?;

    // A tinted sample stands in for the style reference.
    let sample = parent.generate(&sample_latent(99, desc.latent_dim), &SamplerConfig::default())?;
    let plane = sample.numel() / 3;
    let mut reference = sample.map(|v| v * 0.6);
    reference.data_mut()[..plane].iter_mut().for_each(|v| *v += 0.5);

    let objective = OneShotObjective::new(OneShotSpec::new(reference.clone()), Arc::clone(&backend), None);
    let mut hp = preset(ParamSpaceKind::StyleSpace, Regime::SimilarOneshot)?;
    hp.iterations = 40;
    let run = adapt(&parent, ParamSpaceKind::StyleSpace, &objective, &hp, &AdaptOptions::default())?;
    println!("one-shot loss {:.3} -> {:.3}", run.loss_trace[0], run.loss_trace[run.loss_trace.len() - 1]);

    let dir = run.direction.expect("direction");
    let e_ref = backend.image_embedding(&reference);
    for s in 0..3 {
        let z = sample_latent(s, desc.latent_dim);
        let before = backend.image_embedding(&parent.generate(&z, &SamplerConfig::default())?);
        let after = backend.image_embedding(&render(&parent, Some(&dir), &z, 1.0, &SamplerConfig::default())?);
        println!("seed {s}: cosine to reference {:.3} -> {:.3}", before.dot(&e_ref), after.dot(&e_ref));
    }
    Ok(())
}
