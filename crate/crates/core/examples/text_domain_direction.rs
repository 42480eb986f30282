//! Trains a StyleSpace direction from a text pair with the directional loss.

use std::sync::Arc;

use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::render;
use styledomain::losses::{BackendRegistry, TextDomainSpec, TRAIN_BACKEND};
use styledomain::paramspace::ParamSpaceKind;
use styledomain::trainer::{adapt, preset, AdaptOptions, Regime, TextObjective};

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy32")?;
    let parent = GeneratorWeights::random(&desc, 0)?;
    let backend = BackendRegistry::with_stubs().get(TRAIN_BACKEND)?;
    let objective = TextObjective::new(TextDomainSpec::new("sketch", "photo")?, Arc::clone(&backend))?;

    let mut hp = preset(ParamSpaceKind::StyleSpace, Regime::SimilarText)?;
    hp.iterations = 60;
    let opts = AdaptOptions {
        label: "sketch".into(),
        ..AdaptOptions::default()
    };
    let run = adapt(&parent, ParamSpaceKind::StyleSpace, &objective, &hp, &opts)?;
    let trace = &run.loss_trace;
    println!("directional loss {:.4} -> {:.4} over {} steps", trace[0], trace[trace.len() - 1], trace.len());

    let dir = run.direction.expect("StyleSpace training yields a direction");
    let path = std::env::temp_dir().join("sketch.sdir");
    dir.save(&path)?;
    println!("saved {} ({} values)", path.display(), dir.flatten().len());

    // Strength scales the edit continuously.
    let z = sample_latent(7, desc.latent_dim);
    let base = render(&parent, None, &z, 0.0, &SamplerConfig::default())?;
    for strength in [0.5, 1.0, 2.0] {
        let img = render(&parent, Some(&dir), &z, strength, &SamplerConfig::default())?;
        println!("strength {strength}: rms change {:.4}", img.mse(&base).sqrt());
    }
    Ok(())
}
