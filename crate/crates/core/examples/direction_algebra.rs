//! Mixing, cancelling, transferring and folding directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::{fold_into_weights, mix, render, transfer, StyleDomainDirection};
use styledomain::Tensor;

fn random(desc: &ArchitectureDescriptor, seed: u64, label: &str) -> StyleDomainDirection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = StyleDomainDirection::zeros(desc, label);
    for t in &mut d.delta_styles {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    d
}

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy32")?;
    let gen = GeneratorWeights::random(&desc, 0)?;
    let (mut sketch, anime) = (random(&desc, 1, "sketch"), random(&desc, 2, "anime"));
    sketch.source_weights = Some(gen.content_hash());
    let z = sample_latent(5, desc.latent_dim);
    let cfg = SamplerConfig::default();

    let blend = mix(&[(&sketch, 0.6), (&anime, 0.4)])?;
    println!("blend label '{}', {} values", blend.domain_label, blend.flatten().len());

    let none = mix(&[(&sketch, 0.5), (&sketch, -0.5)])?;
    let base = render(&gen, None, &z, 1.0, &cfg)?;
    println!("cancelled mix equals base: {}", render(&gen, Some(&none), &z, 1.0, &cfg)?.bit_eq(&base));

    // A child generator keeps the parent in its lineage, so transfer is silent.
    let child = fold_into_weights(&gen, &anime, 1.0)?;
    let handle = transfer(&sketch, &child)?;
    println!("transfer warning on child: {:?}", handle.warning());
    let stranger = GeneratorWeights::random(&desc, 42)?;
    println!("transfer warning on stranger: {:?}", transfer(&sketch, &stranger)?.warning());

    // Folding Δs into affine biases renders like applying it on the fly.
    let folded = fold_into_weights(&gen, &blend, 1.0)?;
    let diff = folded.generate(&z, &cfg)?.max_abs_diff(&render(&gen, Some(&blend), &z, 1.0, &cfg)?);
    println!("folded vs applied max difference {diff:.2e}");
    Ok(())
}
