//! Image-to-image translation by inversion into the source generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styledomain::apps::{translate, translate_ref, TranslationConfig};
use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::{fold_into_weights, StyleDomainDirection};
use styledomain::Tensor;

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy8")?;
    let source_gen = GeneratorWeights::random(&desc, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dir = StyleDomainDirection::zeros(&desc, "target");
    for t in &mut dir.delta_styles {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    let target_gen = fold_into_weights(&source_gen, &dir, 1.0)?;

    let cfg = TranslationConfig {
        steps: 200,
        // Splitting after layer 3 keeps coarse layers from the source.
        style_split_index: 3,
        ..TranslationConfig::default()
    };
    let at = SamplerConfig::with_psi(cfg.psi_opt);
    let photo = source_gen.generate(&sample_latent(21, desc.latent_dim), &at)?;
    let reference = target_gen.generate(&sample_latent(22, desc.latent_dim), &at)?;

    let plain = translate(&photo, &source_gen, &target_gen, &cfg)?;
    println!("translated: rms change from input {:.4}", plain.mse(&photo).sqrt());
    let styled = translate_ref(&photo, &reference, &source_gen, &target_gen, &cfg)?;
    println!(
        "with reference (split {}): distance to translation {:.4}, to reference {:.4}",
        cfg.style_split_index,
        styled.mse(&plain).sqrt(),
        styled.mse(&reference).sqrt()
    );
    Ok(())
}
