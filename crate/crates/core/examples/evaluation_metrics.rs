//! Quality, diversity and distribution distances on a toy generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::StyleDomainDirection;
use styledomain::losses::{BackendRegistry, EVAL_BACKEND};
use styledomain::metrics::{evaluate, EvalProtocol, EvalReference, Metric};
use styledomain::Tensor;

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy32")?;
    let gen = GeneratorWeights::random(&desc, 0)?;
    let backend = BackendRegistry::with_stubs().get(EVAL_BACKEND)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut dir = StyleDomainDirection::zeros(&desc, "sketch");
    for t in &mut dir.delta_styles {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }

    // The full protocol is 1000 images × 5 repeats; a smaller run keeps this quick.
    let protocol = EvalProtocol {
        n_images: 64,
        repeats: 3,
        ..EvalProtocol::default()
    };
    let real_images: Vec<_> = (0..64u64)
        .map(|s| gen.generate(&sample_latent(10_000 + s, desc.latent_dim), &SamplerConfig::default()))
        .collect::<Result<_, _>>()?;

    for (metric, reference) in [
        (Metric::Quality, EvalReference::Text("sketch")),
        (Metric::Diversity, EvalReference::None),
        (Metric::Fid, EvalReference::Images(&real_images)),
        (Metric::Kid, EvalReference::Images(&real_images)),
    ] {
        let base = evaluate(metric, &gen, None, reference, &protocol, backend.as_ref())?;
        println!("{:<9} parent {:.4} ± {:.4}", metric.to_string(), base.value, base.spread);
    }
    let adapted = evaluate(Metric::Fid, &gen, Some(&dir), EvalReference::Images(&real_images), &protocol, backend.as_ref())?;
    println!("fid       adapted {:.4} (per repeat {:?})", adapted.value, adapted.per_repeat_values);
    Ok(())
}
