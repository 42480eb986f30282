//! Four-stage morph: ramp a direction in, blend generators, crossfade, ramp out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styledomain::apps::{render_morph, MorphAssets, MorphPlan};
use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::StyleDomainDirection;
use styledomain::image_io::{grid, save_png};
use styledomain::Tensor;

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy32")?;
    let mut assets = MorphAssets::default();
    assets.generators.insert("faces".into(), GeneratorWeights::random(&desc, 0)?);
    assets.generators.insert("dogs".into(), GeneratorWeights::random(&desc, 1)?);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["sketch", "pixar"] {
        let mut d = StyleDomainDirection::zeros(&desc, name);
        for t in &mut d.delta_styles {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
        assets.directions.insert(name.into(), d);
    }

    let plan = MorphPlan::four_stage("faces", "dogs", "sketch", "pixar", 6);
    println!("{}", serde_json::to_string_pretty(&plan)?);
    let frames = render_morph(&plan, &assets, &sample_latent(11, desc.latent_dim), &SamplerConfig::default())?;
    let jump = frames
        .windows(2)
        .map(|w| w[0].image.max_abs_diff(&w[1].image))
        .fold(0.0, f64::max);
    println!("{} frames, largest step between frames {jump:.3}", frames.len());

    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    let path = std::env::temp_dir().join("morph_strip.png");
    save_png(&grid(&images, plan.frames_per_stage)?, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
