//! Random toy generator, truncated sampling and a PNG grid.

use styledomain::arch::{ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::render_seeds;
use styledomain::image_io::{grid, save_png};

fn main() -> anyhow::Result<()> {
    let out = std::env::temp_dir().join("styledomain-examples");
    std::fs::create_dir_all(&out)?;
    let desc = ArchitectureDescriptor::preset("toy32")?;
    let gen = GeneratorWeights::random(&desc, 0)?;
    println!("fingerprint {}", gen.fingerprint());

    let seeds: Vec<u64> = (0..8).collect();
    for psi in [1.0, 0.7, 0.05] {
        let images = render_seeds(&gen, None, &seeds, 1.0, &SamplerConfig::with_psi(psi))?;
        let path = out.join(format!("samples_psi{psi}.png"));
        save_png(&grid(&images, 4)?, &path)?;
        // Small psi pulls every seed towards the average latent.
        let spread = images.iter().map(|i| i.max_abs_diff(&images[0])).fold(0.0, f64::max);
        println!("psi {psi}: max difference to seed 0 {spread:.3}, wrote {}", path.display());
    }
    Ok(())
}
