//! Adversarial fitting of a StyleSpace+ direction to a tiny image set.

use styledomain::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use styledomain::directions::render;
use styledomain::losses::AugmentationPolicy;
use styledomain::paramspace::ParamSpaceKind;
use styledomain::trainer::{adapt_adversarial, preset, AdversarialOptions, Regime};
use styledomain::Tensor;

fn solid(rgb: [f64; 3]) -> Tensor {
    let mut t = Tensor::zeros(&[3, 8, 8]);
    for (c, v) in rgb.iter().enumerate() {
        t.data_mut()[c * 64..(c + 1) * 64].fill(*v);
    }
    t
}

fn means(img: &Tensor) -> [f64; 3] {
    std::array::from_fn(|c| img.data()[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0)
}

fn main() -> anyhow::Result<()> {
    let desc = ArchitectureDescriptor::preset("toy8")?;
    let parent = GeneratorWeights::random(&desc, 1)?;
    let data: Vec<Tensor> = (0..8)
        .map(|i| solid(if i % 2 == 0 { [0.6, -0.4, 0.1] } else { [-0.2, 0.5, 0.7] }))
        .collect();

    let kind = ParamSpaceKind::StyleSpacePlus(8);
    let hp = preset(kind, Regime::Ada)?;
    println!("{kind}: lr {} for {} iterations", hp.learning_rate, hp.iterations);
    let (run, _disc) = adapt_adversarial(
        &parent,
        kind,
        &data,
        &AugmentationPolicy::bgc(1),
        &hp,
        &AdversarialOptions::default(),
        None,
    )?;
    let n = run.loss_trace.len();
    println!("generator hinge (last 5): {:?}", &run.loss_trace[n - 5..]);
    println!("discriminator hinge (last 5): {:?}", &run.aux_trace[n - 5..]);

    let dir = run.direction.expect("direction");
    let mut mean = [0.0; 3];
    for s in 0..100 {
        let img = render(&parent, Some(&dir), &sample_latent(s, 16), 1.0, &SamplerConfig::default())?;
        for (m, v) in mean.iter_mut().zip(means(&img)) {
            *m += v / 100.0;
        }
    }
    println!("generated mean colour {mean:.3?}, data mean [0.2, 0.05, 0.4]");
    Ok(())
}
