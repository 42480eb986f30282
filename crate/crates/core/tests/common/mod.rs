#![allow(dead_code)]

pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use styledomain::arch::{ArchitectureDescriptor, GeneratorWeights};
use styledomain::directions::StyleDomainDirection;
use styledomain::paramspace::WeightOffsets;
use styledomain::{Image, Tensor};

pub fn toy(name: &str, seed: u64) -> (ArchitectureDescriptor, GeneratorWeights) {
    let desc = ArchitectureDescriptor::preset(name).unwrap();
    let weights = GeneratorWeights::random(&desc, seed).unwrap();
    (desc, weights)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random direction; `block` adds random weight offsets.
pub fn random_direction(
    desc: &ArchitectureDescriptor,
    block: Option<usize>,
    seed: u64,
    std: f64,
) -> StyleDomainDirection {
    let mut r = rng(seed);
    let mut d = StyleDomainDirection::zeros(desc, format!("random-{seed}"));
    for t in &mut d.delta_styles {
        *t = Tensor::randn(t.shape(), std, &mut r);
    }
    if let Some(b) = block {
        let mut o = WeightOffsets::zeros(desc, b).unwrap();
        for t in o.tensors_mut() {
            *t = Tensor::randn(t.shape(), std * 0.1, &mut r);
        }
        d.offsets = Some(o);
    }
    d
}

pub fn solid(color: [f64; 3], res: usize) -> Image {
    let mut t = Tensor::zeros(&[3, res, res]);
    let plane = res * res;
    for (c, v) in color.iter().enumerate() {
        t.data_mut()[c * plane..(c + 1) * plane].fill(*v);
    }
    t
}

/// SHA-256 over the exact f64 bit patterns.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn rms(a: &Tensor, b: &Tensor) -> f64 {
    a.mse(b).sqrt()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
