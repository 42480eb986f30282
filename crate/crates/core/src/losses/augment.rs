//! Differentiable augmentation applied before the discriminator.
//!
//! Each op of a policy fires independently per image with probability `p`.
//! Spatial ops are sparse resampling maps, so gradients flow to the pixels.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SpatialMap, Var};
use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    /// Random x-flip and integer translation (up to 1/8 of the size).
    Blit,
    /// Isotropic scaling and rotation about the center.
    Geometric,
    /// Brightness, contrast and saturation jitter.
    Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub ops: Vec<AugmentOp>,
    pub p: f64,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub const DEFAULT_P: f64 = 0.5;

    /// The `bgc` policy: blit, geometric, color.
    pub fn bgc(seed: u64) -> Self {
        Self {
            ops: vec![AugmentOp::Blit, AugmentOp::Geometric, AugmentOp::Color],
            p: Self::DEFAULT_P,
            seed,
        }
    }

    pub fn identity() -> Self {
        Self {
            ops: Vec::new(),
            p: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("augmentation probability {} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

pub fn flip_x<'g>(x: Var<'g>) -> Var<'g> {
    let (h, w) = spatial(x);
    x.resample(Arc::new(SpatialMap::warp(h, w, |y, xx| (y, (w - 1) as f64 - xx))))
}

/// Integer shift with reflected borders.
pub fn translate<'g>(x: Var<'g>, dy: i64, dx: i64) -> Var<'g> {
    let (h, w) = spatial(x);
    x.resample(Arc::new(SpatialMap::warp(h, w, |y, xx| (y - dy as f64, xx - dx as f64))))
}

/// Scale by `scale` and rotate by `angle` radians about the image center.
pub fn scale_rotate<'g>(x: Var<'g>, scale: f64, angle: f64) -> Var<'g> {
    let (h, w) = spatial(x);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    x.resample(Arc::new(SpatialMap::warp(h, w, move |y, xx| {
        let (ry, rx) = (y - cy, xx - cx);
        let sy = (cos * ry - sin * rx) / scale;
        let sx = (sin * ry + cos * rx) / scale;
        (sy + cy, sx + cx)
    })))
}

/// Adds `offset` to every pixel.
pub fn brightness<'g>(x: Var<'g>, offset: f64) -> Var<'g> {
    x.offset(offset)
}

fn spatial(x: Var<'_>) -> (usize, usize) {
    let v = x.value();
    (v.shape()[1], v.shape()[2])
}

fn apply_op<'g>(x: Var<'g>, op: AugmentOp, rng: &mut ChaCha8Rng) -> Var<'g> {
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    match op {
        AugmentOp::Blit => {
            let (h, w) = spatial(x);
            let flipped = if rng.random_bool(0.5) { flip_x(x) } else { x };
            let my = (h / 8) as i64;
            let mx = (w / 8) as i64;
            let dy = rng.random_range(-my..=my);
            let dx = rng.random_range(-mx..=mx);
            if dy == 0 && dx == 0 {
                flipped
            } else {
                translate(flipped, dy, dx)
            }
        }
        AugmentOp::Geometric => {
            let scale = (0.2 * std::f64::consts::LN_2 * normal(rng)).exp();
            let angle = rng.random_range(-std::f64::consts::FRAC_PI_8..std::f64::consts::FRAC_PI_8);
            scale_rotate(x, scale, angle)
        }
        AugmentOp::Color => {
            let b = 0.2 * normal(rng);
            let c = (0.5 * std::f64::consts::LN_2 * normal(rng)).exp();
            let s = (std::f64::consts::LN_2 * normal(rng)).exp();
            brightness(x, b).contrast(c).saturation(s)
        }
    }
}

/// Augments each image of a graph batch; the RNG is seeded from the policy.
pub fn augment_vars<'g>(batch: &[Var<'g>], policy: &AugmentationPolicy) -> Vec<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    batch
        .iter()
        .map(|&img| {
            let mut x = img;
            for &op in &policy.ops {
                if policy.p > 0.0 && rng.random::<f64>() < policy.p {
                    x = apply_op(x, op, &mut rng);
                }
            }
            x
        })
        .collect()
}

pub fn augment(batch: &[Image], policy: &AugmentationPolicy) -> Result<Vec<Image>> {
    policy.validate()?;
    let g = Graph::new();
    let vars: Vec<Var> = batch.iter().map(|b| g.constant(b.clone())).collect();
    Ok(augment_vars(&vars, policy)
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect())
}
