//! Baseline convolutional discriminator.
//!
//! `min(4, log2(res) - 1)` blocks of 3×3 conv, bias, leaky ReLU and 2×2
//! average pooling, followed by a dense layer to one logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{LRELU_GAIN, LRELU_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub resolution: usize,
    pub channels: usize,
    /// Conv weight/bias pairs per block, then dense weight and bias.
    pub tensors: Vec<Tensor>,
}

impl Discriminator {
    pub const DEFAULT_CHANNELS: usize = 16;

    pub fn num_blocks(resolution: usize) -> usize {
        (resolution.trailing_zeros() as usize).saturating_sub(1).clamp(1, 4)
    }

    pub fn new(resolution: usize, channels: usize, seed: u64) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 4 {
            return Err(Error::Config(format!("discriminator resolution {resolution} must be a power of two ≥ 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = Self::num_blocks(resolution);
        let mut tensors = Vec::new();
        let mut cin = 3;
        for _ in 0..blocks {
            let fan_in = (cin * 9) as f64;
            tensors.push(Tensor::randn(&[channels, cin, 3, 3], 1.0 / fan_in.sqrt(), &mut rng));
            tensors.push(Tensor::zeros(&[channels]));
            cin = channels;
        }
        let side = resolution >> blocks;
        let features = channels * side * side;
        tensors.push(Tensor::randn(&[1, features], 1.0 / (features as f64).sqrt(), &mut rng));
        tensors.push(Tensor::zeros(&[1]));
        Ok(Self {
            resolution,
            channels,
            tensors,
        })
    }

    /// A discriminator whose logit is identically zero.
    pub fn constant_zero(resolution: usize, channels: usize) -> Result<Self> {
        let mut d = Self::new(resolution, channels, 0)?;
        let n = d.tensors.len();
        for t in &mut d.tensors[n - 2..] {
            *t = Tensor::zeros(t.shape());
        }
        Ok(d)
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundDiscriminator<'g> {
        BoundDiscriminator {
            vars: self
                .tensors
                .iter()
                .map(|t| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
                .collect(),
            resolution: self.resolution,
        }
    }

    pub fn logit(&self, image: &Image) -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        self.bind(&g, false).forward(x).map(|v| v.item())
    }
}

pub struct BoundDiscriminator<'g> {
    pub vars: Vec<Var<'g>>,
    resolution: usize,
}

impl<'g> BoundDiscriminator<'g> {
    pub fn forward(&self, image: Var<'g>) -> Result<Var<'g>> {
        let shape = image.value().shape().to_vec();
        if shape != [3, self.resolution, self.resolution] {
            return Err(Error::Shape(format!(
                "discriminator expects 3×{r}×{r}, got {shape:?}",
                r = self.resolution
            )));
        }
        let blocks = (self.vars.len() - 2) / 2;
        let mut x = image;
        for b in 0..blocks {
            x = x
                .conv2d(self.vars[2 * b])
                .add_channel_bias(self.vars[2 * b + 1])
                .leaky_relu(LRELU_SLOPE, LRELU_GAIN)
                .avg_pool2();
        }
        let logit = self.vars[2 * blocks].matvec(x.flatten()).add(self.vars[2 * blocks + 1]);
        if !logit.value().is_finite() {
            return Err(Error::NonFinite { location: "discriminator logit".into() });
        }
        Ok(logit)
    }
}
