//! StyleGAN2-style generator: architecture descriptors, weights and the
//! reference forward pass.
//!
//! The generator is split the usual way: a mapping network `z -> w`, one
//! affine layer per style layer `w -> s_i`, and a synthesis network of
//! modulated 3×3 convolutions with modulated 1×1 tRGB layers whose outputs
//! are accumulated through upsampling skip connections. Every conv and tRGB
//! layer consumes exactly one style vector, whose length is the layer's
//! input channel count.
//!
//! Upsampling is nearest-neighbour followed by a same-padded convolution;
//! the residual synthesis topology is not implemented.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::paramspace::{BoundOffsets, WeightOffsets};
use crate::tensor::{Image, Tensor};

/// Epsilon inside the demodulation square root.
pub const DEMOD_EPS: f64 = 1e-8;
/// Leaky-ReLU slope and output gain used throughout the generator.
pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Samples used to estimate the truncation center.
pub const W_AVG_SAMPLES: usize = 10_000;
const W_AVG_SEED: u64 = 0x5eed_0a76;

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Trgb,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleLayerInfo {
    pub kind: LayerKind,
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// First conv of every block above the base resolution doubles the resolution.
    pub upsample: bool,
}

/// Input to [`build_architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub base_resolution: usize,
    pub output_resolution: usize,
    /// Channel count for each resolution from base to output.
    pub channels: Vec<usize>,
    pub mapping_layers: usize,
    pub latent_dim: usize,
    pub kernel_size: usize,
}

impl ArchConfig {
    /// Named presets: `toy8`, `toy32` (desk scale), `sg2-256`, `sg2-512`, `sg2-1024` (config-f).
    pub fn preset(name: &str) -> Result<Self> {
        let sg2 = |name: &str, out: usize| {
            let all = [512, 512, 512, 512, 512, 256, 128, 64, 32];
            let levels = out.trailing_zeros() as usize - 1;
            ArchConfig {
                name: name.to_string(),
                base_resolution: 4,
                output_resolution: out,
                channels: all[..levels].to_vec(),
                mapping_layers: 8,
                latent_dim: 512,
                kernel_size: 3,
            }
        };
        Ok(match name {
            "toy32" => ArchConfig {
                name: name.into(),
                base_resolution: 4,
                output_resolution: 32,
                channels: vec![64, 32, 16, 8],
                mapping_layers: 2,
                latent_dim: 64,
                kernel_size: 3,
            },
            "toy8" => ArchConfig {
                name: name.into(),
                base_resolution: 4,
                output_resolution: 8,
                channels: vec![16, 8],
                mapping_layers: 2,
                latent_dim: 16,
                kernel_size: 3,
            },
            "sg2-256" => sg2(name, 256),
            "sg2-512" => sg2(name, 512),
            "sg2-1024" => sg2(name, 1024),
            other => return Err(Error::Config(format!("unknown architecture preset '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub name: String,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub channel_schedule: Vec<(usize, usize)>,
    pub mapping_layers: usize,
    pub latent_dim: usize,
    pub style_layers: Vec<StyleLayerInfo>,
    pub fingerprint: String,
}

#[derive(Serialize)]
struct CanonicalDescriptor<'a> {
    name: &'a str,
    base_resolution: usize,
    output_resolution: usize,
    channel_schedule: &'a [(usize, usize)],
    mapping_layers: usize,
    latent_dim: usize,
    style_layers: &'a [StyleLayerInfo],
}

/// Which generator part a weight slot belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Mapping,
    Affine,
    Synthesis,
    Trgb,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
}

impl SlotSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct ConvSlots {
    pub style: usize,
    pub weight: usize,
    pub bias: usize,
    pub noise_strength: usize,
}

#[derive(Clone, Debug)]
pub struct TrgbSlots {
    pub style: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub struct BlockSlots {
    pub resolution: usize,
    pub convs: Vec<ConvSlots>,
    pub trgb: TrgbSlots,
}

/// Slot indices for every layer, resolved once per descriptor.
#[derive(Clone, Debug)]
pub struct SlotLayout {
    pub mapping: Vec<(usize, usize)>,
    pub affine: Vec<(usize, usize)>,
    pub const_input: usize,
    pub blocks: Vec<BlockSlots>,
}

pub fn build_architecture(cfg: &ArchConfig) -> Result<ArchitectureDescriptor> {
    let pow2 = |v: usize| v >= 1 && v.is_power_of_two();
    if !pow2(cfg.base_resolution) || !pow2(cfg.output_resolution) {
        return Err(Error::Config("resolutions must be powers of two".into()));
    }
    if cfg.base_resolution > cfg.output_resolution {
        return Err(Error::Config("base resolution exceeds output resolution".into()));
    }
    let levels = (cfg.output_resolution / cfg.base_resolution).trailing_zeros() as usize + 1;
    if cfg.channels.len() != levels {
        return Err(Error::Config(format!(
            "expected {levels} channel entries for {}..{}, got {}",
            cfg.base_resolution,
            cfg.output_resolution,
            cfg.channels.len()
        )));
    }
    if cfg.channels.contains(&0) || cfg.latent_dim == 0 || cfg.mapping_layers == 0 {
        return Err(Error::Config("channel counts, latent dim and mapping depth must be positive".into()));
    }
    if cfg.kernel_size.is_multiple_of(2) {
        return Err(Error::Config("kernel size must be odd".into()));
    }
    let schedule: Vec<(usize, usize)> = (0..levels)
        .map(|i| (cfg.base_resolution << i, cfg.channels[i]))
        .collect();
    let mut style_layers = Vec::new();
    for (i, &(res, ch)) in schedule.iter().enumerate() {
        let conv = |in_channels, upsample| StyleLayerInfo {
            kind: LayerKind::Conv,
            resolution: res,
            in_channels,
            out_channels: ch,
            kernel_size: cfg.kernel_size,
            upsample,
        };
        if i > 0 {
            style_layers.push(conv(schedule[i - 1].1, true));
        }
        style_layers.push(conv(ch, false));
        style_layers.push(StyleLayerInfo {
            kind: LayerKind::Trgb,
            resolution: res,
            in_channels: ch,
            out_channels: 3,
            kernel_size: 1,
            upsample: false,
        });
    }
    let mut desc = ArchitectureDescriptor {
        name: cfg.name.clone(),
        base_resolution: cfg.base_resolution,
        output_resolution: cfg.output_resolution,
        channel_schedule: schedule,
        mapping_layers: cfg.mapping_layers,
        latent_dim: cfg.latent_dim,
        style_layers,
        fingerprint: String::new(),
    };
    desc.fingerprint = desc.compute_fingerprint();
    Ok(desc)
}

impl ArchitectureDescriptor {
    /// Descriptor of a named preset (`toy8`, `toy32`, `sg2-256`, `sg2-512`, `sg2-1024`).
    pub fn preset(name: &str) -> Result<Self> {
        build_architecture(&ArchConfig::preset(name)?)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&CanonicalDescriptor {
            name: &self.name,
            base_resolution: self.base_resolution,
            output_resolution: self.output_resolution,
            channel_schedule: &self.channel_schedule,
            mapping_layers: self.mapping_layers,
            latent_dim: self.latent_dim,
            style_layers: &self.style_layers,
        })
        .expect("descriptor serializes")
    }

    pub fn compute_fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex(&digest[..16])
    }

    /// Recomputes the fingerprint and checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = build_architecture(&ArchConfig {
            name: self.name.clone(),
            base_resolution: self.base_resolution,
            output_resolution: self.output_resolution,
            channels: self.channel_schedule.iter().map(|&(_, c)| c).collect(),
            mapping_layers: self.mapping_layers,
            latent_dim: self.latent_dim,
            kernel_size: self
                .style_layers
                .iter()
                .find(|l| l.kind == LayerKind::Conv)
                .map_or(3, |l| l.kernel_size),
        })?;
        if rebuilt.canonical_json() != self.canonical_json() {
            return Err(Error::Config("descriptor is not self-consistent".into()));
        }
        if rebuilt.fingerprint != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: rebuilt.fingerprint,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn num_styles(&self) -> usize {
        self.style_layers.len()
    }

    pub fn style_dims(&self) -> Vec<usize> {
        self.style_layers.iter().map(|l| l.in_channels).collect()
    }

    pub fn style_dim_total(&self) -> usize {
        self.style_layers.iter().map(|l| l.in_channels).sum()
    }

    pub fn channels_at(&self, resolution: usize) -> Option<usize> {
        self.channel_schedule
            .iter()
            .find(|&&(r, _)| r == resolution)
            .map(|&(_, c)| c)
    }

    /// Style-layer indices of the convs and the tRGB layer of one block.
    pub fn block_layers(&self, resolution: usize) -> Option<(Vec<usize>, usize)> {
        let convs: Vec<usize> = self
            .style_layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.resolution == resolution && l.kind == LayerKind::Conv)
            .map(|(i, _)| i)
            .collect();
        let trgb = self
            .style_layers
            .iter()
            .position(|l| l.resolution == resolution && l.kind == LayerKind::Trgb)?;
        Some((convs, trgb))
    }

    /// Every weight tensor of the generator, in canonical order.
    pub fn weight_slots(&self) -> Vec<SlotSpec> {
        let slot = |name: String, shape: Vec<usize>, component| SlotSpec {
            name,
            shape,
            component,
        };
        let d = self.latent_dim;
        let mut slots = Vec::new();
        for l in 0..self.mapping_layers {
            slots.push(slot(format!("mapping.{l}.weight"), vec![d, d], Component::Mapping));
            slots.push(slot(format!("mapping.{l}.bias"), vec![d], Component::Mapping));
        }
        for (i, layer) in self.style_layers.iter().enumerate() {
            slots.push(slot(format!("affine.{i}.weight"), vec![layer.in_channels, d], Component::Affine));
            slots.push(slot(format!("affine.{i}.bias"), vec![layer.in_channels], Component::Affine));
        }
        let (base, c0) = self.channel_schedule[0];
        slots.push(slot("synthesis.const".into(), vec![c0, base, base], Component::Synthesis));
        for &(res, _) in &self.channel_schedule {
            let mut conv_idx = 0;
            for layer in self.style_layers.iter().filter(|l| l.resolution == res) {
                let k = layer.kernel_size;
                match layer.kind {
                    LayerKind::Conv => {
                        let prefix = format!("synthesis.b{res}.conv{conv_idx}");
                        slots.push(slot(
                            format!("{prefix}.weight"),
                            vec![layer.out_channels, layer.in_channels, k, k],
                            Component::Synthesis,
                        ));
                        slots.push(slot(format!("{prefix}.bias"), vec![layer.out_channels], Component::Synthesis));
                        slots.push(slot(format!("{prefix}.noise_strength"), vec![1], Component::Synthesis));
                        conv_idx += 1;
                    }
                    LayerKind::Trgb => {
                        let prefix = format!("synthesis.b{res}.torgb");
                        slots.push(slot(
                            format!("{prefix}.weight"),
                            vec![3, layer.in_channels, k, k],
                            Component::Trgb,
                        ));
                        slots.push(slot(format!("{prefix}.bias"), vec![3], Component::Trgb));
                    }
                }
            }
        }
        slots
    }

    pub fn layout(&self) -> SlotLayout {
        let slots = self.weight_slots();
        let index: HashMap<&str, usize> = slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.as_str(), i))
            .collect();
        let at = |name: String| index[name.as_str()];
        let mapping = (0..self.mapping_layers)
            .map(|l| (at(format!("mapping.{l}.weight")), at(format!("mapping.{l}.bias"))))
            .collect();
        let affine = (0..self.num_styles())
            .map(|i| (at(format!("affine.{i}.weight")), at(format!("affine.{i}.bias"))))
            .collect();
        let blocks = self
            .channel_schedule
            .iter()
            .map(|&(res, _)| {
                let (conv_styles, trgb_style) = self.block_layers(res).expect("block exists");
                let convs = conv_styles
                    .iter()
                    .enumerate()
                    .map(|(j, &style)| {
                        let prefix = format!("synthesis.b{res}.conv{j}");
                        ConvSlots {
                            style,
                            weight: at(format!("{prefix}.weight")),
                            bias: at(format!("{prefix}.bias")),
                            noise_strength: at(format!("{prefix}.noise_strength")),
                        }
                    })
                    .collect();
                BlockSlots {
                    resolution: res,
                    convs,
                    trgb: TrgbSlots {
                        style: trgb_style,
                        weight: at(format!("synthesis.b{res}.torgb.weight")),
                        bias: at(format!("synthesis.b{res}.torgb.bias")),
                    },
                }
            })
            .collect();
        SlotLayout {
            mapping,
            affine,
            const_input: at("synthesis.const".into()),
            blocks,
        }
    }
}

/// Gaussian input latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentZ(pub Tensor);

/// Mapping-network output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentW(pub Tensor);

/// Standard-normal latent drawn from a seed.
pub fn sample_latent(seed: u64, latent_dim: usize) -> LatentZ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentZ(Tensor::randn(&[latent_dim], 1.0, &mut rng))
}

/// Concatenated per-layer style vectors `s = (s_1, ..., s_N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpacePoint {
    pub styles: Vec<Tensor>,
}

impl StyleSpacePoint {
    pub fn zeros(desc: &ArchitectureDescriptor) -> Self {
        Self {
            styles: desc.style_dims().into_iter().map(|n| Tensor::zeros(&[n])).collect(),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.styles.iter().map(Tensor::numel).sum()
    }

    pub fn check(&self, desc: &ArchitectureDescriptor) -> Result<()> {
        if self.styles.len() != desc.num_styles() {
            return Err(Error::Shape(format!(
                "{} style vectors for a generator with {} style layers",
                self.styles.len(),
                desc.num_styles()
            )));
        }
        for (i, (s, n)) in self.styles.iter().zip(desc.style_dims()).enumerate() {
            if s.numel() != n {
                return Err(Error::Shape(format!("style {i} has length {}, expected {n}", s.numel())));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.styles.iter().flat_map(|s| s.data().iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    FrozenZero,
    FixedSeeded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub truncation_psi: f64,
    pub seed: u64,
    pub noise_mode: NoiseMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            truncation_psi: 1.0,
            seed: 0,
            noise_mode: NoiseMode::FrozenZero,
        }
    }
}

impl SamplerConfig {
    pub fn with_psi(psi: f64) -> Self {
        Self {
            truncation_psi: psi,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.truncation_psi > 0.0 && self.truncation_psi <= 1.0) {
            return Err(Error::Config(format!("truncation psi {} outside (0, 1]", self.truncation_psi)));
        }
        Ok(())
    }

    /// Noise plane for one conv layer, or `None` in frozen-zero mode.
    pub fn noise_plane(&self, style_index: usize, resolution: usize) -> Option<Tensor> {
        match self.noise_mode {
            NoiseMode::FrozenZero => None,
            NoiseMode::FixedSeeded => {
                let seed = self
                    .seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(style_index as u64 + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(Tensor::randn(&[resolution, resolution], 1.0, &mut rng))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub source: String,
    /// Content hashes of ancestor generators, oldest first.
    pub lineage: Vec<String>,
}

/// All generator tensors, aligned with [`ArchitectureDescriptor::weight_slots`],
/// plus the truncation center `w_avg`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    descriptor: Arc<ArchitectureDescriptor>,
    tensors: Vec<Tensor>,
    w_avg: Tensor,
    pub meta: WeightsMeta,
}

impl GeneratorWeights {
    /// Deterministic random initialization (pre-scaled He-style weights,
    /// affine biases at 1), with `w_avg` estimated from mapped samples.
    pub fn random(descriptor: &ArchitectureDescriptor, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = descriptor
            .weight_slots()
            .iter()
            .map(|slot| {
                let name = slot.name.as_str();
                let shape = &slot.shape;
                if name.ends_with(".bias") {
                    if name.starts_with("affine.") {
                        Tensor::full(shape, 1.0)
                    } else {
                        Tensor::zeros(shape)
                    }
                } else if name.ends_with(".noise_strength") {
                    Tensor::zeros(shape)
                } else if name == "synthesis.const" {
                    Tensor::randn(shape, 1.0, &mut rng)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if slot.component == Component::Trgb { 0.5 } else { 1.0 };
                    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        Self::from_tensors(descriptor.clone(), tensors, None, WeightsMeta {
            source: format!("random-init seed={seed}"),
            lineage: Vec::new(),
        })
    }

    /// Assembles weights from tensors in slot order. `w_avg = None` estimates it.
    pub fn from_tensors(
        descriptor: ArchitectureDescriptor,
        tensors: Vec<Tensor>,
        w_avg: Option<Tensor>,
        meta: WeightsMeta,
    ) -> Result<Self> {
        descriptor.validate()?;
        let slots = descriptor.weight_slots();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", slots.len(), tensors.len())));
        }
        for (slot, t) in slots.iter().zip(&tensors) {
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    slot.name,
                    slot.shape,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { location: slot.name.clone() });
            }
        }
        let mut weights = Self {
            w_avg: Tensor::zeros(&[descriptor.latent_dim]),
            descriptor: Arc::new(descriptor),
            tensors,
            meta,
        };
        weights.w_avg = match w_avg {
            Some(w) if w.shape() == [weights.descriptor.latent_dim] => w,
            Some(w) => return Err(Error::Shape(format!("w_avg shape {:?}", w.shape()))),
            None => weights.estimate_w_avg(W_AVG_SAMPLES)?,
        };
        Ok(weights)
    }

    fn estimate_w_avg(&self, samples: usize) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(W_AVG_SEED);
        let dim = self.descriptor.latent_dim;
        let mut acc = vec![0.0; dim];
        for _ in 0..samples {
            let z = Tensor::randn(&[dim], 1.0, &mut rng);
            let g = Graph::new();
            let bound = self.bind_frozen(&g);
            let w = bound.mapping(g.constant(z))?;
            for (a, v) in acc.iter_mut().zip(w.value().data()) {
                *a += v;
            }
        }
        // rounded through f32 so checkpoints reproduce it exactly
        Ok(Tensor::from_vec(
            acc.into_iter().map(|v| (v / samples as f64) as f32 as f64).collect(),
        ))
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn fingerprint(&self) -> &str {
        &self.descriptor.fingerprint
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn w_avg(&self) -> &Tensor {
        &self.w_avg
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        let idx = self.descriptor.weight_slots().iter().position(|s| s.name == name)?;
        Some(&self.tensors[idx])
    }

    pub fn named(&self) -> impl Iterator<Item = (SlotSpec, &Tensor)> {
        self.descriptor.weight_slots().into_iter().zip(self.tensors.iter())
    }

    /// Descriptor rebuilt purely from tensor shapes.
    pub fn derive_descriptor(&self) -> Result<ArchitectureDescriptor> {
        let shape_of = |name: &str| -> Result<Vec<usize>> {
            self.tensor(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Shape(format!("missing {name}")))
        };
        let latent_dim = shape_of("mapping.0.weight")?[0];
        let mapping_layers = self
            .named()
            .filter(|(s, _)| s.component == Component::Mapping && s.name.ends_with(".weight"))
            .count();
        let base = shape_of("synthesis.const")?[1];
        let mut channels = Vec::new();
        let mut res = base;
        let mut kernel = 3;
        while let Some(t) = self.tensor(&format!("synthesis.b{res}.torgb.weight")) {
            channels.push(t.shape()[1]);
            if let Some(k) = self.tensor(&format!("synthesis.b{res}.conv0.weight")) {
                kernel = k.shape()[2];
            }
            res *= 2;
        }
        build_architecture(&ArchConfig {
            name: self.descriptor.name.clone(),
            base_resolution: base,
            output_resolution: res / 2,
            channels,
            mapping_layers,
            latent_dim,
            kernel_size: kernel,
        })
    }

    /// SHA-256 over slot names, tensor bits and `w_avg`.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.descriptor.fingerprint.as_bytes());
        for (slot, t) in self.named() {
            h.update(slot.name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in self.w_avg.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Copy whose lineage records `self` as parent.
    pub fn derive_child(&self, tensors: Vec<Tensor>, source: impl Into<String>) -> Result<Self> {
        let mut lineage = self.meta.lineage.clone();
        lineage.push(self.content_hash());
        Self::from_tensors(
            (*self.descriptor).clone(),
            tensors,
            Some(self.w_avg.clone()),
            WeightsMeta {
                source: source.into(),
                lineage,
            },
        )
    }

    /// Binds every tensor as a constant leaf.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundGenerator<'g> {
        self.bind(graph, |_| false)
    }

    /// Binds tensors as graph leaves; slot `i` is a parameter iff `trainable(i)`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(usize) -> bool) -> BoundGenerator<'g> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundGenerator {
            descriptor: self.descriptor.clone(),
            layout: Rc::new(self.descriptor.layout()),
            vars,
            w_avg: graph.constant(self.w_avg.clone()),
        }
    }

    pub fn map_latent(&self, z: &LatentZ, psi: f64) -> Result<LatentW> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::Config(format!("truncation psi {psi} outside [0, 1]")));
        }
        self.check_latent(&z.0)?;
        let g = Graph::new();
        let w = self.bind_frozen(&g).map_latent(g.constant(z.0.clone()), psi)?;
        Ok(LatentW((*w.value()).clone()))
    }

    pub fn affine_styles(&self, w: &LatentW) -> Result<StyleSpacePoint> {
        self.check_latent(&w.0)?;
        let g = Graph::new();
        let styles = self.bind_frozen(&g).styles(g.constant(w.0.clone()));
        Ok(StyleSpacePoint {
            styles: styles.iter().map(|s| (*s.value()).clone()).collect(),
        })
    }

    pub fn synthesize(
        &self,
        styles: &StyleSpacePoint,
        offsets: Option<&WeightOffsets>,
        cfg: &SamplerConfig,
    ) -> Result<Image> {
        styles.check(&self.descriptor)?;
        let g = Graph::new();
        let bound = self.bind_frozen(&g);
        let style_vars: Vec<Var> = styles.styles.iter().map(|s| g.constant(s.clone())).collect();
        let bound_offsets = match offsets {
            Some(o) => {
                o.check(&self.descriptor)?;
                Some(o.bind_constant(&g))
            }
            None => None,
        };
        let img = bound.synthesize(&style_vars, bound_offsets.as_ref(), cfg)?;
        Ok((*img.value()).clone())
    }

    /// Full `z -> image` pass under `cfg`.
    pub fn generate(&self, z: &LatentZ, cfg: &SamplerConfig) -> Result<Image> {
        cfg.validate()?;
        let w = self.map_latent(z, cfg.truncation_psi)?;
        let styles = self.affine_styles(&w)?;
        self.synthesize(&styles, None, cfg)
    }

    fn check_latent(&self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.descriptor.latent_dim] {
            return Err(Error::Shape(format!(
                "latent of shape {:?}, expected [{}]",
                t.shape(),
                self.descriptor.latent_dim
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite { location: "latent".into() });
        }
        Ok(())
    }
}

/// Modulated convolution of `C × H × W` features: scale the kernel per input
/// channel by `style`, optionally demodulate each output channel, then convolve.
pub fn modulated_conv<'g>(features: Var<'g>, kernel: Var<'g>, style: Var<'g>, demodulate: bool) -> Var<'g> {
    let mut k = kernel.scale_in_channels(style);
    if demodulate {
        k = k.demodulate(DEMOD_EPS);
    }
    features.conv2d(k)
}

/// Value-level [`modulated_conv`] with shape validation.
pub fn modulated_conv_values(features: &Tensor, kernel: &Tensor, style: &Tensor, demodulate: bool) -> Result<Tensor> {
    let ks = kernel.shape();
    if ks.len() != 4 || features.shape().len() != 3 {
        return Err(Error::Shape("kernel must be 4-D and features 3-D".into()));
    }
    if style.numel() != ks[1] || features.shape()[0] != ks[1] {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, features have {}, style has {}",
            ks[1],
            features.shape()[0],
            style.numel()
        )));
    }
    let g = Graph::new();
    let out = modulated_conv(
        g.constant(features.clone()),
        g.constant(kernel.clone()),
        g.constant(style.clone()),
        demodulate,
    );
    Ok((*out.value()).clone())
}

/// Generator tensors bound into a [`Graph`].
pub struct BoundGenerator<'g> {
    descriptor: Arc<ArchitectureDescriptor>,
    layout: Rc<SlotLayout>,
    vars: Vec<Var<'g>>,
    w_avg: Var<'g>,
}

impl<'g> BoundGenerator<'g> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    /// `f_M(z)`: second-moment normalization followed by leaky-ReLU dense layers.
    pub fn mapping(&self, z: Var<'g>) -> Result<Var<'g>> {
        let mut x = z.div(z.square().mean().offset(1e-8).sqrt());
        for (l, &(w, b)) in self.layout.mapping.iter().enumerate() {
            x = self.vars[w].matvec(x).add(self.vars[b]).leaky_relu(LRELU_SLOPE, LRELU_GAIN);
            if !x.value().is_finite() {
                return Err(Error::NonFinite { location: format!("mapping layer {l}") });
            }
        }
        Ok(x)
    }

    /// `w = w_avg + psi * (f_M(z) - w_avg)`.
    pub fn map_latent(&self, z: Var<'g>, psi: f64) -> Result<Var<'g>> {
        let w = self.mapping(z)?;
        if psi == 1.0 {
            return Ok(w);
        }
        Ok(self.w_avg.add(w.sub(self.w_avg).scale(psi)))
    }

    pub fn styles(&self, w: Var<'g>) -> Vec<Var<'g>> {
        self.layout
            .affine
            .iter()
            .map(|&(a, b)| self.vars[a].matvec(w).add(self.vars[b]))
            .collect()
    }

    pub fn synthesize(
        &self,
        styles: &[Var<'g>],
        offsets: Option<&BoundOffsets<'g>>,
        cfg: &SamplerConfig,
    ) -> Result<Var<'g>> {
        if styles.len() != self.descriptor.num_styles() {
            return Err(Error::Shape("style count does not match descriptor".into()));
        }
        let check = |v: Var<'g>, layer: usize| -> Result<Var<'g>> {
            if v.value().is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { location: format!("style layer {layer}") })
            }
        };
        let mut x = self.vars[self.layout.const_input];
        let mut rgb: Option<Var<'g>> = None;
        for block in &self.layout.blocks {
            let block_offsets = offsets.filter(|o| o.block_resolution == block.resolution);
            for (j, conv) in block.convs.iter().enumerate() {
                let info = &self.descriptor.style_layers[conv.style];
                if info.upsample {
                    x = x.upsample2x();
                }
                let mut kernel = self.vars[conv.weight];
                if let Some(o) = block_offsets {
                    kernel = kernel.add_spatial_broadcast(o.convs[j]);
                }
                x = modulated_conv(x, kernel, styles[conv.style], true);
                if let Some(noise) = cfg.noise_plane(conv.style, block.resolution) {
                    x = x.add_noise(self.vars[conv.noise_strength], Rc::new(noise));
                }
                x = x
                    .add_channel_bias(self.vars[conv.bias])
                    .leaky_relu(LRELU_SLOPE, LRELU_GAIN);
                x = check(x, conv.style)?;
            }
            let mut kernel = self.vars[block.trgb.weight];
            if let Some(o) = block_offsets {
                kernel = kernel.add_spatial_broadcast(o.trgb);
            }
            let y = modulated_conv(x, kernel, styles[block.trgb.style], false)
                .add_channel_bias(self.vars[block.trgb.bias]);
            let y = check(y, block.trgb.style)?;
            rgb = Some(match rgb {
                Some(prev) => prev.upsample2x().add(y),
                None => y,
            });
        }
        Ok(rgb.expect("at least one block"))
    }
}
