//! Adaptation loops: hyperparameter presets, Adam, the generic adaptation
//! run over any [`ParamSpaceKind`], the alternating adversarial run and
//! latent inversion.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{sample_latent, GeneratorWeights, LatentZ, SamplerConfig};
use crate::autodiff::{Graph, Var};
use crate::directions::{StyleDomainDirection, TrainingMeta};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, directional_loss_towards, one_shot_loss, AugmentationPolicy, Discriminator,
    EmbeddingBackend, NormGuard, OneShotSpec, TextDomainSpec,
};
use crate::paramspace::{fold_offsets, offset_slots, weight_mask, ParamSpaceKind, WeightOffsets};
use crate::tensor::{Image, Tensor};

pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_BATCH: usize = 4;
pub const DEFAULT_ITERATIONS: usize = 300;
pub const ADA_ITERATIONS: usize = 500;
pub const INVERSION_STEPS: usize = 1000;
pub const INVERSION_PSI: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SimilarText,
    SimilarOneshot,
    Ada,
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similar_text" => Ok(Regime::SimilarText),
            "similar_oneshot" => Ok(Regime::SimilarOneshot),
            "ada" => Ok(Regime::Ada),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SimilarText => "similar_text",
            Regime::SimilarOneshot => "similar_oneshot",
            Regime::Ada => "ada",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !beta_ok(self.betas.0) || !beta_ok(self.betas.1) {
            return Err(Error::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer settings per parameter space and regime.
///
/// Similar-domain regimes use the per-space Adam table; Affine+ and
/// StyleSpace+ reuse the Affine and StyleSpace rows. The ADA regime keeps
/// the StyleGAN2-ADA generator optimizer (lr 0.002, betas (0, 0.99)) and
/// raises lr to 0.02 for Affine+, StyleSpace and StyleSpace+.
pub fn preset(kind: ParamSpaceKind, regime: Regime) -> Result<Hyperparams> {
    use ParamSpaceKind::*;
    let (learning_rate, betas, iterations) = match regime {
        Regime::SimilarText | Regime::SimilarOneshot => {
            let (lr, b) = match kind {
                SyntConv | Full => (0.002, (0.0, 0.999)),
                Affine | AffinePlus(_) => (0.01, (0.0, 0.999)),
                Mapping => (0.3, (0.0, 0.999)),
                StyleSpace | StyleSpacePlus(_) => (0.05, (0.9, 0.999)),
            };
            (lr, b, DEFAULT_ITERATIONS)
        }
        Regime::Ada => {
            let lr = match kind {
                AffinePlus(_) | StyleSpace | StyleSpacePlus(_) => 0.02,
                Full | SyntConv | Affine | Mapping => 0.002,
            };
            (lr, (0.0, 0.99), ADA_ITERATIONS)
        }
    };
    Ok(Hyperparams {
        learning_rate,
        betas,
        weight_decay: 0.0,
        batch_size: DEFAULT_BATCH,
        iterations,
        seed: 0,
    })
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_hyperparams(hp: &Hyperparams) -> Self {
        Self::new(hp.learning_rate, hp.betas, hp.weight_decay)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] + self.weight_decay * *pv;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Everything an objective may look at for one batch.
pub struct ObjectiveInputs<'g, 'a> {
    pub generated: &'a [Var<'g>],
    pub base: &'a [Image],
    pub reference_reconstruction: Option<Var<'g>>,
    /// Trainable `Δs` vars for StyleSpace kinds.
    pub direction: Option<&'a [Var<'g>]>,
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    /// Whether base images from the frozen parent are needed.
    fn needs_base(&self) -> bool {
        false
    }

    /// Latent and truncation at which the current generator should also be
    /// rendered for a reconstruction term.
    fn reference_latent(&self) -> Option<(&LatentZ, f64)> {
        None
    }

    fn loss<'g>(&self, inputs: &ObjectiveInputs<'g, '_>) -> Result<Var<'g>>;
}

/// Text-guided directional loss.
pub struct TextObjective {
    pub spec: TextDomainSpec,
    pub backend: Arc<dyn EmbeddingBackend>,
    pub guard: NormGuard,
    delta_t: Tensor,
}

impl TextObjective {
    /// Uses [`NormGuard::Clamp`], since generated and base images coincide
    /// at initialization.
    pub fn new(spec: TextDomainSpec, backend: Arc<dyn EmbeddingBackend>) -> Result<Self> {
        let delta_t = spec.direction(backend.as_ref())?;
        Ok(Self {
            spec,
            backend,
            guard: NormGuard::Clamp,
            delta_t,
        })
    }
}

impl Objective for TextObjective {
    fn name(&self) -> &str {
        "text"
    }
    fn needs_base(&self) -> bool {
        true
    }
    fn loss<'g>(&self, inputs: &ObjectiveInputs<'g, '_>) -> Result<Var<'g>> {
        directional_loss_towards(inputs.generated, inputs.base, &self.delta_t, self.backend.as_ref(), self.guard)
    }
}

/// One-shot composite loss; `reference_latent` enables the reconstruction term.
pub struct OneShotObjective {
    pub spec: OneShotSpec,
    pub backend: Arc<dyn EmbeddingBackend>,
    pub reference_latent: Option<(LatentZ, f64)>,
    pub guard: NormGuard,
}

impl OneShotObjective {
    pub fn new(spec: OneShotSpec, backend: Arc<dyn EmbeddingBackend>, reference_latent: Option<(LatentZ, f64)>) -> Self {
        Self {
            spec,
            backend,
            reference_latent,
            guard: NormGuard::Clamp,
        }
    }
}

impl Objective for OneShotObjective {
    fn name(&self) -> &str {
        "oneshot"
    }
    fn needs_base(&self) -> bool {
        true
    }
    fn reference_latent(&self) -> Option<(&LatentZ, f64)> {
        self.reference_latent.as_ref().map(|(z, psi)| (z, *psi))
    }
    fn loss<'g>(&self, inputs: &ObjectiveInputs<'g, '_>) -> Result<Var<'g>> {
        let terms = one_shot_loss(
            inputs.generated,
            inputs.base,
            inputs.reference_reconstruction,
            &self.spec,
            self.backend.as_ref(),
            self.guard,
        )?;
        Ok(terms.total)
    }
}

/// Synthetic objective: squared distance of each image's per-channel mean
/// color to `target`, averaged over the batch.
pub struct MeanColorObjective {
    pub target: [f64; 3],
}

/// Per-channel spatial means of a `3 × H × W` image as a differentiable 3-vector.
pub fn channel_means<'g>(image: Var<'g>) -> Var<'g> {
    let v = image.value();
    let n = v.numel();
    let plane = n / 3;
    let mut sel = vec![0.0; 3 * n];
    for c in 0..3 {
        sel[c * n + c * plane..c * n + (c + 1) * plane].fill(1.0 / plane as f64);
    }
    let m = image.graph().constant(Tensor::new(vec![3, n], sel).expect("selector"));
    m.matvec(image.flatten())
}

impl Objective for MeanColorObjective {
    fn name(&self) -> &str {
        "mean_color"
    }
    fn loss<'g>(&self, inputs: &ObjectiveInputs<'g, '_>) -> Result<Var<'g>> {
        let g = inputs.generated[0].graph();
        let target = g.constant(Tensor::from_vec(self.target.to_vec()));
        let terms: Vec<Var<'g>> = inputs
            .generated
            .iter()
            .map(|&x| channel_means(x).sub(target).square().sum())
            .collect();
        Ok(g.concat(&terms).mean())
    }
}

/// Synthetic convex objective `Σ_i |Δs_i − t_i|²` over the direction itself.
pub struct QuadraticObjective {
    pub target: Vec<Tensor>,
}

impl Objective for QuadraticObjective {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn loss<'g>(&self, inputs: &ObjectiveInputs<'g, '_>) -> Result<Var<'g>> {
        let dir = inputs
            .direction
            .ok_or_else(|| Error::Config("quadratic objective needs a StyleSpace kind".into()))?;
        let g = inputs.generated[0].graph();
        let terms: Vec<Var<'g>> = dir
            .iter()
            .zip(&self.target)
            .map(|(&d, t)| d.sub(g.constant(t.clone())).square().sum())
            .collect();
        Ok(g.concat(&terms).sum())
    }
}

/// Generator-side hinge loss against a fixed discriminator.
pub struct AdversarialObjective {
    pub disc: Discriminator,
    pub real: Vec<Image>,
    pub aug: AugmentationPolicy,
}

impl Objective for AdversarialObjective {
    fn name(&self) -> &str {
        "adversarial"
    }
    fn loss<'g>(&self, inputs: &ObjectiveInputs<'g, '_>) -> Result<Var<'g>> {
        let g = inputs.generated[0].graph();
        let d = self.disc.bind(g, false);
        Ok(adversarial_losses(inputs.generated, &self.real, &d, &self.aug)?.g_loss)
    }
}

/// Latents are drawn fresh each iteration or from a fixed pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    #[default]
    Resample,
    FixedPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub latent_mode: LatentMode,
    pub label: String,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            latent_mode: LatentMode::Resample,
            label: "adapted".into(),
        }
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [a, b] {
        x = (x ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x ^= x >> 31;
    }
    x
}

/// Latent `k` of iteration `iter` for run seed `seed`.
pub fn iteration_latent(seed: u64, iter: usize, k: usize, dim: usize) -> LatentZ {
    sample_latent(mix_seed(seed, iter as u64, k as u64), dim)
}

pub fn iteration_latents(seed: u64, iter: usize, batch: usize, dim: usize, mode: LatentMode) -> Vec<LatentZ> {
    let it = match mode {
        LatentMode::Resample => iter,
        LatentMode::FixedPool => 0,
    };
    (0..batch).map(|k| iteration_latent(seed, it, k, dim)).collect()
}

/// Dataset indices of the real batch in adversarial iteration `iter`.
pub fn iteration_real_indices(seed: u64, iter: usize, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, iter as u64, u64::MAX));
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

pub fn iteration_aug_seed(seed: u64, iter: usize) -> u64 {
    mix_seed(seed, iter as u64, 0xa5a5)
}

/// Sampling during training: no truncation, no noise.
pub fn training_sampler() -> SamplerConfig {
    SamplerConfig::default()
}

/// Latents and parent renders for one optimization step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub latents: Vec<LatentZ>,
    pub base: Vec<Image>,
}

impl Batch {
    pub fn new(parent: &GeneratorWeights, latents: Vec<LatentZ>, with_base: bool) -> Result<Self> {
        let base = if with_base {
            latents
                .iter()
                .map(|z| parent.generate(z, &training_sampler()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { latents, base })
    }
}

pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Gradient buffers held after the backward pass.
    pub grad_buffers: usize,
}

/// Mutable adaptation state: the generator copy plus direction and offsets.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub kind: ParamSpaceKind,
    pub weights: GeneratorWeights,
    pub delta: Option<Vec<Tensor>>,
    pub offsets: Option<WeightOffsets>,
    mask: Vec<bool>,
}

impl TrainState {
    pub fn new(parent: &GeneratorWeights, kind: ParamSpaceKind) -> Result<Self> {
        let desc = parent.descriptor();
        let offsets = match kind.offset_block() {
            Some(b) => Some(WeightOffsets::zeros(desc, b)?),
            None => None,
        };
        let delta = kind
            .is_direction()
            .then(|| desc.style_dims().into_iter().map(|n| Tensor::zeros(&[n])).collect());
        Ok(Self {
            kind,
            weights: parent.clone(),
            delta,
            offsets,
            mask: weight_mask(desc, kind),
        })
    }

    /// Names of the trainable tensors, matching [`TrainState::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let desc = self.weights.descriptor();
        let mut names: Vec<String> = desc
            .weight_slots()
            .into_iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s.name)
            .collect();
        if let Some(d) = &self.delta {
            names.extend((0..d.len()).map(|i| format!("style.{i}")));
        }
        if let Some(o) = &self.offsets {
            names.extend(
                offset_slots(desc, o.block_resolution)
                    .expect("valid block")
                    .into_iter()
                    .map(|s| s.name),
            );
        }
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .weights
            .tensors()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .collect();
        out.extend(self.delta.iter().flatten());
        out.extend(self.offsets.iter().flat_map(|o| o.tensors()));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mask = &self.mask;
        let mut out: Vec<&mut Tensor> = self
            .weights
            .tensors_mut()
            .iter_mut()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .collect();
        out.extend(self.delta.iter_mut().flatten());
        if let Some(o) = self.offsets.as_mut() {
            out.extend(o.tensors_mut());
        }
        out
    }

    /// Loss and gradients for every trainable tensor on `batch`.
    pub fn evaluate(&self, objective: &dyn Objective, batch: &Batch) -> Result<Evaluation> {
        let g = Graph::new();
        let mask = &self.mask;
        let bound = self.weights.bind(&g, |i| mask[i]);
        let delta: Option<Vec<Var>> = self
            .delta
            .as_ref()
            .map(|d| d.iter().map(|t| g.param(t.clone())).collect());
        let offsets = self.offsets.as_ref().map(|o| o.bind(&g, true));
        let cfg = training_sampler();
        let render = |z: &LatentZ, psi: f64| -> Result<Var> {
            let w = bound.map_latent(g.constant(z.0.clone()), psi)?;
            let mut styles = bound.styles(w);
            if let Some(d) = &delta {
                for (s, &dv) in styles.iter_mut().zip(d) {
                    *s = s.add(dv);
                }
            }
            bound.synthesize(&styles, offsets.as_ref(), &cfg)
        };
        let generated = batch
            .latents
            .iter()
            .map(|z| render(z, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let reference_reconstruction = match objective.reference_latent() {
            Some((z, psi)) => Some(render(z, psi)?),
            None => None,
        };
        let inputs = ObjectiveInputs {
            generated: &generated,
            base: &batch.base,
            reference_reconstruction,
            direction: delta.as_deref(),
        };
        let loss = objective.loss(&inputs)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { location: "loss".into() });
        }
        let grads = g.backward(loss);
        let mut vars: Vec<Var> = bound
            .vars()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        vars.extend(delta.iter().flatten().copied());
        if let Some(o) = &offsets {
            vars.extend(o.vars());
        }
        Ok(Evaluation {
            loss: value,
            grads: vars.iter().map(|&v| grads.get_or_zeros(v)).collect(),
            grad_buffers: grads.allocated(),
        })
    }

    /// Current generator, with offsets folded in for Affine+.
    pub fn generator(&self) -> Result<GeneratorWeights> {
        match (&self.offsets, self.kind.is_direction()) {
            (Some(o), false) => fold_offsets(&self.weights, o),
            _ => Ok(self.weights.clone()),
        }
    }

    /// Renders `z` from the current state.
    pub fn render(&self, z: &LatentZ, cfg: &SamplerConfig) -> Result<Image> {
        let w = self.weights.map_latent(z, cfg.truncation_psi)?;
        let mut styles = self.weights.affine_styles(&w)?;
        if let Some(d) = &self.delta {
            for (s, dv) in styles.styles.iter_mut().zip(d) {
                s.add_assign(dv);
            }
        }
        self.weights.synthesize(&styles, self.offsets.as_ref(), cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Largest number of gradient buffers alive after any backward pass.
    pub max_grad_buffers: usize,
    pub trainable_tensors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub kind: ParamSpaceKind,
    pub direction: Option<StyleDomainDirection>,
    /// Trained minus parent values, keyed by selection slot name.
    pub weight_deltas: Option<BTreeMap<String, Tensor>>,
    pub loss_trace: Vec<f64>,
    /// Discriminator loss per iteration for adversarial runs.
    pub aux_trace: Vec<f64>,
    pub hyperparams: Hyperparams,
    pub parent_fingerprint: String,
    pub parent_hash: String,
    pub stats: RunStats,
}

impl AdaptationResult {
    #[allow(clippy::too_many_arguments)]
    fn from_state(
        parent: &GeneratorWeights,
        state: &TrainState,
        objective: &str,
        hp: &Hyperparams,
        label: &str,
        loss_trace: Vec<f64>,
        aux_trace: Vec<f64>,
        stats: RunStats,
    ) -> Self {
        let desc = parent.descriptor();
        let direction = state.delta.as_ref().map(|d| StyleDomainDirection {
            delta_styles: d.clone(),
            offsets: state.offsets.clone(),
            fingerprint: desc.fingerprint.clone(),
            domain_label: label.to_string(),
            training_meta: TrainingMeta {
                loss_kind: objective.to_string(),
                iterations: hp.iterations,
                seed: hp.seed,
            },
            source_weights: Some(parent.content_hash()),
        });
        let weight_deltas = (!state.kind.is_direction()).then(|| {
            let mut map = BTreeMap::new();
            for ((slot, child), base) in desc
                .weight_slots()
                .into_iter()
                .zip(state.weights.tensors())
                .zip(parent.tensors())
                .zip(&state.mask)
                .filter(|(_, &m)| m)
                .map(|(x, _)| x)
            {
                map.insert(slot.name, child.sub(base));
            }
            if let Some(o) = &state.offsets {
                let slots = offset_slots(desc, o.block_resolution).expect("valid block");
                for (s, t) in slots.into_iter().zip(o.tensors()) {
                    map.insert(s.name, t.clone());
                }
            }
            map
        });
        Self {
            kind: state.kind,
            direction,
            weight_deltas,
            loss_trace,
            aux_trace,
            hyperparams: hp.clone(),
            parent_fingerprint: desc.fingerprint.clone(),
            parent_hash: parent.content_hash(),
            stats,
        }
    }

    /// The adapted generator for weight-space kinds (offsets folded in);
    /// the parent itself for direction kinds.
    pub fn child(&self, parent: &GeneratorWeights) -> Result<GeneratorWeights> {
        if parent.fingerprint() != self.parent_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.parent_fingerprint.clone(),
                found: parent.fingerprint().to_string(),
            });
        }
        let Some(deltas) = &self.weight_deltas else {
            return Ok(parent.clone());
        };
        let desc = parent.descriptor();
        let mut tensors = parent.tensors().to_vec();
        for (slot, t) in desc.weight_slots().iter().zip(tensors.iter_mut()) {
            if let Some(d) = deltas.get(&slot.name) {
                *t = t.add(d);
            }
        }
        let child = parent.derive_child(tensors, format!("adapted {}", self.kind))?;
        match self.kind.offset_block() {
            Some(b) => {
                let slots = offset_slots(desc, b)?;
                let tensors = slots
                    .iter()
                    .map(|s| {
                        deltas
                            .get(&s.name)
                            .cloned()
                            .ok_or_else(|| Error::Format(format!("missing {}", s.name)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let folded = fold_offsets(&child, &WeightOffsets::from_tensors(desc, b, tensors)?)?;
                let mut meta = child.meta.clone();
                meta.source = folded.meta.source.clone();
                Ok(GeneratorWeights::from_tensors(
                    desc.clone(),
                    folded.tensors().to_vec(),
                    Some(parent.w_avg().clone()),
                    meta,
                )?)
            }
            None => Ok(child),
        }
    }
}

/// Optimizes the `kind` selection of `parent` against `objective`.
pub fn adapt(
    parent: &GeneratorWeights,
    kind: ParamSpaceKind,
    objective: &dyn Objective,
    hp: &Hyperparams,
    opts: &AdaptOptions,
) -> Result<AdaptationResult> {
    adapt_with_progress(parent, kind, objective, hp, opts, |_, _| true)
}

/// [`adapt`] with a callback `(iterations done, total)`; returning `false` cancels.
pub fn adapt_with_progress(
    parent: &GeneratorWeights,
    kind: ParamSpaceKind,
    objective: &dyn Objective,
    hp: &Hyperparams,
    opts: &AdaptOptions,
    mut progress: impl FnMut(usize, usize) -> bool,
) -> Result<AdaptationResult> {
    hp.validate()?;
    let mut state = TrainState::new(parent, kind)?;
    let mut adam = Adam::from_hyperparams(hp);
    let dim = parent.descriptor().latent_dim;
    let mut trace = Vec::with_capacity(hp.iterations);
    let mut stats = RunStats {
        trainable_tensors: state.trainable().len(),
        ..RunStats::default()
    };
    let mut fixed: Option<Batch> = None;
    for it in 0..hp.iterations {
        let batch = match (&fixed, opts.latent_mode) {
            (Some(b), LatentMode::FixedPool) => b.clone(),
            _ => {
                let latents = iteration_latents(hp.seed, it, hp.batch_size, dim, opts.latent_mode);
                let b = Batch::new(parent, latents, objective.needs_base())?;
                if opts.latent_mode == LatentMode::FixedPool {
                    fixed = Some(b.clone());
                }
                b
            }
        };
        let eval = state.evaluate(objective, &batch).map_err(|e| match e {
            Error::NonFinite { location } => Error::NonFinite {
                location: format!("{location} at iteration {it}"),
            },
            other => other,
        })?;
        stats.max_grad_buffers = stats.max_grad_buffers.max(eval.grad_buffers);
        trace.push(eval.loss);
        adam.step(&mut state.trainable_mut(), &eval.grads);
        if !progress(it + 1, hp.iterations) {
            return Err(Error::Invalid(format!("cancelled at iteration {}", it + 1)));
        }
    }
    Ok(AdaptationResult::from_state(
        parent,
        &state,
        objective.name(),
        hp,
        &opts.label,
        trace,
        Vec::new(),
        stats,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialOptions {
    pub disc_channels: usize,
    pub disc_seed: u64,
    pub disc_lr: f64,
    pub disc_betas: (f64, f64),
    /// When false the discriminator stays at its initialization.
    pub train_disc: bool,
    /// Decay of the exponential moving average of the trained parameters
    /// that is returned instead of the last iterate. `None` disables it.
    pub ema_decay: Option<f64>,
    pub label: String,
}

impl Default for AdversarialOptions {
    fn default() -> Self {
        Self {
            disc_channels: Discriminator::DEFAULT_CHANNELS,
            disc_seed: 0,
            disc_lr: 0.002,
            disc_betas: (0.0, 0.99),
            train_disc: true,
            ema_decay: Some(0.99),
            label: "adversarial".into(),
        }
    }
}

/// Alternating D-step / G-step hinge training on `dataset`.
///
/// Returns the result (generator losses in `loss_trace`, discriminator
/// losses in `aux_trace`) and the final discriminator.
pub fn adapt_adversarial(
    parent: &GeneratorWeights,
    kind: ParamSpaceKind,
    dataset: &[Image],
    aug: &AugmentationPolicy,
    hp: &Hyperparams,
    opts: &AdversarialOptions,
    initial_disc: Option<Discriminator>,
) -> Result<(AdaptationResult, Discriminator)> {
    hp.validate()?;
    aug.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("adversarial adaptation needs a non-empty dataset".into()));
    }
    let res = parent.descriptor().output_resolution;
    let mut disc = match initial_disc {
        Some(d) => d,
        None => Discriminator::new(res, opts.disc_channels, opts.disc_seed)?,
    };
    let mut state = TrainState::new(parent, kind)?;
    let mut g_adam = Adam::from_hyperparams(hp);
    let mut d_adam = Adam::new(opts.disc_lr, opts.disc_betas, 0.0);
    let dim = parent.descriptor().latent_dim;
    let mut g_trace = Vec::with_capacity(hp.iterations);
    let mut d_trace = Vec::with_capacity(hp.iterations);
    let mut stats = RunStats {
        trainable_tensors: state.trainable().len(),
        ..RunStats::default()
    };
    if let Some(decay) = opts.ema_decay {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
        }
    }
    let mut ema: Vec<Tensor> = state.trainable().into_iter().cloned().collect();
    for it in 0..hp.iterations {
        let latents = iteration_latents(hp.seed, it, hp.batch_size, dim, LatentMode::Resample);
        let real: Vec<Image> = iteration_real_indices(hp.seed, it, hp.batch_size, dataset.len())
            .into_iter()
            .map(|i| dataset[i].clone())
            .collect();
        let step_aug = aug.with_seed(iteration_aug_seed(aug.seed, it));

        // D-step on current fakes
        let fakes: Vec<Image> = latents
            .iter()
            .map(|z| state.render(z, &training_sampler()))
            .collect::<Result<_>>()?;
        {
            let g = Graph::new();
            let bound = disc.bind(&g, opts.train_disc);
            let fake_vars: Vec<Var> = fakes.iter().map(|f| g.constant(f.clone())).collect();
            let losses = adversarial_losses(&fake_vars, &real, &bound, &step_aug)?;
            let d_loss = losses.d_loss.item();
            if !d_loss.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("discriminator loss at iteration {it}"),
                });
            }
            d_trace.push(d_loss);
            if opts.train_disc {
                let grads = g.backward(losses.d_loss);
                let gs: Vec<Tensor> = bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
                d_adam.step(&mut disc.tensors.iter_mut().collect::<Vec<_>>(), &gs);
            }
        }

        // G-step against the updated discriminator
        let objective = AdversarialObjective {
            disc: disc.clone(),
            real,
            aug: step_aug,
        };
        let batch = Batch {
            latents,
            base: Vec::new(),
        };
        let eval = state.evaluate(&objective, &batch).map_err(|e| match e {
            Error::NonFinite { location } => Error::NonFinite {
                location: format!("{location} at iteration {it}"),
            },
            other => other,
        })?;
        stats.max_grad_buffers = stats.max_grad_buffers.max(eval.grad_buffers);
        g_trace.push(eval.loss);
        g_adam.step(&mut state.trainable_mut(), &eval.grads);
        if let Some(decay) = opts.ema_decay {
            // avg += (1 - decay)(x - avg) keeps a constant parameter bit-exact
            for (avg, cur) in ema.iter_mut().zip(state.trainable()) {
                let step = cur.sub(avg).scale(1.0 - decay);
                avg.add_assign(&step);
            }
        }
    }
    if opts.ema_decay.is_some() {
        for (t, avg) in state.trainable_mut().into_iter().zip(ema) {
            *t = avg;
        }
    }
    let result = AdaptationResult::from_state(
        parent,
        &state,
        "adversarial",
        hp,
        &opts.label,
        g_trace,
        d_trace,
        stats,
    );
    Ok((result, disc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMethod {
    /// Damped Gauss-Newton on the pixel residual with a finite-difference
    /// Jacobian. One step is one accepted or rejected damping update.
    LevenbergMarquardt,
    /// Adam on pixel MSE.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub psi: f64,
    pub method: InversionMethod,
    /// Only used by [`InversionMethod::Adam`].
    pub learning_rate: f64,
    /// Seed of the initial latent.
    pub seed: u64,
    /// Stop once pixel MSE falls below this.
    pub tolerance: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: INVERSION_STEPS,
            psi: INVERSION_PSI,
            method: InversionMethod::LevenbergMarquardt,
            learning_rate: 0.01,
            seed: 0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub z: LatentZ,
    /// Pixel MSE of the returned latent.
    pub loss: f64,
    /// Pixel MSE after each step.
    pub trace: Vec<f64>,
}

/// Finds `z` such that the generator at truncation `psi` reproduces
/// `target`, starting from a latent drawn from `cfg.seed`.
///
/// The mapping network pixel-normalizes `z`, which makes `z = 0` a singular
/// point, so the search starts from a sampled latent instead.
pub fn invert(gen: &GeneratorWeights, target: &Image, cfg: &InversionConfig) -> Result<InversionResult> {
    let res = gen.descriptor().output_resolution;
    if target.shape() != [3, res, res] {
        return Err(Error::Shape(format!(
            "target {:?} does not match generator output 3×{res}×{res}",
            target.shape()
        )));
    }
    let sampler = SamplerConfig::with_psi(cfg.psi);
    sampler.validate()?;
    let z0 = sample_latent(cfg.seed, gen.descriptor().latent_dim).0;
    match cfg.method {
        InversionMethod::LevenbergMarquardt => invert_lm(gen, target, cfg, &sampler, z0),
        InversionMethod::Adam => invert_adam(gen, target, cfg, &sampler, z0),
    }
}

fn invert_lm(
    gen: &GeneratorWeights,
    target: &Image,
    cfg: &InversionConfig,
    sampler: &SamplerConfig,
    mut z: Tensor,
) -> Result<InversionResult> {
    const FD_STEP: f64 = 1e-6;
    let residual = |z: &Tensor| -> Result<Tensor> {
        let r = gen.generate(&LatentZ(z.clone()), sampler)?.sub(target);
        if !r.is_finite() {
            return Err(Error::NonFinite {
                location: "inversion residual".into(),
            });
        }
        Ok(r)
    };
    let mse = |r: &Tensor| r.dot(r) / r.numel() as f64;
    let n = z.numel();
    let mut r = residual(&z)?;
    let mut loss = mse(&r);
    let mut lambda = 1e-2;
    let mut trace = Vec::new();
    let mut jacobian = None;
    for _ in 0..cfg.steps {
        if loss < cfg.tolerance || lambda > 1e12 {
            break;
        }
        if jacobian.is_none() {
            let m = r.numel();
            let mut j = DMatrix::zeros(m, n);
            for k in 0..n {
                let mut zp = z.clone();
                zp.data_mut()[k] += FD_STEP;
                let rp = residual(&zp)?;
                for (i, (a, b)) in rp.data().iter().zip(r.data()).enumerate() {
                    j[(i, k)] = (a - b) / FD_STEP;
                }
            }
            let rv = DVector::from_column_slice(r.data());
            jacobian = Some((j.transpose() * &j, j.transpose() * rv));
        }
        let (jtj, jtr) = jacobian.as_ref().expect("jacobian computed above");
        let mut a = jtj.clone();
        for k in 0..n {
            a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
        }
        let Some(dz) = a.lu().solve(&(-jtr)) else {
            lambda *= 4.0;
            trace.push(loss);
            continue;
        };
        let candidate = z.add(&Tensor::from_vec(dz.as_slice().to_vec()));
        let rc = residual(&candidate)?;
        let lc = mse(&rc);
        if lc < loss {
            // The mapping only sees the direction of z; keeping its norm
            // fixed stops radial drift from degrading the Jacobian.
            z = candidate.scale((n as f64).sqrt() / candidate.norm());
            r = rc;
            loss = lc;
            lambda = (lambda / 3.0).max(1e-12);
            jacobian = None;
        } else {
            lambda *= 4.0;
        }
        trace.push(loss);
    }
    Ok(InversionResult {
        z: LatentZ(z),
        loss,
        trace,
    })
}

fn invert_adam(
    gen: &GeneratorWeights,
    target: &Image,
    cfg: &InversionConfig,
    sampler: &SamplerConfig,
    mut z: Tensor,
) -> Result<InversionResult> {
    let mut adam = Adam::new(cfg.learning_rate, (0.9, 0.999), 0.0);
    let mut best: Option<(f64, Tensor)> = None;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..=cfg.steps {
        let g = Graph::new();
        let bound = gen.bind_frozen(&g);
        let zv = g.param(z.clone());
        let w = bound.map_latent(zv, cfg.psi)?;
        let styles = bound.styles(w);
        let img = bound.synthesize(&styles, None, sampler)?;
        let loss = img.sub(g.constant(target.clone())).square().mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                location: format!("inversion objective at step {step}"),
            });
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, z.clone()));
        }
        if step == cfg.steps || value < cfg.tolerance {
            break;
        }
        let grads = g.backward(loss);
        adam.step(&mut [&mut z], &[grads.get_or_zeros(zv)]);
        trace.push(value);
    }
    let (loss, z) = best.expect("at least one evaluation");
    Ok(InversionResult {
        z: LatentZ(z),
        loss,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureDescriptor;

    #[test]
    fn presets_follow_tables() {
        use ParamSpaceKind::*;
        let p = preset(Affine, Regime::SimilarText).unwrap();
        assert_eq!((p.learning_rate, p.betas, p.weight_decay), (0.01, (0.0, 0.999), 0.0));
        let p = preset(StyleSpace, Regime::SimilarOneshot).unwrap();
        assert_eq!((p.learning_rate, p.betas), (0.05, (0.9, 0.999)));
        assert_eq!(preset(Mapping, Regime::SimilarText).unwrap().learning_rate, 0.3);
        assert_eq!(preset(AffinePlus(64), Regime::Ada).unwrap().learning_rate, 0.02);
        assert_eq!(preset(SyntConv, Regime::Ada).unwrap().learning_rate, 0.002);
        assert_eq!(preset(Full, Regime::SimilarText).unwrap().batch_size, 4);
    }

    #[test]
    fn adam_matches_hand_step() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.1, (0.9, 0.999), 0.0);
        adam.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5, -4.0])]);
        // first bias-corrected step moves each coordinate by lr * sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 1.9).abs() < 1e-7);
        let mut q = Tensor::from_vec(vec![3.0]);
        let mut zero = Adam::new(0.1, (0.0, 0.99), 0.0);
        zero.step(&mut [&mut q], &[Tensor::zeros(&[1])]);
        assert_eq!(q.data(), &[3.0]);
    }

    #[test]
    fn hyperparam_validation() {
        let mut hp = preset(ParamSpaceKind::Full, Regime::SimilarText).unwrap();
        hp.betas = (1.0, 0.9);
        assert!(hp.validate().is_err());
        hp.betas = (0.0, 0.9);
        hp.batch_size = 0;
        assert!(hp.validate().is_err());
    }

    #[test]
    fn zero_iterations_give_zero_direction() {
        let parent = GeneratorWeights::random(&ArchitectureDescriptor::preset("toy8").unwrap(), 0).unwrap();
        let mut hp = preset(ParamSpaceKind::StyleSpace, Regime::SimilarText).unwrap();
        hp.iterations = 0;
        let obj = MeanColorObjective { target: [0.0; 3] };
        let r = adapt(&parent, ParamSpaceKind::StyleSpace, &obj, &hp, &AdaptOptions::default()).unwrap();
        assert!(r.loss_trace.is_empty());
        assert!(r.direction.unwrap().flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stylespace_run_keeps_weight_gradients_unallocated() {
        let parent = GeneratorWeights::random(&ArchitectureDescriptor::preset("toy8").unwrap(), 0).unwrap();
        let mut hp = preset(ParamSpaceKind::StyleSpace, Regime::SimilarText).unwrap();
        hp.iterations = 3;
        let obj = MeanColorObjective { target: [0.2, 0.0, -0.2] };
        let r = adapt(&parent, ParamSpaceKind::StyleSpace, &obj, &hp, &AdaptOptions::default()).unwrap();
        assert_eq!(r.stats.trainable_tensors, parent.descriptor().num_styles());
        assert_eq!(r.stats.max_grad_buffers, parent.descriptor().num_styles());
    }

    #[test]
    fn inversion_zero_steps_returns_seeded_start() {
        let gen = GeneratorWeights::random(&ArchitectureDescriptor::preset("toy8").unwrap(), 0).unwrap();
        let target = gen.generate(&sample_latent(1, 16), &SamplerConfig::with_psi(0.7)).unwrap();
        for method in [InversionMethod::LevenbergMarquardt, InversionMethod::Adam] {
            let cfg = InversionConfig {
                steps: 0,
                method,
                seed: 9,
                ..InversionConfig::default()
            };
            let r = invert(&gen, &target, &cfg).unwrap();
            assert_eq!(r.z, sample_latent(9, 16));
        }
        assert_eq!(InversionConfig::default().steps, 1000);
        assert_eq!(InversionConfig::default().psi, 0.7);
    }

    #[test]
    fn inversion_rejects_wrong_resolution() {
        let gen = GeneratorWeights::random(&ArchitectureDescriptor::preset("toy8").unwrap(), 0).unwrap();
        let bad = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(invert(&gen, &bad, &InversionConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_zero_discriminator_leaves_selection_unchanged() {
        let parent = GeneratorWeights::random(&ArchitectureDescriptor::preset("toy8").unwrap(), 0).unwrap();
        let data = vec![Tensor::full(&[3, 8, 8], 0.3)];
        let mut hp = preset(ParamSpaceKind::StyleSpacePlus(8), Regime::Ada).unwrap();
        hp.iterations = 5;
        let opts = AdversarialOptions {
            train_disc: false,
            ..AdversarialOptions::default()
        };
        let disc = Discriminator::constant_zero(8, 4).unwrap();
        let (r, _) = adapt_adversarial(
            &parent,
            ParamSpaceKind::StyleSpacePlus(8),
            &data,
            &AugmentationPolicy::bgc(0),
            &hp,
            &opts,
            Some(disc),
        )
        .unwrap();
        assert!(r.direction.unwrap().flatten().iter().all(|&v| v == 0.0));
    }
}
