//! Cross-domain image-to-image translation through latent inversion, linear
//! weight morphing between aligned generators, and multi-stage morph plans
//! that chain direction ramps, weight blends and direction crossfades.
//!
//! A morph plan is rendered from a canonical [`MorphState`] per frame, so
//! the last frame of one stage and the first frame of the next are produced
//! from equal states and come out bit-identical.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{GeneratorWeights, LatentZ, SamplerConfig, StyleSpacePoint, WeightsMeta};
use crate::directions::{mix, render, StyleDomainDirection};
use crate::error::{Error, Result};
use crate::tensor::Image;
use crate::trainer::{invert, InversionConfig, InversionResult, INVERSION_PSI, INVERSION_STEPS};

/// Truncation used when rendering translated images.
pub const TRANSLATION_PSI_INFER: f64 = 0.8;
/// Number of leading style layers taken from the source in reference-based translation.
pub const STYLE_SPLIT: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub steps: usize,
    pub psi_opt: f64,
    pub psi_infer: f64,
    pub style_split_index: usize,
    /// Seed of the inversion start point.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            steps: INVERSION_STEPS,
            psi_opt: INVERSION_PSI,
            psi_infer: TRANSLATION_PSI_INFER,
            style_split_index: STYLE_SPLIT,
            seed: 0,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self, num_styles: usize) -> Result<()> {
        if self.style_split_index > num_styles {
            return Err(Error::Config(format!(
                "style split {} exceeds {num_styles} style layers",
                self.style_split_index
            )));
        }
        SamplerConfig::with_psi(self.psi_opt).validate()?;
        SamplerConfig::with_psi(self.psi_infer).validate()
    }

    pub fn inversion(&self) -> InversionConfig {
        InversionConfig {
            steps: self.steps,
            psi: self.psi_opt,
            seed: self.seed,
            ..InversionConfig::default()
        }
    }
}

fn check_aligned(a: &GeneratorWeights, b: &GeneratorWeights) -> Result<()> {
    if a.fingerprint() != b.fingerprint() {
        return Err(Error::Fingerprint {
            expected: a.fingerprint().to_string(),
            found: b.fingerprint().to_string(),
        });
    }
    Ok(())
}

/// Inverts `source` on `src_gen` and renders the latent on `tgt_gen`.
pub fn translate(
    source: &Image,
    src_gen: &GeneratorWeights,
    tgt_gen: &GeneratorWeights,
    cfg: &TranslationConfig,
) -> Result<Image> {
    check_aligned(src_gen, tgt_gen)?;
    cfg.validate(src_gen.descriptor().num_styles())?;
    let inv = invert(src_gen, source, &cfg.inversion())?;
    tgt_gen.generate(&inv.z, &SamplerConfig::with_psi(cfg.psi_infer))
}

/// Layers `0..split` from `source`, the rest from `reference`.
pub fn assemble_styles(source: &StyleSpacePoint, reference: &StyleSpacePoint, split: usize) -> Result<StyleSpacePoint> {
    if source.styles.len() != reference.styles.len() || split > source.styles.len() {
        return Err(Error::Shape(format!(
            "cannot split {} / {} style layers at {split}",
            source.styles.len(),
            reference.styles.len()
        )));
    }
    let styles = source.styles[..split]
        .iter()
        .chain(&reference.styles[split..])
        .cloned()
        .collect();
    Ok(StyleSpacePoint { styles })
}

/// Reference-based translation: the source is inverted on `src_gen`, the
/// reference on `tgt_gen`, and both codes pass through the target affines
/// before their style layers are spliced at `cfg.style_split_index`.
pub fn translate_ref(
    source: &Image,
    reference: &Image,
    src_gen: &GeneratorWeights,
    tgt_gen: &GeneratorWeights,
    cfg: &TranslationConfig,
) -> Result<Image> {
    check_aligned(src_gen, tgt_gen)?;
    cfg.validate(src_gen.descriptor().num_styles())?;
    let src = invert(src_gen, source, &cfg.inversion())?;
    let reference = invert(tgt_gen, reference, &cfg.inversion())?;
    translate_ref_latents(&src, &reference, tgt_gen, cfg)
}

/// [`translate_ref`] from already inverted latents.
pub fn translate_ref_latents(
    source: &InversionResult,
    reference: &InversionResult,
    tgt_gen: &GeneratorWeights,
    cfg: &TranslationConfig,
) -> Result<Image> {
    cfg.validate(tgt_gen.descriptor().num_styles())?;
    let sampler = SamplerConfig::with_psi(cfg.psi_infer);
    let styles_of = |z: &LatentZ| tgt_gen.affine_styles(&tgt_gen.map_latent(z, cfg.psi_infer)?);
    let combined = assemble_styles(&styles_of(&source.z)?, &styles_of(&reference.z)?, cfg.style_split_index)?;
    tgt_gen.synthesize(&combined, None, &sampler)
}

/// Tensorwise `(1 − α)·A + α·B`, including `w_avg`. The endpoints return
/// exact copies of the inputs.
pub fn morph_weights(a: &GeneratorWeights, b: &GeneratorWeights, alpha: f64) -> Result<GeneratorWeights> {
    check_aligned(a, b)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("morph alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let tensors = a
        .tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| x.lerp(y, alpha))
        .collect();
    let mut lineage = a.meta.lineage.clone();
    lineage.push(a.content_hash());
    GeneratorWeights::from_tensors(
        a.descriptor().clone(),
        tensors,
        Some(a.w_avg().lerp(b.w_avg(), alpha)),
        WeightsMeta {
            source: format!("morph {alpha} towards {}", b.content_hash()),
            lineage,
        },
    )
}

fn zero() -> f64 {
    0.0
}

fn one() -> f64 {
    1.0
}

/// One row of a morph. `start`/`end` are the stage parameter at its first
/// and last frame: direction strength for a ramp, blend weight towards `to`
/// for a weight blend, and the share of `to` for a crossfade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MorphStage {
    DirectionRamp {
        generator: String,
        direction: String,
        #[serde(default = "zero")]
        start: f64,
        #[serde(default = "one")]
        end: f64,
    },
    WeightBlend {
        from: String,
        to: String,
        /// Direction applied at full strength throughout the blend.
        #[serde(default)]
        direction: Option<String>,
        #[serde(default = "zero")]
        start: f64,
        #[serde(default = "one")]
        end: f64,
    },
    DirectionCrossfade {
        generator: String,
        from: String,
        to: String,
        #[serde(default = "zero")]
        start: f64,
        #[serde(default = "one")]
        end: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeneratorState {
    Named(String),
    Blend { from: String, to: String, alpha: f64 },
}

/// Everything one frame depends on besides the latent and sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphState {
    pub generator: GeneratorState,
    /// Direction names with mixing coefficients, applied at strength 1.
    /// Canonical: no zero coefficients, no repeated names, sorted by name.
    pub directions: Vec<(String, f64)>,
}

impl MorphState {
    fn new(generator: GeneratorState, directions: Vec<(String, f64)>) -> Self {
        let generator = match generator {
            GeneratorState::Blend { from, alpha: 0.0, .. } => GeneratorState::Named(from),
            GeneratorState::Blend { to, alpha: 1.0, .. } => GeneratorState::Named(to),
            g => g,
        };
        let mut merged: BTreeMap<String, f64> = BTreeMap::new();
        for (name, c) in directions {
            *merged.entry(name).or_insert(0.0) += c;
        }
        Self {
            generator,
            directions: merged.into_iter().filter(|(_, c)| *c != 0.0).collect(),
        }
    }
}

impl MorphStage {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            MorphStage::DirectionRamp { start, end, .. }
            | MorphStage::WeightBlend { start, end, .. }
            | MorphStage::DirectionCrossfade { start, end, .. } => (start, end),
        }
    }

    /// Stage parameter at position `t ∈ [0, 1]`; exact at both ends.
    pub fn parameter(&self, t: f64) -> f64 {
        let (start, end) = self.bounds();
        (1.0 - t) * start + t * end
    }

    pub fn state_at(&self, t: f64) -> MorphState {
        let p = self.parameter(t);
        match self {
            MorphStage::DirectionRamp {
                generator, direction, ..
            } => MorphState::new(GeneratorState::Named(generator.clone()), vec![(direction.clone(), p)]),
            MorphStage::WeightBlend { from, to, direction, .. } => MorphState::new(
                GeneratorState::Blend {
                    from: from.clone(),
                    to: to.clone(),
                    alpha: p,
                },
                direction.iter().map(|d| (d.clone(), 1.0)).collect(),
            ),
            MorphStage::DirectionCrossfade { generator, from, to, .. } => MorphState::new(
                GeneratorState::Named(generator.clone()),
                vec![(from.clone(), 1.0 - p), (to.clone(), p)],
            ),
        }
    }

    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        match &mut out {
            MorphStage::DirectionRamp { start, end, .. }
            | MorphStage::WeightBlend { start, end, .. }
            | MorphStage::DirectionCrossfade { start, end, .. } => std::mem::swap(start, end),
        }
        out
    }

    pub fn generator_names(&self) -> Vec<&str> {
        match self {
            MorphStage::DirectionRamp { generator, .. } | MorphStage::DirectionCrossfade { generator, .. } => {
                vec![generator]
            }
            MorphStage::WeightBlend { from, to, .. } => vec![from, to],
        }
    }

    pub fn direction_names(&self) -> Vec<&str> {
        match self {
            MorphStage::DirectionRamp { direction, .. } => vec![direction],
            MorphStage::WeightBlend { direction, .. } => direction.iter().map(String::as_str).collect(),
            MorphStage::DirectionCrossfade { from, to, .. } => vec![from, to],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphPlan {
    pub frames_per_stage: usize,
    pub stages: Vec<MorphStage>,
}

/// Named generators and directions a plan refers to.
#[derive(Clone, Debug, Default)]
pub struct MorphAssets {
    pub generators: BTreeMap<String, GeneratorWeights>,
    pub directions: BTreeMap<String, StyleDomainDirection>,
}

impl MorphAssets {
    fn generator(&self, name: &str) -> Result<&GeneratorWeights> {
        self.generators
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown generator '{name}'")))
    }

    fn direction(&self, name: &str) -> Result<&StyleDomainDirection> {
        self.directions
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown direction '{name}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphFrame {
    pub stage: usize,
    pub t: f64,
    pub image: Image,
}

impl MorphPlan {
    /// The four-row schedule: ramp `dir_a` in on `source`, blend the weights
    /// to `target` under `dir_a`, crossfade to `dir_b`, blend back to `source`.
    pub fn four_stage(source: &str, target: &str, dir_a: &str, dir_b: &str, frames_per_stage: usize) -> Self {
        let s = |v: &str| v.to_string();
        Self {
            frames_per_stage,
            stages: vec![
                MorphStage::DirectionRamp {
                    generator: s(source),
                    direction: s(dir_a),
                    start: 0.0,
                    end: 1.0,
                },
                MorphStage::WeightBlend {
                    from: s(source),
                    to: s(target),
                    direction: Some(s(dir_a)),
                    start: 0.0,
                    end: 1.0,
                },
                MorphStage::DirectionCrossfade {
                    generator: s(target),
                    from: s(dir_a),
                    to: s(dir_b),
                    start: 0.0,
                    end: 1.0,
                },
                MorphStage::WeightBlend {
                    from: s(target),
                    to: s(source),
                    direction: Some(s(dir_b)),
                    start: 0.0,
                    end: 1.0,
                },
            ],
        }
    }

    /// Plans with boundaries intact under reversal render the frame
    /// sequence backwards.
    pub fn reversed(&self) -> Self {
        Self {
            frames_per_stage: self.frames_per_stage,
            stages: self.stages.iter().rev().map(MorphStage::reversed).collect(),
        }
    }

    /// Checks parameters, asset names, fingerprint agreement and that every
    /// stage starts where the previous one ended.
    pub fn validate(&self, assets: &MorphAssets) -> Result<()> {
        let plan_err = |stage: usize, reason: String| Error::Plan { stage, reason };
        if self.frames_per_stage < 2 {
            return Err(plan_err(0, "frames_per_stage must be at least 2".into()));
        }
        if self.stages.is_empty() {
            return Err(plan_err(0, "plan has no stages".into()));
        }
        let mut fingerprint: Option<&str> = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let (start, end) = stage.bounds();
            for v in [start, end] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(plan_err(i, format!("parameter {v} outside [0, 1]")));
                }
            }
            let gens = stage
                .generator_names()
                .into_iter()
                .map(|n| assets.generator(n).map(|g| g.fingerprint()));
            let dirs = stage
                .direction_names()
                .into_iter()
                .map(|n| assets.direction(n).map(|d| d.fingerprint.as_str()));
            for fp in gens.chain(dirs) {
                let fp = fp.map_err(|e| plan_err(i, e.to_string()))?;
                match fingerprint {
                    None => fingerprint = Some(fp),
                    Some(f) if f != fp => {
                        return Err(plan_err(i, format!("fingerprint {fp} differs from {f}")));
                    }
                    Some(_) => {}
                }
            }
            if i > 0 {
                let prev = self.stages[i - 1].state_at(1.0);
                let next = stage.state_at(0.0);
                if prev != next {
                    return Err(plan_err(
                        i,
                        format!("starts at {next:?} but the previous stage ends at {prev:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.frames_per_stage * self.stages.len()
    }

    /// `(stage, t)` of every frame; `t` runs over `0, 1/(F−1), …, 1`.
    pub fn schedule(&self) -> Vec<(usize, f64)> {
        let last = (self.frames_per_stage - 1) as f64;
        (0..self.stages.len())
            .flat_map(|s| (0..self.frames_per_stage).map(move |i| (s, i as f64 / last)))
            .collect()
    }

    /// State at a global position `u ∈ [0, 1]` along the whole plan.
    pub fn state_at_position(&self, u: f64) -> Result<MorphState> {
        if !(0.0..=1.0).contains(&u) || self.stages.is_empty() {
            return Err(Error::Invalid(format!("position {u} outside [0, 1]")));
        }
        let n = self.stages.len();
        let scaled = u * n as f64;
        let stage = (scaled.floor() as usize).min(n - 1);
        Ok(self.stages[stage].state_at(scaled - stage as f64))
    }
}

/// Renders one morph state for latent `z`.
pub fn render_state(state: &MorphState, assets: &MorphAssets, z: &LatentZ, cfg: &SamplerConfig) -> Result<Image> {
    let weights: Cow<GeneratorWeights> = match &state.generator {
        GeneratorState::Named(n) => Cow::Borrowed(assets.generator(n)?),
        GeneratorState::Blend { from, to, alpha } => {
            Cow::Owned(morph_weights(assets.generator(from)?, assets.generator(to)?, *alpha)?)
        }
    };
    if state.directions.is_empty() {
        return render(&weights, None, z, 1.0, cfg);
    }
    let terms = state
        .directions
        .iter()
        .map(|(n, c)| Ok((assets.direction(n)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    let dir = mix(&terms)?;
    render(&weights, Some(&dir), z, 1.0, cfg)
}

/// Validates `plan` and renders `frames_per_stage` frames per stage.
pub fn render_morph(plan: &MorphPlan, assets: &MorphAssets, z: &LatentZ, cfg: &SamplerConfig) -> Result<Vec<MorphFrame>> {
    plan.validate(assets)?;
    plan.schedule()
        .into_iter()
        .map(|(stage, t)| {
            let image = render_state(&plan.stages[stage].state_at(t), assets, z, cfg)?;
            Ok(MorphFrame { stage, t, image })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{sample_latent, ArchitectureDescriptor};
    use crate::tensor::Tensor;

    fn toy() -> (GeneratorWeights, GeneratorWeights) {
        let desc = ArchitectureDescriptor::preset("toy8").unwrap();
        let a = GeneratorWeights::random(&desc, 1).unwrap();
        let tensors = a.tensors().iter().map(|t| t.map(|v| v * 1.1)).collect();
        let b = a.derive_child(tensors, "scaled").unwrap();
        (a, b)
    }

    #[test]
    fn translation_defaults() {
        let c = TranslationConfig::default();
        assert_eq!((c.steps, c.psi_opt, c.psi_infer, c.style_split_index), (1000, 0.7, 0.8, 6));
        assert!(TranslationConfig {
            style_split_index: 9,
            ..c
        }
        .validate(8)
        .is_err());
    }

    #[test]
    fn morph_endpoints_and_midpoint() {
        let (a, b) = toy();
        assert_eq!(morph_weights(&a, &b, 0.0).unwrap(), a);
        assert_eq!(morph_weights(&a, &b, 1.0).unwrap(), b);
        let mid = morph_weights(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.tensors().iter().zip(a.tensors()).zip(b.tensors()) {
            assert!(m.max_abs_diff(&x.add(y).scale(0.5)) < 1e-12);
        }
        assert!(morph_weights(&a, &b, 1.5).is_err());
    }

    #[test]
    fn canonical_states_drop_zero_terms() {
        let ramp = MorphStage::DirectionRamp {
            generator: "g".into(),
            direction: "d".into(),
            start: 0.0,
            end: 1.0,
        };
        assert!(ramp.state_at(0.0).directions.is_empty());
        let fade = MorphStage::DirectionCrossfade {
            generator: "g".into(),
            from: "d".into(),
            to: "e".into(),
            start: 0.0,
            end: 1.0,
        };
        assert_eq!(ramp.state_at(1.0), fade.state_at(0.0));
        assert_eq!(fade.state_at(1.0).directions, vec![("e".to_string(), 1.0)]);
    }

    #[test]
    fn discontinuous_plan_is_rejected() {
        let (a, b) = toy();
        let desc = a.descriptor().clone();
        let mut assets = MorphAssets::default();
        assets.generators.insert("a".into(), a);
        assets.generators.insert("b".into(), b);
        let mut dir = StyleDomainDirection::zeros(&desc, "d");
        dir.delta_styles[0] = Tensor::full(dir.delta_styles[0].shape(), 0.1);
        assets.directions.insert("d".into(), dir);
        let mut plan = MorphPlan {
            frames_per_stage: 3,
            stages: vec![
                MorphStage::DirectionRamp {
                    generator: "a".into(),
                    direction: "d".into(),
                    start: 0.0,
                    end: 1.0,
                },
                MorphStage::WeightBlend {
                    from: "a".into(),
                    to: "b".into(),
                    direction: None,
                    start: 0.0,
                    end: 1.0,
                },
            ],
        };
        assert!(matches!(plan.validate(&assets), Err(Error::Plan { stage: 1, .. })));
        if let MorphStage::WeightBlend { direction, .. } = &mut plan.stages[1] {
            *direction = Some("d".into());
        }
        let frames = render_morph(&plan, &assets, &sample_latent(0, 16), &SamplerConfig::default()).unwrap();
        assert_eq!(frames.len(), 6);
        assert_eq!(frames[2].image, frames[3].image);
    }
}
