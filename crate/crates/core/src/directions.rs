//! StyleDomain directions: per-layer style offsets `Δs` (plus optional
//! block weight offsets), their algebra, transfer to aligned generators and
//! the `.sdir` file format.
//!
//! `.sdir` layout:
//!
//! ```text
//! STYLEDOMAIN-DIRECTION v1\n
//! <one-line JSON header>\n
//! <payload: f64 little-endian, style layers in order, then offsets>
//! <32-byte SHA-256 of everything above>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{hex, ArchitectureDescriptor, GeneratorWeights, LatentZ, SamplerConfig, StyleSpacePoint};
use crate::error::{Error, Result};
use crate::paramspace::{fold_offsets, WeightOffsets};
use crate::tensor::{Image, Tensor};

pub const SDIR_MAGIC: &str = "STYLEDOMAIN-DIRECTION";
pub const SDIR_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub loss_kind: String,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleDomainDirection {
    pub delta_styles: Vec<Tensor>,
    pub offsets: Option<WeightOffsets>,
    pub fingerprint: String,
    pub domain_label: String,
    pub training_meta: TrainingMeta,
    /// Content hash of the generator the direction was trained on.
    pub source_weights: Option<String>,
}

/// A precomputed StyleSpace editing direction (e.g. "Smile").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub delta_styles: Vec<Tensor>,
    pub attribute_label: String,
    pub fingerprint: String,
}

fn check_layers(delta: &[Tensor], desc: &ArchitectureDescriptor) -> Result<()> {
    if delta.len() != desc.num_styles() {
        return Err(Error::Shape(format!(
            "direction has {} layers, generator has {}",
            delta.len(),
            desc.num_styles()
        )));
    }
    for (i, (d, n)) in delta.iter().zip(desc.style_dims()).enumerate() {
        if d.shape() != [n] {
            return Err(Error::Shape(format!("layer {i}: length {} vs {n}", d.numel())));
        }
    }
    Ok(())
}

fn check_fingerprint(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Fingerprint {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

impl StyleDomainDirection {
    pub fn zeros(desc: &ArchitectureDescriptor, label: impl Into<String>) -> Self {
        Self {
            delta_styles: desc.style_dims().into_iter().map(|n| Tensor::zeros(&[n])).collect(),
            offsets: None,
            fingerprint: desc.fingerprint.clone(),
            domain_label: label.into(),
            training_meta: TrainingMeta::default(),
            source_weights: None,
        }
    }

    pub fn check(&self, desc: &ArchitectureDescriptor) -> Result<()> {
        check_fingerprint(&desc.fingerprint, &self.fingerprint)?;
        check_layers(&self.delta_styles, desc)?;
        if let Some(o) = &self.offsets {
            o.check(desc)?;
        }
        Ok(())
    }

    pub fn is_plus(&self) -> bool {
        self.offsets.is_some()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            delta_styles: self.delta_styles.iter().map(|t| t.scale(factor)).collect(),
            offsets: self.offsets.as_ref().map(|o| o.scale(factor)),
            ..self.clone()
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.delta_styles
            .iter()
            .chain(self.offsets.iter().flat_map(|o| o.tensors()))
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// SHA-256 over the float payload and label; unchanged by transfer.
    pub fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update(self.domain_label.as_bytes());
        for v in self.flatten() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Offsets scaled by `strength`, or `None`.
    pub fn scaled_offsets(&self, strength: f64) -> Option<WeightOffsets> {
        self.offsets.as_ref().map(|o| o.scale(strength))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = SdirHeader {
            version: SDIR_VERSION,
            fingerprint: self.fingerprint.clone(),
            domain_label: self.domain_label.clone(),
            training_meta: self.training_meta.clone(),
            source_weights: self.source_weights.clone(),
            dtype: "f64le".into(),
            layers: self.delta_styles.iter().map(Tensor::numel).collect(),
            offsets: self.offsets.as_ref().map(|o| OffsetHeader {
                block_resolution: o.block_resolution,
                shapes: o.tensors().map(|t| t.shape().to_vec()).collect(),
            }),
        };
        let mut out = format!("{SDIR_MAGIC} v{SDIR_VERSION}\n").into_bytes();
        out.extend(serde_json::to_string(&header)?.into_bytes());
        out.push(b'\n');
        for v in self.flatten() {
            out.extend(v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Checksum("direction file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum("direction file".into()));
        }
        let mut lines = body.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        let magic = std::str::from_utf8(magic).map_err(|_| Error::Format("magic line is not UTF-8".into()))?;
        if !magic.starts_with(SDIR_MAGIC) {
            return Err(Error::Format("not a direction file".into()));
        }
        let header = lines.next().ok_or_else(|| Error::Format("missing header".into()))?;
        let payload = lines.next().ok_or_else(|| Error::Format("missing payload".into()))?;
        let value: serde_json::Value = serde_json::from_slice(header)?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != SDIR_VERSION {
            return Err(Error::Version {
                expected: SDIR_VERSION,
                found: version,
            });
        }
        let header: SdirHeader = serde_json::from_value(value)?;
        if header.fingerprint.is_empty() {
            return Err(Error::Format("direction has no architecture fingerprint".into()));
        }
        if header.dtype != "f64le" {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if payload.len() % 8 != 0 {
            return Err(Error::Format("payload is not a whole number of floats".into()));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Format("payload shorter than header".into()));
            }
            Tensor::new(shape.to_vec(), data)
        };
        let delta_styles = header
            .layers
            .iter()
            .map(|&n| take(&[n]))
            .collect::<Result<Vec<_>>>()?;
        let offsets = match &header.offsets {
            Some(oh) => {
                let mut tensors = oh.shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                let trgb = tensors
                    .pop()
                    .ok_or_else(|| Error::Format("offsets without tensors".into()))?;
                Some(WeightOffsets {
                    block_resolution: oh.block_resolution,
                    convs: tensors,
                    trgb,
                })
            }
            None => None,
        };
        if floats.next().is_some() {
            return Err(Error::Format("payload longer than header".into()));
        }
        Ok(Self {
            delta_styles,
            offsets,
            fingerprint: header.fingerprint,
            domain_label: header.domain_label,
            training_meta: header.training_meta,
            source_weights: header.source_weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the direction against `desc`.
    pub fn load_for(path: impl AsRef<Path>, desc: &ArchitectureDescriptor) -> Result<Self> {
        let d = Self::load(path)?;
        d.check(desc)?;
        Ok(d)
    }
}

#[derive(Serialize, Deserialize)]
struct OffsetHeader {
    block_resolution: usize,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct SdirHeader {
    version: u32,
    fingerprint: String,
    domain_label: String,
    training_meta: TrainingMeta,
    source_weights: Option<String>,
    dtype: String,
    layers: Vec<usize>,
    offsets: Option<OffsetHeader>,
}

impl EditDirection {
    pub fn as_direction(&self) -> StyleDomainDirection {
        StyleDomainDirection {
            delta_styles: self.delta_styles.clone(),
            offsets: None,
            fingerprint: self.fingerprint.clone(),
            domain_label: self.attribute_label.clone(),
            training_meta: TrainingMeta {
                loss_kind: "edit".into(),
                ..TrainingMeta::default()
            },
            source_weights: None,
        }
    }
}

/// `s_i + strength · Δs_i` for every layer.
pub fn apply(styles: &StyleSpacePoint, dir: &StyleDomainDirection, strength: f64) -> Result<StyleSpacePoint> {
    if styles.styles.len() != dir.delta_styles.len() {
        return Err(Error::Shape(format!(
            "{} style layers vs {} direction layers",
            styles.styles.len(),
            dir.delta_styles.len()
        )));
    }
    let styles = styles
        .styles
        .iter()
        .zip(&dir.delta_styles)
        .enumerate()
        .map(|(i, (s, d))| {
            if !s.same_shape(d) {
                return Err(Error::Shape(format!("layer {i}: {:?} vs {:?}", s.shape(), d.shape())));
            }
            Ok(s.zip_map(d, |a, b| a + strength * b))
        })
        .collect::<Result<_>>()?;
    Ok(StyleSpacePoint { styles })
}

/// `Σ c_j · d_j` over styles and offsets. Directions without offsets count
/// as zero offsets when others carry them.
pub fn mix(terms: &[(&StyleDomainDirection, f64)]) -> Result<StyleDomainDirection> {
    let (first, c0) = *terms
        .first()
        .ok_or_else(|| Error::Invalid("mix needs at least one direction".into()))?;
    for (d, c) in terms {
        check_fingerprint(&first.fingerprint, &d.fingerprint)?;
        if !c.is_finite() {
            return Err(Error::Invalid(format!("mixing coefficient {c} is not finite")));
        }
        if d.delta_styles.len() != first.delta_styles.len() {
            return Err(Error::Shape("directions disagree on layer count".into()));
        }
    }
    let mut acc = first.scale(c0);
    for &(d, c) in &terms[1..] {
        for (a, b) in acc.delta_styles.iter_mut().zip(&d.delta_styles) {
            if !a.same_shape(b) {
                return Err(Error::Shape("directions disagree on layer lengths".into()));
            }
            *a = a.zip_map(b, |x, y| x + c * y);
        }
        acc.offsets = match (acc.offsets.take(), &d.offsets) {
            (Some(a), Some(b)) => Some(a.axpy(c, b)?),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b.scale(c)),
            (None, None) => None,
        };
    }
    if terms.len() > 1 {
        acc.domain_label = terms
            .iter()
            .map(|(d, _)| d.domain_label.as_str())
            .collect::<Vec<_>>()
            .join("+");
        acc.training_meta = TrainingMeta {
            loss_kind: "mix".into(),
            ..TrainingMeta::default()
        };
        if terms.iter().any(|(d, _)| d.source_weights != first.source_weights) {
            acc.source_weights = None;
        }
    }
    Ok(acc)
}

/// Adds `edit_strength · edit` to the style part of `dir`; offsets untouched.
pub fn compose_with_edit(
    dir: &StyleDomainDirection,
    edit: &EditDirection,
    edit_strength: f64,
) -> Result<StyleDomainDirection> {
    check_fingerprint(&dir.fingerprint, &edit.fingerprint)?;
    if dir.delta_styles.len() != edit.delta_styles.len() {
        return Err(Error::Shape("edit and direction disagree on layer count".into()));
    }
    let mut out = dir.clone();
    for (a, b) in out.delta_styles.iter_mut().zip(&edit.delta_styles) {
        if !a.same_shape(b) {
            return Err(Error::Shape("edit and direction disagree on layer lengths".into()));
        }
        *a = a.zip_map(b, |x, y| x + edit_strength * y);
    }
    Ok(out)
}

/// A direction bound to a (possibly different but aligned) generator.
pub struct TransferHandle<'a> {
    direction: &'a StyleDomainDirection,
    target: &'a GeneratorWeights,
    warning: Option<String>,
}

/// Binds `dir` to `target`. Architecture mismatch is an error; a target
/// whose lineage does not include the direction's source yields a warning.
pub fn transfer<'a>(dir: &'a StyleDomainDirection, target: &'a GeneratorWeights) -> Result<TransferHandle<'a>> {
    dir.check(target.descriptor())?;
    let warning = match &dir.source_weights {
        Some(src) if *src == target.content_hash() || target.meta.lineage.contains(src) => None,
        Some(src) => Some(format!(
            "target generator does not descend from the direction's source {}",
            &src[..src.len().min(16)]
        )),
        None => Some("direction records no source generator; lineage unknown".into()),
    };
    Ok(TransferHandle {
        direction: dir,
        target,
        warning,
    })
}

impl TransferHandle<'_> {
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn target(&self) -> &GeneratorWeights {
        self.target
    }

    pub fn apply(&self, styles: &StyleSpacePoint, strength: f64) -> Result<StyleSpacePoint> {
        apply(styles, self.direction, strength)
    }

    /// Renders `z` on the target with the direction applied at `strength`.
    pub fn synthesize(&self, z: &LatentZ, strength: f64, cfg: &SamplerConfig) -> Result<Image> {
        render(self.target, Some(self.direction), z, strength, cfg)
    }
}

/// `z → w → s → s + strength·Δs → image`, with offsets scaled by `strength`.
pub fn render(
    weights: &GeneratorWeights,
    dir: Option<&StyleDomainDirection>,
    z: &LatentZ,
    strength: f64,
    cfg: &SamplerConfig,
) -> Result<Image> {
    cfg.validate()?;
    let w = weights.map_latent(z, cfg.truncation_psi)?;
    let styles = weights.affine_styles(&w)?;
    match dir {
        None => weights.synthesize(&styles, None, cfg),
        Some(d) => {
            d.check(weights.descriptor())?;
            let shifted = apply(&styles, d, strength)?;
            let offsets = d.scaled_offsets(strength);
            weights.synthesize(&shifted, offsets.as_ref(), cfg)
        }
    }
}

/// [`render`] for each seed's latent.
pub fn render_seeds(
    weights: &GeneratorWeights,
    dir: Option<&StyleDomainDirection>,
    seeds: &[u64],
    strength: f64,
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    let dim = weights.descriptor().latent_dim;
    seeds
        .iter()
        .map(|&s| render(weights, dir, &crate::arch::sample_latent(s, dim), strength, cfg))
        .collect()
}

/// A child generator whose affine biases absorb `strength·Δs` and whose
/// block kernels absorb the scaled offsets, so that plain generation
/// reproduces `render(weights, Some(dir), ..)` up to rounding.
pub fn fold_into_weights(
    weights: &GeneratorWeights,
    dir: &StyleDomainDirection,
    strength: f64,
) -> Result<GeneratorWeights> {
    dir.check(weights.descriptor())?;
    let layout = weights.descriptor().layout();
    let mut tensors = weights.tensors().to_vec();
    for (&(_, bias), delta) in layout.affine.iter().zip(&dir.delta_styles) {
        tensors[bias] = tensors[bias].zip_map(delta, |b, d| b + strength * d);
    }
    let child = weights.derive_child(tensors, format!("direction '{}' folded at {strength}", dir.domain_label))?;
    match dir.scaled_offsets(strength) {
        Some(o) => {
            let mut folded = fold_offsets(&child, &o)?;
            folded.meta = child.meta;
            Ok(folded)
        }
        None => Ok(child),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dir(desc: &ArchitectureDescriptor, seed: u64, plus: bool) -> StyleDomainDirection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = StyleDomainDirection::zeros(desc, format!("d{seed}"));
        for t in &mut d.delta_styles {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
        if plus {
            let mut o = WeightOffsets::zeros(desc, 8).unwrap();
            for t in o.tensors_mut() {
                *t = Tensor::randn(t.shape(), 0.05, &mut rng);
            }
            d.offsets = Some(o);
        }
        d
    }

    #[test]
    fn apply_strength_identities() {
        let desc = ArchitectureDescriptor::preset("toy32").unwrap();
        let d = random_dir(&desc, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = StyleSpacePoint {
            styles: desc.style_dims().iter().map(|&n| Tensor::randn(&[n], 1.0, &mut rng)).collect(),
        };
        assert_eq!(apply(&s, &d, 0.0).unwrap(), s);
        let back = apply(&apply(&s, &d, 1.0).unwrap(), &d, -1.0).unwrap();
        assert!(back.flatten().iter().zip(s.flatten()).all(|(a, b)| (a - b).abs() < 1e-7));
        let one = apply(&s, &d, 1.0).unwrap();
        for ((o, a), b) in one.styles.iter().zip(&s.styles).zip(&d.delta_styles) {
            for ((x, y), z) in o.data().iter().zip(a.data()).zip(b.data()) {
                assert_eq!(*x, y + z);
            }
        }
    }

    #[test]
    fn mix_algebra() {
        let desc = ArchitectureDescriptor::preset("toy32").unwrap();
        let d = random_dir(&desc, 1, true);
        let e = random_dir(&desc, 2, true);
        assert_eq!(mix(&[(&d, 1.0)]).unwrap(), d);
        let neg = d.scale(-1.0);
        let zero = mix(&[(&d, 0.5), (&neg, 0.5)]).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
        let ab = mix(&[(&d, 0.3), (&e, 0.7)]).unwrap();
        let ba = mix(&[(&e, 0.7), (&d, 0.3)]).unwrap();
        assert!(ab.flatten().iter().zip(ba.flatten()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(mix(&[]).is_err());
        let other = StyleDomainDirection::zeros(&ArchitectureDescriptor::preset("toy8").unwrap(), "x");
        assert!(matches!(mix(&[(&d, 1.0), (&other, 1.0)]), Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn compose_matches_mix() {
        let desc = ArchitectureDescriptor::preset("toy32").unwrap();
        let d = random_dir(&desc, 3, true);
        let e = random_dir(&desc, 4, false);
        let edit = EditDirection {
            delta_styles: e.delta_styles.clone(),
            attribute_label: "Smile".into(),
            fingerprint: desc.fingerprint.clone(),
        };
        assert_eq!(compose_with_edit(&d, &edit, 0.0).unwrap().delta_styles, d.delta_styles);
        let c = compose_with_edit(&d, &edit, 1.7).unwrap();
        let m = mix(&[(&d, 1.0), (&edit.as_direction(), 1.7)]).unwrap();
        assert!(c.flatten().iter().zip(m.flatten()).all(|(a, b)| (a - b).abs() < 1e-12));
        let undone = compose_with_edit(&c, &edit, -1.7).unwrap();
        assert!(undone.flatten().iter().zip(d.flatten()).all(|(a, b)| (a - b).abs() < 1e-7));
        assert_eq!(c.offsets, d.offsets);
    }

    #[test]
    fn sdir_round_trip_and_corruption() {
        let desc = ArchitectureDescriptor::preset("toy32").unwrap();
        let mut d = random_dir(&desc, 5, true);
        d.training_meta = TrainingMeta {
            loss_kind: "text".into(),
            iterations: 300,
            seed: 7,
        };
        d.source_weights = Some("abc".into());
        let bytes = d.to_bytes().unwrap();
        let back = StyleDomainDirection::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert!(back.flatten().iter().zip(d.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(
            StyleDomainDirection::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Checksum(_))
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(StyleDomainDirection::from_bytes(&flipped), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_and_missing_fingerprint() {
        let desc = ArchitectureDescriptor::preset("toy8").unwrap();
        let d = StyleDomainDirection::zeros(&desc, "z");
        let reseal = |f: &dyn Fn(String) -> String| {
            let bytes = d.to_bytes().unwrap();
            let body = &bytes[..bytes.len() - 32];
            let text = String::from_utf8_lossy(body).into_owned();
            let mut out = f(text).into_bytes();
            let sum = Sha256::digest(&out);
            out.extend(sum);
            out
        };
        let v2 = reseal(&|t| t.replacen("\"version\":1", "\"version\":2", 1));
        assert!(matches!(
            StyleDomainDirection::from_bytes(&v2),
            Err(Error::Version { expected: 1, found: 2 })
        ));
        let nofp = reseal(&|t| t.replacen(&desc.fingerprint, "", 1));
        assert!(matches!(StyleDomainDirection::from_bytes(&nofp), Err(Error::Format(_))));
    }

    #[test]
    fn folded_direction_matches_render() {
        let desc = ArchitectureDescriptor::preset("toy8").unwrap();
        let w = GeneratorWeights::random(&desc, 1).unwrap();
        let d = random_dir(&desc, 4, true);
        let folded = fold_into_weights(&w, &d, 0.7).unwrap();
        assert_eq!(folded.meta.lineage.last(), Some(&w.content_hash()));
        let z = crate::arch::sample_latent(3, desc.latent_dim);
        let cfg = SamplerConfig::default();
        let a = render(&w, Some(&d), &z, 0.7, &cfg).unwrap();
        let b = folded.generate(&z, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }
}
