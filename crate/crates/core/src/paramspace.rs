//! Parameterizations of generator adaptation: which tensors are trainable,
//! spatially-uniform weight offsets for one synthesis block, and exact
//! parameter counting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureDescriptor, Component, GeneratorWeights, LayerKind};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Block used by Affine+ / StyleSpace+ when none is given.
pub const DEFAULT_OFFSET_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ParamSpaceKind {
    Full,
    SyntConv,
    Affine,
    Mapping,
    AffinePlus(usize),
    StyleSpace,
    StyleSpacePlus(usize),
}

impl ParamSpaceKind {
    /// All seven kinds, with the offset block set to `block`.
    pub fn all(block: usize) -> [ParamSpaceKind; 7] {
        use ParamSpaceKind::*;
        [Full, SyntConv, Affine, Mapping, AffinePlus(block), StyleSpace, StyleSpacePlus(block)]
    }

    pub fn offset_block(self) -> Option<usize> {
        match self {
            ParamSpaceKind::AffinePlus(b) | ParamSpaceKind::StyleSpacePlus(b) => Some(b),
            _ => None,
        }
    }

    /// Kinds that train a StyleSpace direction instead of generator weights.
    pub fn is_direction(self) -> bool {
        matches!(self, ParamSpaceKind::StyleSpace | ParamSpaceKind::StyleSpacePlus(_))
    }

    /// Whether generator weight slot `component` is trainable under this kind.
    pub fn trains(self, component: Component) -> bool {
        use ParamSpaceKind::*;
        match self {
            Full => true,
            SyntConv => matches!(component, Component::Synthesis | Component::Trgb),
            Affine | AffinePlus(_) => component == Component::Affine,
            Mapping => component == Component::Mapping,
            StyleSpace | StyleSpacePlus(_) => false,
        }
    }
}

impl fmt::Display for ParamSpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSpaceKind::Full => write!(f, "full"),
            ParamSpaceKind::SyntConv => write!(f, "syntconv"),
            ParamSpaceKind::Affine => write!(f, "affine"),
            ParamSpaceKind::Mapping => write!(f, "mapping"),
            ParamSpaceKind::AffinePlus(b) => write!(f, "affine+{b}"),
            ParamSpaceKind::StyleSpace => write!(f, "stylespace"),
            ParamSpaceKind::StyleSpacePlus(b) => write!(f, "stylespace+{b}"),
        }
    }
}

impl FromStr for ParamSpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let block = |rest: &str| -> Result<usize> {
            if rest.is_empty() {
                Ok(DEFAULT_OFFSET_BLOCK)
            } else {
                rest.parse()
                    .map_err(|_| Error::Config(format!("bad block resolution in '{s}'")))
            }
        };
        Ok(match lower.as_str() {
            "full" => ParamSpaceKind::Full,
            "syntconv" => ParamSpaceKind::SyntConv,
            "affine" => ParamSpaceKind::Affine,
            "mapping" => ParamSpaceKind::Mapping,
            "stylespace" => ParamSpaceKind::StyleSpace,
            other => {
                if let Some(rest) = other.strip_prefix("affine+") {
                    ParamSpaceKind::AffinePlus(block(rest)?)
                } else if let Some(rest) = other.strip_prefix("stylespace+") {
                    ParamSpaceKind::StyleSpacePlus(block(rest)?)
                } else {
                    return Err(Error::Config(format!("unknown parameter space '{s}'")));
                }
            }
        })
    }
}

impl TryFrom<String> for ParamSpaceKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ParamSpaceKind> for String {
    fn from(k: ParamSpaceKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSelection {
    pub kind: ParamSpaceKind,
    pub slots: Vec<SelectedSlot>,
    pub total: usize,
}

/// Spatially-uniform kernel offsets for every layer of one synthesis block.
///
/// `convs` holds one `O × I × 1 × 1` delta per conv of the block (two for
/// upsampling blocks, one for the base block); `trgb` is `3 × I × 1 × 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightOffsets {
    pub block_resolution: usize,
    pub convs: Vec<Tensor>,
    pub trgb: Tensor,
}

/// [`WeightOffsets`] bound into a graph.
pub struct BoundOffsets<'g> {
    pub block_resolution: usize,
    pub convs: Vec<Var<'g>>,
    pub trgb: Var<'g>,
}

impl<'g> BoundOffsets<'g> {
    pub fn vars(&self) -> impl Iterator<Item = Var<'g>> + '_ {
        self.convs.iter().copied().chain(std::iter::once(self.trgb))
    }
}

/// Names and shapes of the offset slots for `block`.
pub fn offset_slots(desc: &ArchitectureDescriptor, block: usize) -> Result<Vec<SelectedSlot>> {
    let (convs, trgb) = desc.block_layers(block).ok_or_else(|| {
        Error::Config(format!(
            "block resolution {block} not in channel schedule {:?}",
            desc.channel_schedule
        ))
    })?;
    let slot = |name: String, o: usize, i: usize| SelectedSlot {
        name,
        shape: vec![o, i, 1, 1],
        count: o * i,
    };
    let mut slots: Vec<SelectedSlot> = convs
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let info = &desc.style_layers[l];
            slot(format!("offsets.b{block}.conv{j}"), info.out_channels, info.in_channels)
        })
        .collect();
    let t = &desc.style_layers[trgb];
    slots.push(slot(format!("offsets.b{block}.torgb"), 3, t.in_channels));
    Ok(slots)
}

impl WeightOffsets {
    pub fn zeros(desc: &ArchitectureDescriptor, block: usize) -> Result<Self> {
        let mut tensors: Vec<Tensor> = offset_slots(desc, block)?
            .iter()
            .map(|s| Tensor::zeros(&s.shape))
            .collect();
        let trgb = tensors.pop().expect("trgb slot");
        Ok(Self {
            block_resolution: block,
            convs: tensors,
            trgb,
        })
    }

    /// Builds offsets from tensors in slot order (convs then tRGB).
    pub fn from_tensors(desc: &ArchitectureDescriptor, block: usize, mut tensors: Vec<Tensor>) -> Result<Self> {
        let trgb = tensors
            .pop()
            .ok_or_else(|| Error::Shape("offsets need at least a tRGB tensor".into()))?;
        let o = Self {
            block_resolution: block,
            convs: tensors,
            trgb,
        };
        o.check(desc)?;
        Ok(o)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.convs.iter().chain(std::iter::once(&self.trgb))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.convs.iter_mut().chain(std::iter::once(&mut self.trgb))
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn check(&self, desc: &ArchitectureDescriptor) -> Result<()> {
        let slots = offset_slots(desc, self.block_resolution)?;
        if slots.len() != self.convs.len() + 1 {
            return Err(Error::Shape(format!(
                "block {} has {} offset tensors, got {}",
                self.block_resolution,
                slots.len(),
                self.convs.len() + 1
            )));
        }
        for (slot, t) in slots.iter().zip(self.tensors()) {
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
        Ok(())
    }

    pub fn bind_constant<'g>(&self, graph: &'g Graph) -> BoundOffsets<'g> {
        self.bind(graph, false)
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundOffsets<'g> {
        let leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        BoundOffsets {
            block_resolution: self.block_resolution,
            convs: self.convs.iter().map(leaf).collect(),
            trgb: leaf(&self.trgb),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            block_resolution: self.block_resolution,
            convs: self.convs.iter().map(|t| t.scale(factor)).collect(),
            trgb: self.trgb.scale(factor),
        }
    }

    /// `self + factor * other`; blocks must agree.
    pub fn axpy(&self, factor: f64, other: &WeightOffsets) -> Result<Self> {
        if self.block_resolution != other.block_resolution || self.convs.len() != other.convs.len() {
            return Err(Error::Shape(format!(
                "cannot combine offsets for blocks {} and {}",
                self.block_resolution, other.block_resolution
            )));
        }
        let combine = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            if !a.same_shape(b) {
                return Err(Error::Shape("offset shapes differ".into()));
            }
            Ok(a.zip_map(b, |x, y| x + factor * y))
        };
        Ok(Self {
            block_resolution: self.block_resolution,
            convs: self
                .convs
                .iter()
                .zip(&other.convs)
                .map(|(a, b)| combine(a, b))
                .collect::<Result<_>>()?,
            trgb: combine(&self.trgb, &other.trgb)?,
        })
    }
}

/// Trainable slots of `kind`, in canonical order.
pub fn select(desc: &ArchitectureDescriptor, kind: ParamSpaceKind) -> Result<ParameterSelection> {
    let mut slots: Vec<SelectedSlot> = Vec::new();
    if kind.is_direction() {
        for (i, layer) in desc.style_layers.iter().enumerate() {
            slots.push(SelectedSlot {
                name: format!("style.{i}"),
                shape: vec![layer.in_channels],
                count: layer.in_channels,
            });
        }
    } else {
        for slot in desc.weight_slots() {
            if kind.trains(slot.component) {
                slots.push(SelectedSlot {
                    count: slot.numel(),
                    name: slot.name,
                    shape: slot.shape,
                });
            }
        }
    }
    if let Some(block) = kind.offset_block() {
        slots.extend(offset_slots(desc, block)?);
    }
    let total = slots.iter().map(|s| s.count).sum();
    Ok(ParameterSelection { kind, slots, total })
}

pub fn count(desc: &ArchitectureDescriptor, kind: ParamSpaceKind) -> Result<usize> {
    Ok(select(desc, kind)?.total)
}

/// Per weight slot: trainable under `kind`?
pub fn weight_mask(desc: &ArchitectureDescriptor, kind: ParamSpaceKind) -> Vec<bool> {
    desc.weight_slots().iter().map(|s| kind.trains(s.component)).collect()
}

/// Effective kernels of the offset block: `θ + Δθ` broadcast over space.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockKernels {
    pub block_resolution: usize,
    pub convs: Vec<Tensor>,
    pub trgb: Tensor,
}

fn broadcast_add(kernel: &Tensor, delta: &Tensor) -> Tensor {
    let taps = kernel.numel() / delta.numel();
    let mut out = kernel.clone();
    for (chunk, d) in out.data_mut().chunks_mut(taps).zip(delta.data()) {
        chunk.iter_mut().for_each(|v| *v += d);
    }
    out
}

pub fn apply_offsets(base: &GeneratorWeights, offsets: &WeightOffsets) -> Result<BlockKernels> {
    let desc = base.descriptor();
    offsets.check(desc)?;
    let layout = desc.layout();
    let block = layout
        .blocks
        .iter()
        .find(|b| b.resolution == offsets.block_resolution)
        .expect("checked block");
    let t = base.tensors();
    Ok(BlockKernels {
        block_resolution: block.resolution,
        convs: block
            .convs
            .iter()
            .zip(&offsets.convs)
            .map(|(c, d)| broadcast_add(&t[c.weight], d))
            .collect(),
        trgb: broadcast_add(&t[block.trgb.weight], &offsets.trgb),
    })
}

/// Generator whose block kernels already include `offsets`.
pub fn fold_offsets(base: &GeneratorWeights, offsets: &WeightOffsets) -> Result<GeneratorWeights> {
    let kernels = apply_offsets(base, offsets)?;
    let layout = base.descriptor().layout();
    let block = layout
        .blocks
        .iter()
        .find(|b| b.resolution == offsets.block_resolution)
        .expect("checked block");
    let mut tensors = base.tensors().to_vec();
    for (c, k) in block.convs.iter().zip(kernels.convs) {
        tensors[c.weight] = k;
    }
    tensors[block.trgb.weight] = kernels.trgb;
    base.derive_child(tensors, format!("offsets folded into b{}", offsets.block_resolution))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetComponent {
    Mapping,
    Affine,
    /// Synthesis convolutions, constant input and tRGB layers.
    Synthesis,
}

impl ResetComponent {
    fn covers(self, c: Component) -> bool {
        match self {
            ResetComponent::Mapping => c == Component::Mapping,
            ResetComponent::Affine => c == Component::Affine,
            ResetComponent::Synthesis => matches!(c, Component::Synthesis | Component::Trgb),
        }
    }
}

/// Copies the listed components from `parent` into a copy of `child`.
pub fn reset_to_parent(
    child: &GeneratorWeights,
    parent: &GeneratorWeights,
    components: &[ResetComponent],
) -> Result<GeneratorWeights> {
    if child.fingerprint() != parent.fingerprint() {
        return Err(Error::Fingerprint {
            expected: child.fingerprint().to_string(),
            found: parent.fingerprint().to_string(),
        });
    }
    let mut out = child.clone();
    let slots = child.descriptor().weight_slots();
    for ((slot, dst), src) in slots.iter().zip(out.tensors_mut()).zip(parent.tensors()) {
        if components.iter().any(|c| c.covers(slot.component)) {
            *dst = src.clone();
        }
    }
    Ok(out)
}

/// Compact size label: `30.3M`, `9.0K`, `512`.
pub fn human_count(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// `(kind, exact count)` rows for every kind, offsets at `block`.
pub fn size_table(desc: &ArchitectureDescriptor, block: usize) -> Result<Vec<(ParamSpaceKind, usize)>> {
    ParamSpaceKind::all(block)
        .into_iter()
        .map(|k| Ok((k, count(desc, k)?)))
        .collect()
}

/// Style-layer indices whose kernels an offset block touches.
pub fn offset_layers(desc: &ArchitectureDescriptor, block: usize) -> Result<Vec<usize>> {
    let (mut convs, trgb) = desc
        .block_layers(block)
        .ok_or_else(|| Error::Config(format!("block resolution {block} not in channel schedule")))?;
    convs.push(trgb);
    debug_assert!(convs.iter().all(|&l| {
        let k = desc.style_layers[l].kind;
        k == LayerKind::Conv || k == LayerKind::Trgb
    }));
    Ok(convs)
}

#[cfg(test)]
mod tests {
    use super::*;
    
    #[test]
    fn kind_strings_round_trip() {
        for k in ParamSpaceKind::all(16) {
            assert_eq!(k.to_string().parse::<ParamSpaceKind>().unwrap(), k);
        }
        assert_eq!("Affine+".parse::<ParamSpaceKind>().unwrap(), ParamSpaceKind::AffinePlus(64));
        assert!("conv".parse::<ParamSpaceKind>().is_err());
        let json = serde_json::to_string(&ParamSpaceKind::StyleSpacePlus(8)).unwrap();
        assert_eq!(json, "\"stylespace+8\"");
    }

    #[test]
    fn unknown_block_is_rejected() {
        let d = ArchitectureDescriptor::preset("toy32").unwrap();
        assert!(matches!(select(&d, ParamSpaceKind::AffinePlus(64)), Err(Error::Config(_))));
        assert!(WeightOffsets::zeros(&d, 12).is_err());
    }

    #[test]
    fn base_block_has_single_conv_offset() {
        let d = ArchitectureDescriptor::preset("toy32").unwrap();
        let o = WeightOffsets::zeros(&d, 4).unwrap();
        assert_eq!(o.convs.len(), 1);
        assert_eq!(o.convs[0].shape(), &[64, 64, 1, 1]);
        let o = WeightOffsets::zeros(&d, 16).unwrap();
        assert_eq!(o.convs.len(), 2);
        assert_eq!(o.convs[0].shape(), &[16, 32, 1, 1]);
        assert_eq!(o.trgb.shape(), &[3, 16, 1, 1]);
    }

    #[test]
    fn zero_offsets_leave_kernels() {
        let d = ArchitectureDescriptor::preset("toy32").unwrap();
        let w = GeneratorWeights::random(&d, 0).unwrap();
        let k = apply_offsets(&w, &WeightOffsets::zeros(&d, 8).unwrap()).unwrap();
        assert!(k.convs[0].bit_eq(w.tensor("synthesis.b8.conv0.weight").unwrap()));
        assert!(k.trgb.bit_eq(w.tensor("synthesis.b8.torgb.weight").unwrap()));
    }

    #[test]
    fn negative_spatial_mean_offsets_center_kernels() {
        let d = ArchitectureDescriptor::preset("toy32").unwrap();
        let w = GeneratorWeights::random(&d, 4).unwrap();
        let mut o = WeightOffsets::zeros(&d, 16).unwrap();
        for (j, delta) in o.convs.iter_mut().enumerate() {
            let k = w.tensor(&format!("synthesis.b16.conv{j}.weight")).unwrap();
            for (dst, taps) in delta.data_mut().iter_mut().zip(k.data().chunks(9)) {
                *dst = -taps.iter().sum::<f64>() / 9.0;
            }
        }
        let eff = apply_offsets(&w, &o).unwrap();
        for k in &eff.convs {
            for taps in k.data().chunks(9) {
                assert!(taps.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reset_semantics() {
        let d = ArchitectureDescriptor::preset("toy8").unwrap();
        let parent = GeneratorWeights::random(&d, 0).unwrap();
        let child = GeneratorWeights::random(&d, 1).unwrap();
        use ResetComponent::*;
        let all = reset_to_parent(&child, &parent, &[Mapping, Affine, Synthesis]).unwrap();
        assert_eq!(all.tensors(), parent.tensors());
        assert_eq!(reset_to_parent(&child, &parent, &[]).unwrap().tensors(), child.tensors());
        let stepwise = reset_to_parent(&reset_to_parent(&child, &parent, &[Mapping]).unwrap(), &parent, &[Affine]).unwrap();
        let joint = reset_to_parent(&child, &parent, &[Mapping, Affine]).unwrap();
        assert_eq!(stepwise.tensors(), joint.tensors());
        let other = GeneratorWeights::random(&ArchitectureDescriptor::preset("toy32").unwrap(), 0).unwrap();
        assert!(matches!(reset_to_parent(&child, &other, &[Mapping]), Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn human_labels() {
        assert_eq!(human_count(30_276_583), "30.3M");
        assert_eq!(human_count(8_960), "9.0K");
        assert_eq!(human_count(12), "12");
    }
}
