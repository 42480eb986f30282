//! Domain-adaptation objectives: text-directional loss, the one-shot
//! composite and hinge adversarial losses.
//!
//! Loss functions take generated images as graph [`Var`]s (so gradients reach
//! the trainable parameters) and base/real images as plain tensors.

pub mod augment;
pub mod backend;
pub mod discriminator;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

pub use augment::{augment, augment_vars, AugmentOp, AugmentationPolicy};
pub use backend::{BackendRegistry, EmbeddingBackend, EnsembleBackend, StubBackend, EVAL_BACKEND, TRAIN_BACKEND};
pub use discriminator::{BoundDiscriminator, Discriminator};

/// Norms below this make a direction degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Norm floor used by [`NormGuard::Clamp`].
pub const CLAMP_NORM: f64 = 1e-8;

/// How image-embedding differences with (near) zero norm are handled.
///
/// At the start of adaptation the trainable generator equals its parent, so
/// `ΔI = 0`; training clamps the norm instead of failing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormGuard {
    #[default]
    Strict,
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDomainSpec {
    pub target_text: String,
    pub source_text: String,
}

impl TextDomainSpec {
    pub fn new(target: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        let spec = Self {
            target_text: target.into(),
            source_text: source.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_text.trim().is_empty() || self.source_text.trim().is_empty() {
            return Err(Error::Config("target and source descriptions must be non-empty".into()));
        }
        Ok(())
    }

    /// `ΔT = E_T(target) − E_T(source)`.
    pub fn direction(&self, backend: &dyn EmbeddingBackend) -> Result<Tensor> {
        self.validate()?;
        let dt = backend
            .encode_text(&self.target_text)
            .sub(&backend.encode_text(&self.source_text));
        if dt.norm() < DEGENERATE_NORM {
            return Err(Error::DegenerateDirection("target and source texts embed identically".into()));
        }
        Ok(dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotSpec {
    pub reference_image: Image,
    pub lambda_cw: f64,
    pub lambda_rc: f64,
    pub lambda_rr: f64,
}

impl OneShotSpec {
    pub const LAMBDA_CW: f64 = 0.5;
    pub const LAMBDA_RC: f64 = 30.0;
    pub const LAMBDA_RR: f64 = 10.0;

    pub fn new(reference_image: Image) -> Self {
        Self {
            reference_image,
            lambda_cw: Self::LAMBDA_CW,
            lambda_rc: Self::LAMBDA_RC,
            lambda_rr: Self::LAMBDA_RR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_cw, self.lambda_rc, self.lambda_rr];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.reference_image.shape().len() != 3 || self.reference_image.shape()[0] != 3 {
            return Err(Error::Shape("reference must be a 3×H×W image".into()));
        }
        Ok(())
    }
}

fn guarded_norm<'g>(v: Var<'g>, guard: NormGuard, what: &str) -> Result<Var<'g>> {
    let n = v.norm();
    if n.item() < DEGENERATE_NORM || n.item() < CLAMP_NORM && guard == NormGuard::Clamp {
        return match guard {
            NormGuard::Strict => Err(Error::DegenerateDirection(format!("{what} has norm {:.3e}", n.item()))),
            NormGuard::Clamp => Ok(v.graph().scalar(CLAMP_NORM)),
        };
    }
    Ok(n)
}

/// `1 − cos(a, b)` with the norm of `a` guarded and `b` constant.
fn one_minus_cos<'g>(a: Var<'g>, b: Var<'g>, guard: NormGuard, what: &str) -> Result<Var<'g>> {
    let na = guarded_norm(a, guard, what)?;
    let nb = b.norm();
    Ok(a.dot(b).div(na.mul(nb)).neg().offset(1.0))
}

fn check_batches(generated: usize, base: usize) -> Result<()> {
    if generated == 0 || generated != base {
        return Err(Error::Shape(format!(
            "generated and base batches must be equal and non-empty ({generated} vs {base})"
        )));
    }
    Ok(())
}

fn mean<'g>(terms: Vec<Var<'g>>) -> Var<'g> {
    let n = terms.len() as f64;
    let g = terms[0].graph();
    g.concat(&terms).sum().scale(1.0 / n)
}

/// Mean over the batch of `1 − cos(E_I(gen_i) − E_I(base_i), ΔT)`.
pub fn directional_loss<'g>(
    generated: &[Var<'g>],
    base: &[Image],
    spec: &TextDomainSpec,
    backend: &dyn EmbeddingBackend,
) -> Result<Var<'g>> {
    let dt = spec.direction(backend)?;
    directional_loss_towards(generated, base, &dt, backend, NormGuard::Strict)
}

/// [`directional_loss`] against a precomputed target direction.
pub fn directional_loss_towards<'g>(
    generated: &[Var<'g>],
    base: &[Image],
    delta_t: &Tensor,
    backend: &dyn EmbeddingBackend,
    guard: NormGuard,
) -> Result<Var<'g>> {
    check_batches(generated.len(), base.len())?;
    if delta_t.norm() < DEGENERATE_NORM {
        return Err(Error::DegenerateDirection("target direction has zero norm".into()));
    }
    let g = generated[0].graph();
    let dt = g.constant(delta_t.clone());
    let terms = generated
        .iter()
        .zip(base)
        .enumerate()
        .map(|(i, (&gen, b))| {
            let di = backend.encode_image(gen).sub(g.constant(backend.image_embedding(b)));
            one_minus_cos(di, dt, guard, &format!("image direction {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(terms))
}

/// The four one-shot terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct OneShotTerms<'g> {
    pub across: Var<'g>,
    pub within: Var<'g>,
    pub refclip: Var<'g>,
    pub refrec: Var<'g>,
    pub total: Var<'g>,
}

/// One-shot composite `L_across + λcw·L_within + λrc·L_refclip + λrr·L_refrec`.
///
/// `reference_reconstruction` is the current generator's image at the
/// reference's inverted latent; without it `L_refrec` is 0.
pub fn one_shot_loss<'g>(
    generated: &[Var<'g>],
    base: &[Image],
    reference_reconstruction: Option<Var<'g>>,
    spec: &OneShotSpec,
    backend: &dyn EmbeddingBackend,
    guard: NormGuard,
) -> Result<OneShotTerms<'g>> {
    spec.validate()?;
    check_batches(generated.len(), base.len())?;
    let g = generated[0].graph();
    let e_ref = backend.image_embedding(&spec.reference_image);
    let base_emb: Vec<Tensor> = base.iter().map(|b| backend.image_embedding(b)).collect();
    let mut mean_base = Tensor::zeros(e_ref.shape());
    for e in &base_emb {
        mean_base.add_assign(e);
    }
    let mean_base = mean_base.scale(1.0 / base.len() as f64);
    let dt_ref = e_ref.sub(&mean_base);
    if dt_ref.norm() < DEGENERATE_NORM {
        return Err(Error::DegenerateDirection("reference embeds like the base batch".into()));
    }
    let dt_ref = g.constant(dt_ref);
    let e_ref = g.constant(e_ref);

    let gen_emb: Vec<Var<'g>> = generated.iter().map(|&x| backend.encode_image(x)).collect();
    let deltas: Vec<Var<'g>> = gen_emb
        .iter()
        .zip(&base_emb)
        .map(|(&e, b)| e.sub(g.constant(b.clone())))
        .collect();

    let across = mean(
        deltas
            .iter()
            .map(|&d| one_minus_cos(d, dt_ref, guard, "image direction"))
            .collect::<Result<_>>()?,
    );

    let mut pair_cos = Vec::new();
    for i in 0..deltas.len() {
        for j in i + 1..deltas.len() {
            let ni = guarded_norm(deltas[i], guard, "image direction")?;
            let nj = guarded_norm(deltas[j], guard, "image direction")?;
            pair_cos.push(deltas[i].dot(deltas[j]).div(ni.mul(nj)));
        }
    }
    let within = if pair_cos.is_empty() {
        g.scalar(0.0)
    } else {
        mean(pair_cos).neg().offset(1.0)
    };

    let refclip = mean(
        gen_emb
            .iter()
            .map(|&e| one_minus_cos(e, e_ref, NormGuard::Strict, "image embedding"))
            .collect::<Result<_>>()?,
    );

    let refrec = match reference_reconstruction {
        Some(rec) => {
            if rec.value().shape() != spec.reference_image.shape() {
                return Err(Error::Shape("reconstruction and reference differ in shape".into()));
            }
            rec.sub(g.constant(spec.reference_image.clone())).square().mean()
        }
        None => g.scalar(0.0),
    };

    let total = across
        .add(within.scale(spec.lambda_cw))
        .add(refclip.scale(spec.lambda_rc))
        .add(refrec.scale(spec.lambda_rr));
    Ok(OneShotTerms {
        across,
        within,
        refclip,
        refrec,
        total,
    })
}

/// Generator and discriminator hinge losses.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses<'g> {
    pub g_loss: Var<'g>,
    pub d_loss: Var<'g>,
}

/// `d = Σ max(0, 1 − D(real)) + Σ max(0, 1 + D(fake))`, `g = Σ −D(fake)`.
pub fn hinge_losses<'g>(real_logits: &[Var<'g>], fake_logits: &[Var<'g>]) -> Result<AdversarialLosses<'g>> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::Shape("adversarial batches must be non-empty".into()));
    }
    for l in real_logits.iter().chain(fake_logits) {
        if !l.value().is_finite() {
            return Err(Error::NonFinite { location: "discriminator logit".into() });
        }
    }
    let g = real_logits[0].graph();
    let real: Vec<Var<'g>> = real_logits.iter().map(|&l| l.neg().offset(1.0).relu()).collect();
    let fake: Vec<Var<'g>> = fake_logits.iter().map(|&l| l.offset(1.0).relu()).collect();
    let d_loss = g.concat(&real).sum().add(g.concat(&fake).sum());
    let g_loss = g.concat(fake_logits).sum().neg();
    Ok(AdversarialLosses { g_loss, d_loss })
}

/// Augments both batches with `aug`, scores them with `disc` and applies
/// [`hinge_losses`]. Real images get the policy seed, fakes the seed + 1.
pub fn adversarial_losses<'g>(
    fake: &[Var<'g>],
    real: &[Image],
    disc: &BoundDiscriminator<'g>,
    aug: &AugmentationPolicy,
) -> Result<AdversarialLosses<'g>> {
    aug.validate()?;
    if fake.is_empty() || real.is_empty() {
        return Err(Error::Shape("adversarial batches must be non-empty".into()));
    }
    let g = fake[0].graph();
    let real_vars: Vec<Var<'g>> = real.iter().map(|r| g.constant(r.clone())).collect();
    let real_aug = augment_vars(&real_vars, aug);
    let fake_aug = augment_vars(fake, &aug.with_seed(aug.seed.wrapping_add(1)));
    let real_logits = real_aug.iter().map(|&x| disc.forward(x)).collect::<Result<Vec<_>>>()?;
    let fake_logits = fake_aug.iter().map(|&x| disc.forward(x)).collect::<Result<Vec<_>>>()?;
    hinge_losses(&real_logits, &fake_logits)
}
