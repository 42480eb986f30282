//! Image/text embedding backends.
//!
//! Training and evaluation only see the [`EmbeddingBackend`] trait. The
//! in-crate [`StubBackend`] is a fixed random projection of a 16×16 bilinear
//! thumbnail; real CLIP-style encoders plug in through the same trait.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, SpatialMap, Var};
use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Differentiable unit-norm image embedding of a `3 × H × W` image.
    fn encode_image<'g>(&self, image: Var<'g>) -> Var<'g>;

    /// Unit-norm text embedding.
    fn encode_text(&self, text: &str) -> Tensor;

    fn image_embedding(&self, image: &Image) -> Tensor {
        let g = Graph::new();
        (*self.encode_image(g.constant(image.clone())).value()).clone()
    }
}

/// Deterministic stand-in encoder: bilinear resize to 16×16, flatten, fixed
/// Gaussian projection, L2 normalization. Text is hashed into a seeded
/// Gaussian vector.
pub struct StubBackend {
    id: String,
    seed: u64,
    thumb: usize,
    projection: Tensor,
}

impl StubBackend {
    pub const THUMB: usize = 16;
    pub const DIM: usize = 64;

    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        let thumb = Self::THUMB;
        let inputs = 3 * thumb * thumb;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Tensor::randn(&[Self::DIM, inputs], 1.0 / (inputs as f64).sqrt(), &mut rng);
        Self {
            id: id.into(),
            seed,
            thumb,
            projection,
        }
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }
}

impl EmbeddingBackend for StubBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn encode_image<'g>(&self, image: Var<'g>) -> Var<'g> {
        let shape = image.value().shape().to_vec();
        let map = Arc::new(SpatialMap::bilinear_resize(shape[1], shape[2], self.thumb, self.thumb));
        let g = image.graph();
        let p = g.constant(self.projection.clone());
        p.matvec(image.resample(map).flatten()).normalize()
    }

    fn encode_text(&self, text: &str) -> Tensor {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::randn(&[Self::DIM], 1.0, &mut rng);
        let n = v.norm();
        v.scale(1.0 / n)
    }
}

/// Averaged multi-encoder wrapper: member embeddings are concatenated and
/// scaled by `1/sqrt(n)`, so cosines are the mean of member cosines.
pub struct EnsembleBackend {
    id: String,
    members: Vec<Arc<dyn EmbeddingBackend>>,
}

impl EnsembleBackend {
    pub fn new(id: impl Into<String>, members: Vec<Arc<dyn EmbeddingBackend>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        Ok(Self { id: id.into(), members })
    }
}

impl EmbeddingBackend for EnsembleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.members.iter().map(|m| m.dim()).sum()
    }

    fn encode_image<'g>(&self, image: Var<'g>) -> Var<'g> {
        let scale = 1.0 / (self.members.len() as f64).sqrt();
        let parts: Vec<Var<'g>> = self
            .members
            .iter()
            .map(|m| m.encode_image(image).scale(scale))
            .collect();
        image.graph().concat(&parts)
    }

    fn encode_text(&self, text: &str) -> Tensor {
        let scale = 1.0 / (self.members.len() as f64).sqrt();
        let data = self
            .members
            .iter()
            .flat_map(|m| m.encode_text(text).scale(scale).into_data())
            .collect();
        Tensor::from_vec(data)
    }
}

/// Backends keyed by id.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn EmbeddingBackend>>,
}

impl BackendRegistry {
    /// Training ensemble `stub-train` (two stub members) and a separate
    /// evaluation encoder `stub-eval`.
    pub fn with_stubs() -> Self {
        let a: Arc<dyn EmbeddingBackend> = Arc::new(StubBackend::new("stub-train-a", 101));
        let b: Arc<dyn EmbeddingBackend> = Arc::new(StubBackend::new("stub-train-b", 202));
        let ensemble = EnsembleBackend::new("stub-train", vec![a.clone(), b.clone()]).expect("members");
        let mut reg = Self::default();
        reg.register(a);
        reg.register(b);
        reg.register(Arc::new(ensemble));
        reg.register(Arc::new(StubBackend::new("stub-eval", 303)));
        reg
    }

    pub fn register(&mut self, backend: Arc<dyn EmbeddingBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn EmbeddingBackend>> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown embedding backend '{id}'")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }
}

pub const TRAIN_BACKEND: &str = "stub-train";
pub const EVAL_BACKEND: &str = "stub-eval";

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[3, 32, 32], 1.0, &mut rng)
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let reg = BackendRegistry::with_stubs();
        for id in reg.ids() {
            let b = reg.get(&id).unwrap();
            let e = b.image_embedding(&image(1));
            assert_eq!(e.numel(), b.dim());
            assert!((e.norm() - 1.0).abs() < 1e-12);
            assert!(e.bit_eq(&b.image_embedding(&image(1))));
            let t = b.encode_text("Sketch");
            assert!((t.norm() - 1.0).abs() < 1e-12);
            assert!(t.bit_eq(&b.encode_text("Sketch")));
            assert!(!t.bit_eq(&b.encode_text("Photo")));
        }
    }

    #[test]
    fn ensemble_cosine_is_member_average() {
        let reg = BackendRegistry::with_stubs();
        let (x, y) = (image(2), image(3));
        let cos = |id: &str| {
            let b = reg.get(id).unwrap();
            b.image_embedding(&x).dot(&b.image_embedding(&y))
        };
        let avg = 0.5 * (cos("stub-train-a") + cos("stub-train-b"));
        assert!((cos("stub-train") - avg).abs() < 1e-12);
    }

    #[test]
    fn unknown_backend() {
        assert!(BackendRegistry::with_stubs().get("clip-vit-l14").is_err());
    }
}
