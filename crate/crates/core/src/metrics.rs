//! Evaluation metrics: embedding Quality and Diversity, Fréchet distance
//! between Gaussian feature statistics, and the polynomial-kernel MMD
//! (kernel distance). Means are Kahan-summed so results do not depend on
//! how a batch was split.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::arch::{sample_latent, GeneratorWeights, SamplerConfig};
use crate::directions::{render, StyleDomainDirection};
use crate::error::{Error, Result};
use crate::losses::EmbeddingBackend;
use crate::tensor::{Image, Tensor};

/// Images per repeat for Quality/Diversity.
pub const EVAL_IMAGES: usize = 1000;
/// Independent repeats per reported metric.
pub const EVAL_REPEATS: usize = 5;
/// Generated images for the Fréchet protocol.
pub const FID_IMAGES: usize = 5000;
/// Symmetry tolerance for covariance inputs.
pub const COV_SYMMETRY_TOL: f64 = 1e-6;

/// Compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

fn kahan_mean(values: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let mut acc = KahanSum::default();
    let mut n = 0;
    for v in values {
        acc.add(v);
        n += 1;
    }
    (acc.value() / n.max(1) as f64, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Quality,
    Diversity,
    Fid,
    Kid,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Quality => "quality",
            Metric::Diversity => "diversity",
            Metric::Fid => "fid",
            Metric::Kid => "kid",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quality" => Ok(Metric::Quality),
            "diversity" => Ok(Metric::Diversity),
            "fid" => Ok(Metric::Fid),
            "kid" => Ok(Metric::Kid),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    /// Mean of `per_repeat_values`.
    pub value: f64,
    pub n_images: usize,
    pub repeats: usize,
    pub per_repeat_values: Vec<f64>,
    /// Population standard deviation across repeats.
    pub spread: f64,
}

impl MetricReport {
    pub fn from_repeats(metric_name: impl Into<String>, n_images: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("a report needs at least one repeat".into()));
        }
        let (value, repeats) = kahan_mean(values.iter().copied());
        let (var, _) = kahan_mean(values.iter().map(|v| (v - value).powi(2)));
        Ok(Self {
            metric_name: metric_name.into(),
            value,
            n_images,
            repeats,
            per_repeat_values: values,
            spread: var.sqrt(),
        })
    }
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("embeddings {:?} vs {:?}", a.shape(), b.shape())));
    }
    // sqrt(|a|²|b|²) rather than |a||b| keeps cos(a, a) exactly 1
    let denom = (a.dot(a) * b.dot(b)).sqrt();
    if denom == 0.0 {
        return Err(Error::DegenerateDirection("zero-norm embedding".into()));
    }
    Ok(a.dot(b) / denom)
}

/// Mean cosine between each embedding and `target`.
pub fn quality_of_embeddings(embeddings: &[Tensor], target: &Tensor) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Invalid("quality needs at least one image".into()));
    }
    let cos = embeddings.iter().map(|e| cosine(e, target)).collect::<Result<Vec<_>>>()?;
    Ok(kahan_mean(cos).0)
}

/// Mean `1 − cos` over unordered pairs.
pub fn diversity_of_embeddings(embeddings: &[Tensor]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Invalid("diversity needs at least two images".into()));
    }
    let mut acc = KahanSum::default();
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            acc.add(1.0 - cosine(&embeddings[i], &embeddings[j])?);
            pairs += 1;
        }
    }
    Ok(acc.value() / pairs as f64)
}

fn embed(images: &[Image], backend: &dyn EmbeddingBackend) -> Vec<Tensor> {
    images.iter().map(|i| backend.image_embedding(i)).collect()
}

/// Single-repeat Quality report for `images` against a text embedding.
pub fn quality(images: &[Image], target_embedding: &Tensor, backend: &dyn EmbeddingBackend) -> Result<MetricReport> {
    let v = quality_of_embeddings(&embed(images, backend), target_embedding)?;
    MetricReport::from_repeats("quality", images.len(), vec![v])
}

/// Single-repeat Diversity report for `images`.
pub fn diversity(images: &[Image], backend: &dyn EmbeddingBackend) -> Result<MetricReport> {
    let v = diversity_of_embeddings(&embed(images, backend))?;
    MetricReport::from_repeats("diversity", images.len(), vec![v])
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn from_features(features: &[Tensor]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Invalid("feature statistics need at least two samples".into()));
        }
        let d = features[0].numel();
        if features.iter().any(|f| f.numel() != d) {
            return Err(Error::Shape("features of different sizes".into()));
        }
        let n = features.len() as f64;
        let x = DMatrix::from_fn(features.len(), d, |i, j| features[i].data()[j]);
        let mean = DVector::from_fn(d, |j, _| kahan_mean(x.column(j).iter().copied()).0);
        let centered = DMatrix::from_fn(features.len(), d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1.0);
        Ok(Self { mean, cov })
    }

    fn check(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.shape() != (d, d) {
            return Err(Error::Shape(format!("mean of {d} dims with covariance {:?}", self.cov.shape())));
        }
        if (&self.cov - self.cov.transpose()).amax() > COV_SYMMETRY_TOL {
            return Err(Error::Invalid("covariance is not symmetric".into()));
        }
        Ok(())
    }
}

/// Symmetric square root with negative eigenvalues clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|μ₁ − μ₂|² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// `Tr((Σ₁Σ₂)^{1/2})` is taken as the trace of the square root of the
/// symmetric matrix `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which has the same eigenvalues.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let s1 = sqrt_psd(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt)
}

/// Unbiased MMD² with kernel `(xᵀy / d + 1)³`: within-set sums skip the
/// diagonal, the cross term averages all pairs.
pub fn kernel_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("kernel distance needs at least two samples per set".into()));
    }
    let d = a[0].numel();
    if a.iter().chain(b).any(|f| f.numel() != d) {
        return Err(Error::Shape("features of different sizes".into()));
    }
    let k = |x: &Tensor, y: &Tensor| (x.dot(y) / d as f64 + 1.0).powi(3);
    let within = |s: &[Tensor]| {
        let mut acc = KahanSum::default();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc.add(k(&s[i], &s[j]));
                }
            }
        }
        acc.value() / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = KahanSum::default();
    for x in a {
        for y in b {
            cross.add(k(x, y));
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross.value() / (a.len() * b.len()) as f64)
}

/// Sampling protocol for generator-level evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_images: usize,
    pub repeats: usize,
    pub seed: u64,
    pub psi: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_images: EVAL_IMAGES,
            repeats: EVAL_REPEATS,
            seed: 0,
            psi: 1.0,
        }
    }
}

impl EvalProtocol {
    /// Fréchet/kernel protocol: one pass over [`FID_IMAGES`] generations.
    pub fn fid() -> Self {
        Self {
            n_images: FID_IMAGES,
            repeats: 1,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.repeats == 0 {
            return Err(Error::Config("evaluation needs at least one image and one repeat".into()));
        }
        SamplerConfig::with_psi(self.psi).validate()
    }

    /// Embeddings of repeat `r`, rendered with `dir` at strength 1.
    pub fn features(
        &self,
        weights: &GeneratorWeights,
        dir: Option<&StyleDomainDirection>,
        repeat: usize,
        backend: &dyn EmbeddingBackend,
    ) -> Result<Vec<Tensor>> {
        let cfg = SamplerConfig::with_psi(self.psi);
        let dim = weights.descriptor().latent_dim;
        (0..self.n_images)
            .map(|i| {
                let seed = self.seed.wrapping_add((repeat * self.n_images + i) as u64);
                let img = render(weights, dir, &sample_latent(seed, dim), 1.0, &cfg)?;
                Ok(backend.image_embedding(&img))
            })
            .collect()
    }
}

/// What generated images are compared against.
pub enum EvalReference<'a> {
    /// Target description for Quality.
    Text(&'a str),
    /// Nothing, for Diversity.
    None,
    /// Real images for the Fréchet and kernel distances.
    Images(&'a [Image]),
}

/// Runs `metric` over `protocol.repeats` independent sample sets.
pub fn evaluate(
    metric: Metric,
    weights: &GeneratorWeights,
    dir: Option<&StyleDomainDirection>,
    reference: EvalReference<'_>,
    protocol: &EvalProtocol,
    backend: &dyn EmbeddingBackend,
) -> Result<MetricReport> {
    protocol.validate()?;
    let real = match (metric, &reference) {
        (Metric::Quality, EvalReference::Text(_)) | (Metric::Diversity, _) => None,
        (Metric::Fid | Metric::Kid, EvalReference::Images(images)) => Some(embed(images, backend)),
        _ => {
            return Err(Error::Config(format!("metric {metric} needs a different reference")));
        }
    };
    let target = match reference {
        EvalReference::Text(t) => Some(backend.encode_text(t)),
        _ => None,
    };
    let values = (0..protocol.repeats)
        .map(|r| {
            let gen = protocol.features(weights, dir, r, backend)?;
            match metric {
                Metric::Quality => quality_of_embeddings(&gen, target.as_ref().expect("checked above")),
                Metric::Diversity => diversity_of_embeddings(&gen),
                Metric::Fid => frechet_distance(
                    &FeatureStats::from_features(&gen)?,
                    &FeatureStats::from_features(real.as_ref().expect("checked above"))?,
                ),
                Metric::Kid => kernel_distance(&gen, real.as_ref().expect("checked above")),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_repeats(metric.to_string(), protocol.n_images, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn protocol_constants() {
        let p = EvalProtocol::default();
        assert_eq!((p.n_images, p.repeats), (1000, 5));
        assert_eq!(EvalProtocol::fid().n_images, 5000);
    }

    #[test]
    fn quality_and_diversity_trivial_cases() {
        let target = t(&[0.0, 1.0]);
        assert_eq!(quality_of_embeddings(&[t(&[0.0, 3.0]), t(&[0.0, 0.5])], &target).unwrap(), 1.0);
        assert_eq!(quality_of_embeddings(&[t(&[2.0, 0.0])], &target).unwrap(), 0.0);
        assert_eq!(diversity_of_embeddings(&[t(&[1.0, 1.0]), t(&[2.0, 2.0])]).unwrap(), 0.0);
        assert_eq!(diversity_of_embeddings(&[t(&[1.0, 0.0]), t(&[-1.0, 0.0])]).unwrap(), 2.0);
        assert!(diversity_of_embeddings(&[t(&[1.0, 0.0])]).is_err());
        assert!(quality_of_embeddings(&[], &target).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let id = DMatrix::<f64>::identity(3, 3);
        let a = FeatureStats::new(DVector::zeros(3), id.clone());
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        let b = FeatureStats::new(DVector::from_vec(vec![1.0, 0.0, 0.0]), id);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = FeatureStats::new(DVector::zeros(2), DMatrix::identity(2, 2));
        assert!(matches!(frechet_distance(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_distance_of_a_repeated_vector_is_zero() {
        let v = t(&[0.3, -1.2, 0.5]);
        let set = vec![v.clone(), v.clone(), v];
        assert_eq!(kernel_distance(&set, &set).unwrap(), 0.0);
        assert!(kernel_distance(&set[..1], &set).is_err());
    }

    #[test]
    fn report_mean_and_spread() {
        let r = MetricReport::from_repeats("q", 10, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.value, 2.0);
        assert!((r.spread - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(MetricReport::from_repeats("q", 10, vec![]).is_err());
    }
}
