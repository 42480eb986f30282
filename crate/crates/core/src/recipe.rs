//! Serializable description of one adaptation run, shared by the `adapt`
//! command's manifest file and the service's `/adapt` endpoint.
//!
//! ```json
//! {
//!   "kind": "stylespace",
//!   "regime": "similar_text",
//!   "objective": {"type": "text", "target_text": "sketch", "source_text": "photo"},
//!   "iterations": 300,
//!   "seed": 0,
//!   "label": "sketch"
//! }
//! ```

use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::arch::GeneratorWeights;
use crate::error::{Error, Result};
use crate::image_io::{decode_png, load_png};
use crate::losses::{AugmentationPolicy, BackendRegistry, OneShotSpec, TextDomainSpec, TRAIN_BACKEND};
use crate::paramspace::ParamSpaceKind;
use crate::tensor::Image;
use crate::trainer::{
    adapt_adversarial, adapt_with_progress, preset, AdaptOptions, AdaptationResult, AdversarialOptions,
    Hyperparams, MeanColorObjective, OneShotObjective, Regime, TextObjective,
};

/// An image given by file path or inline base64 PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path { path: PathBuf },
    Inline { png_base64: String },
}

impl ImageRef {
    /// Loads the image; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Image> {
        match self {
            ImageRef::Path { path } => load_png(base.join(path)),
            ImageRef::Inline { png_base64 } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(png_base64)
                    .map_err(|e| Error::Format(format!("bad base64 image: {e}")))?;
                decode_png(&bytes)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    Text {
        target_text: String,
        source_text: String,
    },
    OneShot {
        reference: ImageRef,
    },
    /// Synthetic objective pulling per-channel image means to `target`.
    MeanColor {
        target: [f64; 3],
    },
    Adversarial {
        images: Vec<ImageRef>,
    },
}

fn default_regime() -> Regime {
    Regime::SimilarText
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecipe {
    pub kind: ParamSpaceKind,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    pub objective: ObjectiveSpec,
    /// Overrides of the regime preset.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label: Option<String>,
    /// Embedding backend id for the text and one-shot losses.
    #[serde(default)]
    pub backend: Option<String>,
}

impl AdaptRecipe {
    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let mut hp = preset(self.kind, self.regime)?;
        if let Some(n) = self.iterations {
            hp.iterations = n;
        }
        if let Some(b) = self.batch_size {
            hp.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            hp.learning_rate = lr;
        }
        hp.seed = self.seed;
        hp.validate()?;
        Ok(hp)
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| match &self.objective {
            ObjectiveSpec::Text { target_text, .. } => target_text.clone(),
            ObjectiveSpec::OneShot { .. } => "one-shot".into(),
            ObjectiveSpec::MeanColor { .. } => "mean-color".into(),
            ObjectiveSpec::Adversarial { .. } => "adversarial".into(),
        })
    }

    /// Runs the recipe on `parent`. `progress(done, total)` returning false
    /// cancels the run; image paths resolve against `base`.
    pub fn run(
        &self,
        parent: &GeneratorWeights,
        backends: &BackendRegistry,
        base: &Path,
        progress: impl FnMut(usize, usize) -> bool,
    ) -> Result<AdaptationResult> {
        let hp = self.hyperparams()?;
        let opts = AdaptOptions {
            label: self.label(),
            ..AdaptOptions::default()
        };
        let backend = || backends.get(self.backend.as_deref().unwrap_or(TRAIN_BACKEND));
        match &self.objective {
            ObjectiveSpec::Text {
                target_text,
                source_text,
            } => {
                let obj = TextObjective::new(TextDomainSpec::new(target_text, source_text)?, backend()?)?;
                adapt_with_progress(parent, self.kind, &obj, &hp, &opts, progress)
            }
            ObjectiveSpec::OneShot { reference } => {
                let spec = OneShotSpec::new(reference.load(base)?);
                let obj = OneShotObjective::new(spec, backend()?, None);
                adapt_with_progress(parent, self.kind, &obj, &hp, &opts, progress)
            }
            ObjectiveSpec::MeanColor { target } => {
                let obj = MeanColorObjective { target: *target };
                adapt_with_progress(parent, self.kind, &obj, &hp, &opts, progress)
            }
            ObjectiveSpec::Adversarial { images } => {
                let data = images.iter().map(|i| i.load(base)).collect::<Result<Vec<_>>>()?;
                let adv = AdversarialOptions {
                    label: opts.label,
                    ..AdversarialOptions::default()
                };
                let aug = AugmentationPolicy::bgc(self.seed);
                adapt_adversarial(parent, self.kind, &data, &aug, &hp, &adv, None).map(|(r, _)| r)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_json_and_overrides() {
        let r: AdaptRecipe = serde_json::from_str(
            r#"{"kind": "affine+8", "objective": {"type": "mean_color", "target": [0.1, 0.2, 0.3]},
                "iterations": 7}"#,
        )
        .unwrap();
        assert_eq!(r.kind, ParamSpaceKind::AffinePlus(8));
        assert_eq!(r.regime, Regime::SimilarText);
        let hp = r.hyperparams().unwrap();
        assert_eq!((hp.iterations, hp.learning_rate), (7, 0.01));
        assert_eq!(r.label(), "mean-color");
        let bad = AdaptRecipe {
            learning_rate: Some(-1.0),
            ..r
        };
        assert!(bad.hyperparams().is_err());
    }
}
