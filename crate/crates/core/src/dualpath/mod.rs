//! Dual-path few-shot training over the two encoders.
//!
//! Classification runs through two scoring paths that share one learned
//! temperature. The image path compares a visually prompted image embedding
//! against frozen per-class text prototypes; the text path compares a frozen
//! image embedding against hierarchical text embeddings. The two probability
//! vectors are averaged into the output distribution, and the training loss
//! is the sum of the three cross-entropies. Freezing is structural rather
//! than a masking trick: frozen embeddings enter the tape as constants, so
//! each path can only move the parameters on its own side (plus the shared
//! temperature).

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA};
pub use model::{
    init_trainable_params, register_model_params, FrozenTextCache, InferenceContext, ModelValues,
    TrainedModel, TEMPERATURE_NAME,
};
pub use train::{dual_logits, hpt_loss, micro_model_grad_check, train, DualPathValues};

use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeBundle, N_H};
use crate::error::{Error, Result};
use crate::hierarchy::N_GLOBAL;

/// Knobs for one training run. Everything that influences the outcome is
/// here or in the two encoder configs; a config plus a seed fully determines
/// the trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Labeled images drawn per class.
    pub shots: usize,
    /// Rows in each layer's global prompt block.
    pub n_global: usize,
    /// Descriptions expected per category; must match the bundle.
    pub n_descriptions: usize,
    /// Stop early once train accuracy reaches this level. Checked every few
    /// epochs on the training shots, in inference mode.
    #[serde(default)]
    pub early_stop_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale defaults paired with [`EncoderConfig::desk_text`] and
    /// [`EncoderConfig::desk_image`].
    ///
    /// [`EncoderConfig::desk_text`]: crate::encoder::EncoderConfig::desk_text
    /// [`EncoderConfig::desk_image`]: crate::encoder::EncoderConfig::desk_image
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            lr: 0.0025,
            seed,
            shots: 16,
            n_global: N_GLOBAL,
            n_descriptions: N_H,
            early_stop_accuracy: Some(0.95),
        }
    }

    /// Tiny run for finite-difference checks and fast tests.
    pub fn micro(seed: u64) -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 2,
            lr: 0.05,
            seed,
            shots: 2,
            n_global: 1,
            n_descriptions: N_H,
            early_stop_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("shots", self.shots),
            ("n_descriptions", self.n_descriptions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be nonnegative and finite",
                self.lr
            )));
        }
        if let Some(a) = self.early_stop_accuracy {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!(
                    "early_stop_accuracy {a} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Validate against the bundle the run will train on.
    pub fn validate_for(&self, bundle: &KnowledgeBundle) -> Result<()> {
        self.validate()?;
        if self.n_descriptions != bundle.n_descriptions {
            return Err(Error::Config(format!(
                "config expects {} descriptions per category, bundle provides {}",
                self.n_descriptions, bundle.n_descriptions
            )));
        }
        Ok(())
    }
}

/// The three probability vectors for one image, read off the tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPathOutputs {
    pub p_i: Vec<f64>,
    pub p_t: Vec<f64>,
    pub p_o: Vec<f64>,
}

impl DualPathOutputs {
    /// Argmax of the averaged distribution; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.p_o.iter().enumerate() {
            if p > self.p_o[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        TrainConfig::desk(7).validate().unwrap();
        TrainConfig::micro(7).validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = TrainConfig::desk(0);
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = TrainConfig::desk(0);
        c.lr = f64::NAN;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = TrainConfig::desk(0);
        c.lr = -0.1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = TrainConfig::desk(0);
        c.early_stop_accuracy = Some(1.5);
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = TrainConfig::desk(0);
        c.shots = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn description_count_must_match_the_bundle() {
        let spec = crate::corpus::CorpusSpec {
            n_classes: 2,
            n_images_per_class: 2,
            image_side: 8,
            n_entities: 2,
            n_attributes: 2,
        };
        let (_, bundle) = crate::corpus::generate_synthetic_corpus(&spec, 3).unwrap();
        let mut c = TrainConfig::micro(3);
        c.validate_for(&bundle).unwrap();
        c.n_descriptions = bundle.n_descriptions + 1;
        assert!(matches!(c.validate_for(&bundle), Err(Error::Config(_))));
    }

    #[test]
    fn prediction_breaks_ties_downward() {
        let out = DualPathOutputs {
            p_i: vec![0.25; 4],
            p_t: vec![0.25; 4],
            p_o: vec![0.25, 0.25, 0.25, 0.25],
        };
        assert_eq!(out.predicted(), 0);
        let out = DualPathOutputs {
            p_i: vec![0.2, 0.8],
            p_t: vec![0.4, 0.6],
            p_o: vec![0.3, 0.7],
        };
        assert_eq!(out.predicted(), 1);
    }

    #[test]
    fn config_json_round_trips() {
        let c = TrainConfig::desk(42);
        let text = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);

        // Older configs without the early-stop field still parse.
        let legacy: TrainConfig = serde_json::from_str(
            r#"{"epochs":1,"batch_size":1,"lr":0.1,"seed":0,"shots":1,
                "n_global":2,"n_descriptions":5}"#,
        )
        .unwrap();
        assert_eq!(legacy.early_stop_accuracy, None);
    }
}
