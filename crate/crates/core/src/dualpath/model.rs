//! Trainable parameter registry, frozen-side caches, and the trained-model
//! container with its inference context.

use rand::Rng;

use crate::corpus::{KnowledgeBundle, Vocabulary};
use crate::dualpath::{DualPathOutputs, TrainConfig};
use crate::encoder::{
    encode_image, encode_image_frozen, encode_text_str, FrozenImageWeights, FrozenTextWeights,
    LayerTrace,
};
use crate::error::{Error, Result};
use crate::hierarchy::{
    class_text_embedding, init_hierarchy_params, register_hierarchy_params, Ablation,
    ClassTextInputs, HierarchyValues, TextMode,
};
use crate::numerics::{ParameterSet, Tape, Tensor, Value};

/// Name of the shared log-temperature parameter.
pub const TEMPERATURE_NAME: &str = "temperature";

pub(crate) fn visual_prompt_name(layer: usize) -> String {
    format!("visual.prompt.l{layer}")
}

/// Initial log-temperature; the effective scale starts at 1/0.07.
fn temperature_init() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Create every trainable parameter for a run: hierarchy prompts and
/// generator, per-layer visual prompt blocks, and the log-temperature.
pub fn init_trainable_params<R: Rng>(
    set: &mut ParameterSet,
    text_cfg: &crate::encoder::EncoderConfig,
    image_cfg: &crate::encoder::EncoderConfig,
    n_global: usize,
    rng: &mut R,
) -> Result<()> {
    init_hierarchy_params(set, text_cfg.n_layers, n_global, text_cfg.d_model, rng)?;
    for l in 0..image_cfg.n_layers {
        set.insert(
            &visual_prompt_name(l),
            Tensor::randn(
                vec![image_cfg.n_visual_prompts, image_cfg.d_model],
                0.1,
                rng,
            ),
        )?;
    }
    set.insert(
        TEMPERATURE_NAME,
        Tensor::new(vec![1], vec![temperature_init()])?,
    )?;
    Ok(())
}

/// Tape handles for every trainable parameter of one step.
#[derive(Debug)]
pub struct ModelValues {
    pub hierarchy: HierarchyValues,
    pub visual: Vec<Value>,
    pub temperature: Value,
}

/// Put the whole parameter set on a tape.
pub fn register_model_params(
    tape: &mut Tape,
    set: &ParameterSet,
    text_layers: usize,
    image_layers: usize,
    n_global: usize,
) -> Result<ModelValues> {
    let hierarchy = register_hierarchy_params(tape, set, text_layers, n_global)?;
    let mut visual = Vec::with_capacity(image_layers);
    for l in 0..image_layers {
        let name = visual_prompt_name(l);
        let t = set
            .get(&name)
            .ok_or_else(|| Error::Consistency(format!("parameter {name:?} missing from set")))?;
        visual.push(tape.param(&name, t)?);
    }
    let temp = set
        .get(TEMPERATURE_NAME)
        .ok_or_else(|| Error::Consistency("temperature parameter missing from set".into()))?;
    let temperature = tape.param(TEMPERATURE_NAME, temp)?;
    Ok(ModelValues {
        hierarchy,
        visual,
        temperature,
    })
}

/// Everything the frozen text encoder contributes to a run, computed once:
/// per-class prototypes (the normalized mean of the unit embeddings of all
/// descriptions) and the per-description layer traces that seed the high
/// prompts.
#[derive(Debug)]
pub struct FrozenTextCache {
    pub prototypes: Vec<Tensor>,
    pub traces: Vec<Vec<LayerTrace>>,
}

impl FrozenTextCache {
    pub fn build(
        bundle: &KnowledgeBundle,
        classes: &[String],
        vocab: &Vocabulary,
        weights: &FrozenTextWeights,
    ) -> Result<FrozenTextCache> {
        if classes.is_empty() {
            return Err(Error::Argument("no classes to cache".into()));
        }
        let mut prototypes = Vec::with_capacity(classes.len());
        let mut traces = Vec::with_capacity(classes.len());
        for name in classes {
            let entry = bundle
                .categories
                .iter()
                .find(|c| &c.class_name == name)
                .ok_or_else(|| {
                    Error::Config(format!("class {name:?} not found in the bundle"))
                })?;
            let mut class_traces = Vec::with_capacity(entry.records.len());
            let mut mean = vec![0.0; weights.config.d_joint];
            for record in &entry.records {
                let (z, trace) = encode_text_str(&record.text, vocab, weights)?;
                for (m, v) in mean.iter_mut().zip(z.data()) {
                    *m += v / entry.records.len() as f64;
                }
                class_traces.push(trace);
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= crate::numerics::NORM_GUARD {
                return Err(Error::NumericDomain(format!(
                    "prototype for {name:?} collapsed to the zero vector"
                )));
            }
            for m in &mut mean {
                *m /= norm;
            }
            prototypes.push(Tensor::new(vec![weights.config.d_joint], mean)?);
            traces.push(class_traces);
        }
        Ok(FrozenTextCache { prototypes, traces })
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }
}

/// A finished training run: frozen encoders, learned parameters, and the
/// bookkeeping needed to reproduce or resume evaluation.
pub struct TrainedModel {
    pub text_weights: FrozenTextWeights,
    pub image_weights: FrozenImageWeights,
    pub params: ParameterSet,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub ablation: Ablation,
    pub classes: Vec<String>,
    /// (global step, batch loss) pairs in training order.
    pub loss_log: Vec<(usize, f64)>,
    /// Dataset indices of the training shots, grouped by class.
    pub shot_indices: Vec<usize>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Frozen-side state for scoring images one at a time. Text embeddings are
/// computed once, in inference mode, so repeated queries only pay for the
/// two image forward passes.
pub struct InferenceContext<'a> {
    image_weights: &'a FrozenImageWeights,
    visual: Vec<Tensor>,
    exp_s: f64,
    class_text: Vec<Tensor>,
    prototypes: Vec<Tensor>,
}

impl<'a> InferenceContext<'a> {
    pub fn new(model: &'a TrainedModel, bundle: &KnowledgeBundle) -> Result<Self> {
        Self::from_parts(
            &model.text_weights,
            &model.image_weights,
            &model.params,
            &model.vocab,
            bundle,
            &model.classes,
            model.ablation,
        )
    }

    pub fn from_parts(
        text_weights: &FrozenTextWeights,
        image_weights: &'a FrozenImageWeights,
        params: &ParameterSet,
        vocab: &Vocabulary,
        bundle: &KnowledgeBundle,
        classes: &[String],
        ablation: Ablation,
    ) -> Result<Self> {
        let cache = FrozenTextCache::build(bundle, classes, vocab, text_weights)?;
        let n_global = params
            .get("hpt.global.l0")
            .map(|t| t.shape()[0])
            .unwrap_or(0);

        let mut tape = Tape::new();
        let values = register_hierarchy_params(
            &mut tape,
            params,
            text_weights.config.n_layers,
            n_global,
        )?;
        let mut class_text = Vec::with_capacity(classes.len());
        for (k, name) in classes.iter().enumerate() {
            let entry = bundle
                .categories
                .iter()
                .find(|c| &c.class_name == name)
                .expect("cache construction already checked membership");
            let inputs = ClassTextInputs {
                weights: text_weights,
                vocab,
                entry,
                traces: &cache.traces[k],
                values: &values,
                ablation,
            };
            let z = class_text_embedding(&mut tape, &inputs, TextMode::Inference)?;
            class_text.push(tape.to_tensor(z));
        }

        let mut visual = Vec::with_capacity(image_weights.config.n_layers);
        for l in 0..image_weights.config.n_layers {
            let name = visual_prompt_name(l);
            let t = params.get(&name).ok_or_else(|| {
                Error::Consistency(format!("parameter {name:?} missing from set"))
            })?;
            visual.push(t.clone());
        }
        let temp = params
            .get(TEMPERATURE_NAME)
            .ok_or_else(|| Error::Consistency("temperature parameter missing from set".into()))?;
        Ok(InferenceContext {
            image_weights,
            visual,
            exp_s: temp.data()[0].exp(),
            class_text,
            prototypes: cache.prototypes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_text.len()
    }

    /// Score one image through both paths.
    pub fn outputs(&self, image: &Tensor) -> Result<DualPathOutputs> {
        let mut tape = Tape::new();
        let prompt_vals: Vec<Value> = self.visual.iter().map(|t| tape.constant(t)).collect();
        let prompted = encode_image(&mut tape, image, self.image_weights, Some(&prompt_vals))?;
        let prompted = tape.to_tensor(prompted);
        let frozen = encode_image_frozen(image, self.image_weights)?;

        let score = |z: &Tensor, refs: &[Tensor]| -> Vec<f64> {
            refs.iter()
                .map(|r| {
                    self.exp_s
                        * z.data()
                            .iter()
                            .zip(r.data())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect()
        };
        let p_i = softmax(&score(&prompted, &self.prototypes));
        let p_t = softmax(&score(&frozen, &self.class_text));
        let p_o: Vec<f64> = p_i.iter().zip(&p_t).map(|(a, b)| 0.5 * (a + b)).collect();
        Ok(DualPathOutputs { p_i, p_t, p_o })
    }

    /// Class tokens are not needed by callers, but exposing the text
    /// embeddings makes oracle tests against the ensemble cheap.
    pub fn class_text(&self) -> &[Tensor] {
        &self.class_text
    }

    pub fn prototypes(&self) -> &[Tensor] {
        &self.prototypes
    }
}
