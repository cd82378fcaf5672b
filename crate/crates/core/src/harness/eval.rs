//! Accuracy evaluation and the two protocols built on it.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{ImageDataset, KnowledgeBundle};
use crate::dualpath::{train, InferenceContext, TrainConfig, TrainedModel};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::report::{ConfigSnapshot, Metrics, Report};
use crate::harness::{base_new_split, harmonic_mean};
use crate::hierarchy::Ablation;

/// Fraction of images whose averaged-distribution argmax matches the label.
///
/// Scores every image of `classes` in the dataset except the indices in
/// `exclude` (a training-shot list, typically). Text embeddings come from
/// `bundle`, which does not have to be the bundle the model was trained on:
/// the learned prompts are class-agnostic, so handing a different bundle to
/// the same parameters is exactly how zero-shot transfer works.
pub fn evaluate(
    model: &TrainedModel,
    bundle: &KnowledgeBundle,
    dataset: &ImageDataset,
    classes: &[String],
    exclude: &[usize],
) -> Result<f64> {
    let ctx = InferenceContext::from_parts(
        &model.text_weights,
        &model.image_weights,
        &model.params,
        &model.vocab,
        bundle,
        classes,
        model.ablation,
    )?;
    let mut label_to_position: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, name) in classes.iter().enumerate() {
        let label = dataset
            .class_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("class {name:?} not found in the dataset")))?;
        label_to_position.insert(label, k);
    }
    let excluded: HashSet<usize> = exclude.iter().copied().collect();

    let mut scored = 0usize;
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let Some(&k) = label_to_position.get(&dataset.label(i)) else {
            continue;
        };
        if excluded.contains(&i) {
            continue;
        }
        scored += 1;
        if ctx.outputs(dataset.image(i))?.predicted() == k {
            correct += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Argument(
            "no images left to evaluate after exclusions".into(),
        ));
    }
    Ok(correct as f64 / scored as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    BaseToNew,
    CrossDataset,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::BaseToNew => "base-to-new",
            Protocol::CrossDataset => "cross-dataset",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-to-new" => Ok(Protocol::BaseToNew),
            "cross-dataset" => Ok(Protocol::CrossDataset),
            other => Err(Error::Argument(format!(
                "unknown protocol {other:?}, expected base-to-new or cross-dataset"
            ))),
        }
    }
}

fn snapshot(model: &TrainedModel) -> ConfigSnapshot {
    ConfigSnapshot {
        train: model.config.clone(),
        text: model.text_weights.config,
        image: model.image_weights.config,
        ablation: model.ablation,
        classes: model.classes.clone(),
    }
}

/// Build a base-to-new report for an already trained model. The split is
/// recomputed from the bundle, so the model must have been trained on
/// exactly the base half.
pub fn base_to_new_report(
    model: &TrainedModel,
    dataset: &ImageDataset,
    bundle: &KnowledgeBundle,
) -> Result<Report> {
    let start = Instant::now();
    let all: Vec<String> = bundle
        .categories
        .iter()
        .map(|c| c.class_name.clone())
        .collect();
    let split = base_new_split(&all)?;
    if model.classes != split.base_classes() {
        return Err(Error::Config(format!(
            "model was trained on {:?}, not this bundle's base split {:?}",
            model.classes,
            split.base_classes()
        )));
    }
    let base = evaluate(model, bundle, dataset, split.base_classes(), &model.shot_indices)?;
    let new = evaluate(model, bundle, dataset, split.new_classes(), &[])?;
    let hm = harmonic_mean(base, new)?;
    let report = Report {
        protocol: Protocol::BaseToNew.as_str().into(),
        seed: model.config.seed,
        metrics: Metrics::BaseNew { base, new, hm },
        config: snapshot(model),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    report.validate()?;
    Ok(report)
}

/// Train on the bundle's base classes, then report base/new/H.
pub fn run_base_to_new(
    config: &TrainConfig,
    text_cfg: &EncoderConfig,
    image_cfg: &EncoderConfig,
    dataset: &ImageDataset,
    bundle: &KnowledgeBundle,
    ablation: Ablation,
) -> Result<(Report, TrainedModel)> {
    let start = Instant::now();
    let all: Vec<String> = bundle
        .categories
        .iter()
        .map(|c| c.class_name.clone())
        .collect();
    let split = base_new_split(&all)?;
    let model = train(
        config,
        text_cfg,
        image_cfg,
        dataset,
        bundle,
        split.base_classes(),
        ablation,
    )?;
    let mut report = base_to_new_report(&model, dataset, bundle)?;
    report.runtime_s = start.elapsed().as_secs_f64();
    Ok((report, model))
}

/// Zero-shot transfer report: each target is scored on all of its own
/// classes, with text embeddings built from its own bundle.
pub fn cross_dataset_report(
    model: &TrainedModel,
    targets: &[(String, &ImageDataset, &KnowledgeBundle)],
) -> Result<Report> {
    let start = Instant::now();
    if targets.is_empty() {
        return Err(Error::Config("cross-dataset needs at least one target".into()));
    }
    let mut accuracies = BTreeMap::new();
    for (name, dataset, bundle) in targets {
        if dataset.image_side() != model.image_weights.image_side() {
            return Err(Error::Config(format!(
                "target {name:?} has {}px images, the model expects {}px",
                dataset.image_side(),
                model.image_weights.image_side()
            )));
        }
        let classes: Vec<String> = bundle
            .categories
            .iter()
            .map(|c| c.class_name.clone())
            .collect();
        let acc = evaluate(model, bundle, dataset, &classes, &[])?;
        if accuracies.insert(name.clone(), acc).is_some() {
            return Err(Error::Config(format!("duplicate target name {name:?}")));
        }
    }
    let mean = accuracies.values().sum::<f64>() / accuracies.len() as f64;
    let report = Report {
        protocol: Protocol::CrossDataset.as_str().into(),
        seed: model.config.seed,
        metrics: Metrics::Transfer {
            targets: accuracies,
            mean,
        },
        config: snapshot(model),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    report.validate()?;
    Ok(report)
}

/// Train on every class of the source corpus, then score the targets.
pub fn run_cross_dataset(
    config: &TrainConfig,
    text_cfg: &EncoderConfig,
    image_cfg: &EncoderConfig,
    dataset: &ImageDataset,
    bundle: &KnowledgeBundle,
    targets: &[(String, &ImageDataset, &KnowledgeBundle)],
    ablation: Ablation,
) -> Result<(Report, TrainedModel)> {
    let start = Instant::now();
    let all: Vec<String> = bundle
        .categories
        .iter()
        .map(|c| c.class_name.clone())
        .collect();
    let model = train(config, text_cfg, image_cfg, dataset, bundle, &all, ablation)?;
    let mut report = cross_dataset_report(&model, targets)?;
    report.runtime_s = start.elapsed().as_secs_f64();
    Ok((report, model))
}

/// Everything a protocol run needs.
pub struct ProtocolInputs<'a> {
    pub config: &'a TrainConfig,
    pub text: &'a EncoderConfig,
    pub image: &'a EncoderConfig,
    pub dataset: &'a ImageDataset,
    pub bundle: &'a KnowledgeBundle,
    pub targets: &'a [(String, &'a ImageDataset, &'a KnowledgeBundle)],
    pub ablation: Ablation,
}

/// Dispatch one full protocol run: train, evaluate, report.
pub fn run_protocol(
    protocol: Protocol,
    inputs: &ProtocolInputs,
) -> Result<(Report, TrainedModel)> {
    match protocol {
        Protocol::BaseToNew => {
            if !inputs.targets.is_empty() {
                return Err(Error::Config(
                    "base-to-new takes no target corpora".into(),
                ));
            }
            run_base_to_new(
                inputs.config,
                inputs.text,
                inputs.image,
                inputs.dataset,
                inputs.bundle,
                inputs.ablation,
            )
        }
        Protocol::CrossDataset => run_cross_dataset(
            inputs.config,
            inputs.text,
            inputs.image,
            inputs.dataset,
            inputs.bundle,
            inputs.targets,
            inputs.ablation,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusSpec};

    fn corpus(n_classes: usize, seed: u64) -> (ImageDataset, KnowledgeBundle) {
        let spec = CorpusSpec {
            n_classes,
            n_images_per_class: 3,
            image_side: 8,
            n_entities: 2,
            n_attributes: 2,
        };
        generate_synthetic_corpus(&spec, seed).unwrap()
    }

    fn tiny_model(
        dataset: &ImageDataset,
        bundle: &KnowledgeBundle,
        classes: &[String],
        seed: u64,
    ) -> TrainedModel {
        let mut config = TrainConfig::micro(seed);
        config.epochs = 2;
        train(
            &config,
            &EncoderConfig::micro_text(),
            &EncoderConfig::micro_image(),
            dataset,
            bundle,
            classes,
            Ablation::default(),
        )
        .unwrap()
    }

    fn all_classes(bundle: &KnowledgeBundle) -> Vec<String> {
        bundle
            .categories
            .iter()
            .map(|c| c.class_name.clone())
            .collect()
    }

    #[test]
    fn accuracy_matches_a_hand_count() {
        let (dataset, bundle) = corpus(2, 31);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 1);
        let acc = evaluate(&model, &bundle, &dataset, &classes, &[]).unwrap();

        let ctx = InferenceContext::new(&model, &bundle).unwrap();
        let mut correct = 0usize;
        for i in 0..dataset.len() {
            if ctx.outputs(dataset.image(i)).unwrap().predicted() == dataset.label(i) {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / dataset.len() as f64);
    }

    #[test]
    fn unknown_class_is_a_config_error() {
        let (dataset, bundle) = corpus(2, 32);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 2);
        let bogus = vec!["phantom".to_string()];
        assert!(matches!(
            evaluate(&model, &bundle, &dataset, &bogus, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn accuracy_is_order_independent() {
        let (dataset, bundle) = corpus(2, 33);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 3);
        let forward = evaluate(&model, &bundle, &dataset, &classes, &[]).unwrap();

        let n = dataset.len();
        let images: Vec<_> = (0..n).rev().map(|i| dataset.image(i).clone()).collect();
        let labels: Vec<_> = (0..n).rev().map(|i| dataset.label(i)).collect();
        let reversed = ImageDataset::new(
            dataset.image_side(),
            images,
            labels,
            dataset.class_names().to_vec(),
        )
        .unwrap();
        let backward = evaluate(&model, &bundle, &reversed, &classes, &[]).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn exclusions_shrink_the_eval_set() {
        let (dataset, bundle) = corpus(2, 34);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 4);
        let everything: Vec<usize> = (0..dataset.len()).collect();
        assert!(matches!(
            evaluate(&model, &bundle, &dataset, &classes, &everything),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn base_to_new_reports_are_internally_consistent() {
        let (dataset, bundle) = corpus(4, 35);
        let config = TrainConfig::micro(6);
        let (report, model) = run_base_to_new(
            &config,
            &EncoderConfig::micro_text(),
            &EncoderConfig::micro_image(),
            &dataset,
            &bundle,
            Ablation::default(),
        )
        .unwrap();
        report.validate().unwrap();
        assert_eq!(report.protocol, "base-to-new");
        let Metrics::BaseNew { base, new, hm } = &report.metrics else {
            panic!("wrong metrics shape");
        };
        assert_eq!(*hm, harmonic_mean(*base, *new).unwrap());
        assert_eq!(model.classes.len(), 2);

        let again = base_to_new_report(&model, &dataset, &bundle).unwrap();
        assert_eq!(
            again.canonical_bytes().unwrap(),
            report.canonical_bytes().unwrap()
        );
    }

    #[test]
    fn base_training_never_reads_new_class_images() {
        let (dataset, bundle) = corpus(4, 36);
        let all = all_classes(&bundle);
        let split = base_new_split(&all).unwrap();
        dataset.reset_access_counts();
        let _model = tiny_model(&dataset, &bundle, split.base_classes(), 7);
        let counts = dataset.access_counts();
        for k in split.new_indices() {
            let name = &all[k];
            let label = dataset.class_names().iter().position(|n| n == name).unwrap();
            for i in dataset.indices_of_class(label) {
                assert_eq!(counts[i], 0, "new-class image {i} was read in training");
            }
        }
    }

    #[test]
    fn report_rejects_a_model_from_another_split() {
        let (dataset, bundle) = corpus(4, 37);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 8);
        assert!(matches!(
            base_to_new_report(&model, &dataset, &bundle),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_transfer_equals_plain_evaluation() {
        let (dataset, bundle) = corpus(2, 38);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 9);
        let plain = evaluate(&model, &bundle, &dataset, &classes, &[]).unwrap();
        let report =
            cross_dataset_report(&model, &[("source".into(), &dataset, &bundle)]).unwrap();
        let Metrics::Transfer { targets, mean } = &report.metrics else {
            panic!("wrong metrics shape");
        };
        assert_eq!(targets["source"], plain);
        assert_eq!(*mean, plain);
    }

    #[test]
    fn transfer_to_a_disjoint_corpus_runs() {
        let (dataset, bundle) = corpus(2, 39);
        let classes = all_classes(&bundle);
        let model = tiny_model(&dataset, &bundle, &classes, 10);
        // A different seed rotates the texture/tint factors, giving a
        // target corpus with different class names.
        let (target_data, target_bundle) = corpus(2, 57);
        assert_ne!(all_classes(&target_bundle), classes);
        let report = cross_dataset_report(
            &model,
            &[
                ("self".into(), &dataset, &bundle),
                ("other".into(), &target_data, &target_bundle),
            ],
        )
        .unwrap();
        report.validate().unwrap();
        let Metrics::Transfer { targets, .. } = &report.metrics else {
            panic!("wrong metrics shape");
        };
        assert_eq!(targets.len(), 2);
    }

    #[test]
    fn protocol_names_parse_and_print() {
        assert_eq!(Protocol::from_str("base-to-new").unwrap(), Protocol::BaseToNew);
        assert_eq!(
            Protocol::from_str("cross-dataset").unwrap(),
            Protocol::CrossDataset
        );
        assert!(Protocol::from_str("sideways").is_err());
        assert_eq!(Protocol::BaseToNew.as_str(), "base-to-new");
    }

    #[test]
    fn protocol_dispatch_checks_its_inputs() {
        let (dataset, bundle) = corpus(4, 41);
        let config = TrainConfig::micro(11);
        let text = EncoderConfig::micro_text();
        let image = EncoderConfig::micro_image();
        let (target_data, target_bundle) = corpus(2, 42);
        let targets = [("t".to_string(), &target_data, &target_bundle)];
        let inputs = ProtocolInputs {
            config: &config,
            text: &text,
            image: &image,
            dataset: &dataset,
            bundle: &bundle,
            targets: &targets,
            ablation: Ablation::default(),
        };
        assert!(matches!(
            run_protocol(Protocol::BaseToNew, &inputs),
            Err(Error::Config(_))
        ));

        let no_targets = ProtocolInputs {
            targets: &[],
            ..inputs
        };
        let (report, _) = run_protocol(Protocol::BaseToNew, &no_targets).unwrap();
        assert_eq!(report.protocol, "base-to-new");
    }
}
