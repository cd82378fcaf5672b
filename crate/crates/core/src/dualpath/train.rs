//! The training loop: per-step tape construction, the dual-path loss, and a
//! finite-difference check over the whole model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    generate_synthetic_corpus, CategoryEntry, CorpusSpec, ImageDataset, KnowledgeBundle,
    Vocabulary,
};
use crate::dualpath::model::{
    init_trainable_params, register_model_params, FrozenTextCache, InferenceContext, TrainedModel,
};
use crate::dualpath::TrainConfig;
use crate::encoder::{
    encode_image, encode_image_frozen, EncoderConfig, FrozenImageWeights, FrozenTextWeights,
};
use crate::error::{Error, Result};
use crate::hierarchy::{class_text_embedding, Ablation, ClassTextInputs, TextMode};
use crate::numerics::{
    grad_check, sgd_step, GradCheckResult, ParameterSet, Tape, Tensor, Value,
};

/// Epoch interval between early-stop accuracy checks.
const EARLY_STOP_INTERVAL: usize = 5;

/// The three on-tape probability vectors for one image.
#[derive(Debug, Clone, Copy)]
pub struct DualPathValues {
    pub p_i: Value,
    pub p_t: Value,
    pub p_o: Value,
}

/// Score one image against every class through both paths.
///
/// The image path pairs the prompted image embedding with the frozen text
/// prototypes; the text path pairs the frozen image embedding with the
/// hierarchical text embeddings. Both sets of cosine scores are scaled by
/// `exp_s` before the softmax, and the output distribution is exactly the
/// mean of the two.
pub fn dual_logits(
    tape: &mut Tape,
    prompted_image: Value,
    frozen_image: Value,
    class_text: &[Value],
    prototypes: &[Value],
    exp_s: Value,
) -> Result<DualPathValues> {
    if class_text.is_empty() {
        return Err(Error::Argument("no classes to score".into()));
    }
    if prototypes.len() != class_text.len() {
        return Err(Error::Arity(format!(
            "{} prototypes for {} classes",
            prototypes.len(),
            class_text.len()
        )));
    }
    let shape = tape.shape(prompted_image).to_vec();
    if shape.len() != 1 || tape.shape(frozen_image) != shape {
        return Err(Error::Dimension(format!(
            "image embeddings must be matching vectors, got {:?} and {:?}",
            shape,
            tape.shape(frozen_image)
        )));
    }
    let d = shape[0];
    let c = class_text.len();

    let proto_mat = tape.stack_rows(prototypes)?;
    let text_mat = tape.stack_rows(class_text)?;
    let prompted_col = tape.reshape(prompted_image, vec![d, 1])?;
    let frozen_col = tape.reshape(frozen_image, vec![d, 1])?;

    let scores_i = tape.matmul(proto_mat, prompted_col)?;
    let scores_t = tape.matmul(text_mat, frozen_col)?;
    let scores_i = tape.reshape(scores_i, vec![c])?;
    let scores_t = tape.reshape(scores_t, vec![c])?;
    let scaled_i = tape.scalar_mul(exp_s, scores_i)?;
    let scaled_t = tape.scalar_mul(exp_s, scores_t)?;

    let p_i = tape.softmax_vec(scaled_i)?;
    let p_t = tape.softmax_vec(scaled_t)?;
    let summed = tape.add(p_i, p_t)?;
    let p_o = tape.scale(summed, 0.5);
    Ok(DualPathValues { p_i, p_t, p_o })
}

/// Sum of the three cross-entropies against one label.
pub fn hpt_loss(tape: &mut Tape, paths: &DualPathValues, label: usize) -> Result<Value> {
    let li = tape.cross_entropy(paths.p_i, label)?;
    let lt = tape.cross_entropy(paths.p_t, label)?;
    let lo = tape.cross_entropy(paths.p_o, label)?;
    let partial = tape.add(li, lt)?;
    tape.add(partial, lo)
}

struct StepInputs<'a> {
    config: &'a TrainConfig,
    text_weights: &'a FrozenTextWeights,
    image_weights: &'a FrozenImageWeights,
    vocab: &'a Vocabulary,
    entries: &'a [&'a CategoryEntry],
    cache: &'a FrozenTextCache,
    shot_images: &'a [Tensor],
    frozen_image: &'a [Tensor],
    labels: &'a [usize],
    ablation: Ablation,
}

/// One optimizer step over a batch of shot indices. Returns the batch loss.
fn run_step(
    params: &mut ParameterSet,
    s: &StepInputs,
    batch: &[usize],
    record_choice: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let values = register_model_params(
        &mut tape,
        params,
        s.text_weights.config.n_layers,
        s.image_weights.config.n_layers,
        s.config.n_global,
    )?;
    let exp_s = tape.exp(values.temperature);

    let mut text_z = Vec::with_capacity(s.entries.len());
    for (k, entry) in s.entries.iter().enumerate() {
        let inputs = ClassTextInputs {
            weights: s.text_weights,
            vocab: s.vocab,
            entry,
            traces: &s.cache.traces[k],
            values: &values.hierarchy,
            ablation: s.ablation,
        };
        let mode = TextMode::Train {
            record_index: record_choice[k],
        };
        text_z.push(class_text_embedding(&mut tape, &inputs, mode)?);
    }
    let prototypes: Vec<Value> = s.cache.prototypes.iter().map(|t| tape.constant(t)).collect();

    let mut total: Option<Value> = None;
    for &i in batch {
        let prompted = encode_image(&mut tape, &s.shot_images[i], s.image_weights, Some(&values.visual))?;
        let frozen = tape.constant(&s.frozen_image[i]);
        let paths = dual_logits(&mut tape, prompted, frozen, &text_z, &prototypes, exp_s)?;
        let loss = hpt_loss(&mut tape, &paths, s.labels[i])?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Argument("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let loss_value = tape.value(mean)[0];

    tape.backward(mean)?;
    tape.write_grads(params)?;
    sgd_step(params, s.config.lr)?;
    Ok(loss_value)
}

fn train_accuracy(ctx: &InferenceContext, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (img, &y) in images.iter().zip(labels) {
        if ctx.outputs(img)?.predicted() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Train a model on the named classes.
///
/// Shot selection touches only the label table; the chosen images are read
/// from the dataset exactly once each and every later epoch works from those
/// copies, so images of classes outside `classes` are never read at all.
pub fn train(
    config: &TrainConfig,
    text_cfg: &EncoderConfig,
    image_cfg: &EncoderConfig,
    dataset: &ImageDataset,
    bundle: &KnowledgeBundle,
    classes: &[String],
    ablation: Ablation,
) -> Result<TrainedModel> {
    config.validate_for(bundle)?;
    text_cfg.validate()?;
    image_cfg.validate()?;
    bundle.validate()?;
    if classes.is_empty() {
        return Err(Error::Argument("no classes to train on".into()));
    }
    let ablation = ablation.normalized();

    // One subseed per consumer, drawn in a fixed order, so adding a consumer
    // later cannot shift the ones before it.
    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let text_seed = root.gen::<u64>();
    let image_seed = root.gen::<u64>();
    let init_seed = root.gen::<u64>();
    let shot_seed = root.gen::<u64>();
    let sched_seed = root.gen::<u64>();

    let vocab = Vocabulary::from_bundle(bundle)?;
    let text_weights = FrozenTextWeights::new(*text_cfg, vocab.len(), text_seed)?;
    let image_weights = FrozenImageWeights::new(*image_cfg, dataset.image_side(), image_seed)?;

    let mut params = ParameterSet::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
    init_trainable_params(&mut params, text_cfg, image_cfg, config.n_global, &mut init_rng)?;

    let mut shot_rng = ChaCha8Rng::seed_from_u64(shot_seed);
    let mut shot_indices = Vec::with_capacity(classes.len() * config.shots);
    let mut labels = Vec::with_capacity(classes.len() * config.shots);
    for (k, name) in classes.iter().enumerate() {
        let dataset_label = dataset
            .class_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("class {name:?} not found in the dataset")))?;
        let pool = dataset.indices_of_class(dataset_label);
        if pool.len() < config.shots {
            return Err(Error::Config(format!(
                "class {name:?} has {} images, fewer than the {} shots requested",
                pool.len(),
                config.shots
            )));
        }
        let mut chosen: Vec<usize> = pool
            .choose_multiple(&mut shot_rng, config.shots)
            .copied()
            .collect();
        chosen.sort_unstable();
        shot_indices.extend(chosen);
        labels.extend(std::iter::repeat(k).take(config.shots));
    }
    let shot_images: Vec<Tensor> = shot_indices
        .iter()
        .map(|&i| dataset.image(i).clone())
        .collect();

    let cache = FrozenTextCache::build(bundle, classes, &vocab, &text_weights)?;
    let entries: Vec<&CategoryEntry> = classes
        .iter()
        .map(|name| {
            bundle
                .categories
                .iter()
                .find(|c| &c.class_name == name)
                .expect("cache construction already checked membership")
        })
        .collect();
    let frozen_image: Vec<Tensor> = shot_images
        .iter()
        .map(|img| encode_image_frozen(img, &image_weights))
        .collect::<Result<_>>()?;

    let step_inputs = StepInputs {
        config,
        text_weights: &text_weights,
        image_weights: &image_weights,
        vocab: &vocab,
        entries: &entries,
        cache: &cache,
        shot_images: &shot_images,
        frozen_image: &frozen_image,
        labels: &labels,
        ablation,
    };

    let mut sched_rng = ChaCha8Rng::seed_from_u64(sched_seed);
    let n_train = shot_images.len();
    let mut loss_log = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut sched_rng);
        for batch in order.chunks(config.batch_size) {
            let record_choice: Vec<usize> = (0..classes.len())
                .map(|_| sched_rng.gen_range(0..bundle.n_descriptions))
                .collect();
            let loss = run_step(&mut params, &step_inputs, batch, &record_choice)?;
            loss_log.push((step, loss));
            step += 1;
        }
        if let Some(threshold) = config.early_stop_accuracy {
            if (epoch + 1) % EARLY_STOP_INTERVAL == 0 {
                let ctx = InferenceContext::from_parts(
                    &text_weights,
                    &image_weights,
                    &params,
                    &vocab,
                    bundle,
                    classes,
                    ablation,
                )?;
                if train_accuracy(&ctx, &shot_images, &labels)? >= threshold {
                    break 'epochs;
                }
            }
        }
    }

    Ok(TrainedModel {
        text_weights,
        image_weights,
        params,
        vocab,
        config: config.clone(),
        ablation,
        classes: classes.to_vec(),
        loss_log,
        shot_indices,
    })
}

/// Finite-difference check of the full dual-path loss on a micro model.
/// Every trainable parameter is exercised: global prompts, bias scalars,
/// the high-prompt generator, visual prompts, and the temperature.
pub fn micro_model_grad_check(seed: u64) -> Result<GradCheckResult> {
    let spec = CorpusSpec {
        n_classes: 2,
        n_images_per_class: 2,
        image_side: 8,
        n_entities: 2,
        n_attributes: 2,
    };
    let (dataset, bundle) = generate_synthetic_corpus(&spec, seed)?;
    let vocab = Vocabulary::from_bundle(&bundle)?;
    let text_cfg = EncoderConfig::micro_text();
    let image_cfg = EncoderConfig::micro_image();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let text_weights = FrozenTextWeights::new(text_cfg, vocab.len(), rng.gen())?;
    let image_weights = FrozenImageWeights::new(image_cfg, dataset.image_side(), rng.gen())?;
    let mut params = ParameterSet::new();
    init_trainable_params(&mut params, &text_cfg, &image_cfg, 1, &mut rng)?;

    let classes: Vec<String> = bundle
        .categories
        .iter()
        .map(|c| c.class_name.clone())
        .collect();
    let cache = FrozenTextCache::build(&bundle, &classes, &vocab, &text_weights)?;
    let entries: Vec<&CategoryEntry> = bundle.categories.iter().collect();
    let images = [dataset.image(0).clone(), dataset.image(2).clone()];
    let labels = [0usize, 1usize];
    let frozen: Vec<Tensor> = images
        .iter()
        .map(|img| encode_image_frozen(img, &image_weights))
        .collect::<Result<_>>()?;

    grad_check(&mut params, 1e-5, |tape, set| {
        let values = register_model_params(tape, set, text_cfg.n_layers, image_cfg.n_layers, 1)?;
        let exp_s = tape.exp(values.temperature);
        let mut text_z = Vec::with_capacity(entries.len());
        for (k, entry) in entries.iter().enumerate() {
            let inputs = ClassTextInputs {
                weights: &text_weights,
                vocab: &vocab,
                entry,
                traces: &cache.traces[k],
                values: &values.hierarchy,
                ablation: Ablation::default(),
            };
            let mode = TextMode::Train { record_index: k };
            text_z.push(class_text_embedding(tape, &inputs, mode)?);
        }
        let prototypes: Vec<Value> = cache.prototypes.iter().map(|t| tape.constant(t)).collect();
        let mut total: Option<Value> = None;
        for (img, (frz, &label)) in images.iter().zip(frozen.iter().zip(&labels)) {
            let prompted = encode_image(tape, img, &image_weights, Some(&values.visual))?;
            let frozen_val = tape.constant(frz);
            let paths = dual_logits(tape, prompted, frozen_val, &text_z, &prototypes, exp_s)?;
            let loss = hpt_loss(tape, &paths, label)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        Ok(tape.scale(total.expect("two images"), 0.5))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LOG_EPS;

    fn micro_corpus(seed: u64) -> (ImageDataset, KnowledgeBundle) {
        let spec = CorpusSpec {
            n_classes: 2,
            n_images_per_class: 4,
            image_side: 8,
            n_entities: 2,
            n_attributes: 2,
        };
        generate_synthetic_corpus(&spec, seed).unwrap()
    }

    fn all_classes(bundle: &KnowledgeBundle) -> Vec<String> {
        bundle
            .categories
            .iter()
            .map(|c| c.class_name.clone())
            .collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    #[test]
    fn logits_match_a_scalar_oracle() {
        let mut tape = Tape::new();
        let zi = Tensor::new(vec![3], vec![0.2, -0.4, 0.9]).unwrap();
        let zf = Tensor::new(vec![3], vec![-0.1, 0.3, 0.5]).unwrap();
        let t0 = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let t1 = Tensor::new(vec![3], vec![0.0, 1.0, -0.2]).unwrap();
        let q0 = Tensor::new(vec![3], vec![0.5, 0.5, 0.0]).unwrap();
        let q1 = Tensor::new(vec![3], vec![-0.3, 0.2, 0.8]).unwrap();

        let prompted = tape.constant(&zi);
        let frozen = tape.constant(&zf);
        let text = [tape.constant(&t0), tape.constant(&t1)];
        let protos = [tape.constant(&q0), tape.constant(&q1)];
        let s = Tensor::new(vec![1], vec![1.7]).unwrap();
        let exp_s = tape.constant(&s);
        let paths = dual_logits(&mut tape, prompted, frozen, &text, &protos, exp_s).unwrap();

        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let want_i = softmax(&[1.7 * dot(&zi, &q0), 1.7 * dot(&zi, &q1)]);
        let want_t = softmax(&[1.7 * dot(&zf, &t0), 1.7 * dot(&zf, &t1)]);
        let got_i = tape.value(paths.p_i).to_vec();
        let got_t = tape.value(paths.p_t).to_vec();
        let got_o = tape.value(paths.p_o).to_vec();
        for k in 0..2 {
            assert!((got_i[k] - want_i[k]).abs() <= 1e-12);
            assert!((got_t[k] - want_t[k]).abs() <= 1e-12);
            assert_eq!(got_o[k], 0.5 * (got_i[k] + got_t[k]));
        }
    }

    #[test]
    fn identical_prototypes_score_uniformly() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![2], vec![0.6, -0.8]).unwrap();
        let proto = Tensor::new(vec![2], vec![0.3, 0.4]).unwrap();
        let text = Tensor::new(vec![2], vec![0.1, 0.9]).unwrap();

        let prompted = tape.constant(&z);
        let frozen = tape.constant(&z);
        let protos = [tape.constant(&proto), tape.constant(&proto)];
        let texts = [tape.constant(&text), tape.constant(&text)];
        let s = Tensor::new(vec![1], vec![2.0]).unwrap();
        let exp_s = tape.constant(&s);
        let paths = dual_logits(&mut tape, prompted, frozen, &texts, &protos, exp_s).unwrap();
        assert_eq!(tape.value(paths.p_i), &[0.5, 0.5]);
        assert_eq!(tape.value(paths.p_t), &[0.5, 0.5]);
        assert_eq!(tape.value(paths.p_o), &[0.5, 0.5]);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![2], vec![0.6, -0.8]).unwrap();
        let prompted = tape.constant(&z);
        let frozen = tape.constant(&z);
        let s = Tensor::new(vec![1], vec![1.0]).unwrap();
        let exp_s = tape.constant(&s);
        let err = dual_logits(&mut tape, prompted, frozen, &[], &[], exp_s).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));

        let t = tape.constant(&z);
        let err = dual_logits(&mut tape, prompted, frozen, &[t], &[t, t], exp_s).unwrap_err();
        assert!(matches!(err, Error::Arity(_)));

        let wide = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let wide = tape.constant(&wide);
        let err = dual_logits(&mut tape, prompted, wide, &[t], &[t], exp_s).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn loss_matches_its_own_probabilities() {
        let mut tape = Tape::new();
        let zi = Tensor::new(vec![2], vec![0.9, -0.2]).unwrap();
        let zf = Tensor::new(vec![2], vec![-0.5, 0.4]).unwrap();
        let t0 = Tensor::new(vec![2], vec![0.8, 0.1]).unwrap();
        let t1 = Tensor::new(vec![2], vec![-0.4, 0.7]).unwrap();

        let prompted = tape.constant(&zi);
        let frozen = tape.constant(&zf);
        let texts = [tape.constant(&t0), tape.constant(&t1)];
        let protos = [tape.constant(&t1), tape.constant(&t0)];
        let s = Tensor::new(vec![1], vec![3.1]).unwrap();
        let exp_s = tape.constant(&s);
        let paths = dual_logits(&mut tape, prompted, frozen, &texts, &protos, exp_s).unwrap();
        let loss = hpt_loss(&mut tape, &paths, 1).unwrap();

        let want = -(tape.value(paths.p_i)[1] + LOG_EPS).ln()
            - (tape.value(paths.p_t)[1] + LOG_EPS).ln()
            - (tape.value(paths.p_o)[1] + LOG_EPS).ln();
        assert!((tape.value(loss)[0] - want).abs() <= 1e-12);
    }

    #[test]
    fn uniform_paths_cost_three_log_c() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![2], vec![0.6, -0.8]).unwrap();
        let proto = Tensor::new(vec![2], vec![0.3, 0.4]).unwrap();
        let prompted = tape.constant(&z);
        let frozen = tape.constant(&z);
        let protos = [tape.constant(&proto), tape.constant(&proto)];
        let s = Tensor::new(vec![1], vec![1.0]).unwrap();
        let exp_s = tape.constant(&s);
        let paths = dual_logits(&mut tape, prompted, frozen, &protos, &protos, exp_s).unwrap();
        let loss = hpt_loss(&mut tape, &paths, 0).unwrap();
        assert!((tape.value(loss)[0] - 3.0 * 2.0f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn gradients_respect_the_frozen_paths() {
        let (dataset, bundle) = micro_corpus(9);
        let vocab = Vocabulary::from_bundle(&bundle).unwrap();
        let text_cfg = EncoderConfig::micro_text();
        let image_cfg = EncoderConfig::micro_image();
        let text_weights = FrozenTextWeights::new(text_cfg, vocab.len(), 31).unwrap();
        let image_weights =
            FrozenImageWeights::new(image_cfg, dataset.image_side(), 32).unwrap();
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        init_trainable_params(&mut params, &text_cfg, &image_cfg, 1, &mut rng).unwrap();
        let classes = all_classes(&bundle);
        let cache = FrozenTextCache::build(&bundle, &classes, &vocab, &text_weights).unwrap();

        // Builds the full step graph, then backpropagates from only one path.
        let run = |which: &str| -> ParameterSet {
            let mut p = params.clone();
            let mut tape = Tape::new();
            let values = register_model_params(&mut tape, &p, 2, 2, 1).unwrap();
            let exp_s = tape.exp(values.temperature);
            let mut text_z = Vec::new();
            for (k, entry) in bundle.categories.iter().enumerate() {
                let inputs = ClassTextInputs {
                    weights: &text_weights,
                    vocab: &vocab,
                    entry,
                    traces: &cache.traces[k],
                    values: &values.hierarchy,
                    ablation: Ablation::default(),
                };
                let mode = TextMode::Train { record_index: 0 };
                text_z.push(class_text_embedding(&mut tape, &inputs, mode).unwrap());
            }
            let protos: Vec<Value> =
                cache.prototypes.iter().map(|t| tape.constant(t)).collect();
            let img = dataset.image(0).clone();
            let prompted = encode_image(&mut tape, &img, &image_weights, Some(&values.visual)).unwrap();
            let frozen_t = encode_image_frozen(&img, &image_weights).unwrap();
            let frozen = tape.constant(&frozen_t);
            let paths = dual_logits(&mut tape, prompted, frozen, &text_z, &protos, exp_s).unwrap();
            let loss = match which {
                "image" => tape.cross_entropy(paths.p_i, 0).unwrap(),
                _ => tape.cross_entropy(paths.p_t, 0).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.write_grads(&mut p).unwrap();
            p
        };

        let zero = |set: &ParameterSet, name: &str| -> bool {
            set.get(name)
                .unwrap()
                .grad
                .as_ref()
                .unwrap()
                .iter()
                .all(|&g| g == 0.0)
        };

        let image_only = run("image");
        assert!(!zero(&image_only, "visual.prompt.l0"));
        assert!(!zero(&image_only, "temperature"));
        assert!(zero(&image_only, "hpt.generator.w"));
        assert!(zero(&image_only, "hpt.global.l0"));
        assert!(zero(&image_only, "hpt.lambda_e2a.l0"));

        let text_only = run("text");
        assert!(zero(&text_only, "visual.prompt.l0"));
        assert!(zero(&text_only, "visual.prompt.l1"));
        assert!(!zero(&text_only, "temperature"));
        assert!(!zero(&text_only, "hpt.generator.w"));
        assert!(!zero(&text_only, "hpt.global.l0"));
    }

    #[test]
    fn zero_rate_training_never_moves_parameters() {
        let (dataset, bundle) = micro_corpus(5);
        let classes = all_classes(&bundle);
        let mut config = TrainConfig::micro(40);
        config.lr = 0.0;
        config.epochs = 1;
        let short = train(
            &config,
            &EncoderConfig::micro_text(),
            &EncoderConfig::micro_image(),
            &dataset,
            &bundle,
            &classes,
            Ablation::default(),
        )
        .unwrap();
        config.epochs = 3;
        let long = train(
            &config,
            &EncoderConfig::micro_text(),
            &EncoderConfig::micro_image(),
            &dataset,
            &bundle,
            &classes,
            Ablation::default(),
        )
        .unwrap();
        for name in short.params.names() {
            assert_eq!(
                short.params.get(&name).unwrap().data(),
                long.params.get(&name).unwrap().data(),
                "{name} moved under a zero learning rate"
            );
        }
    }

    #[test]
    fn same_seed_reproduces_the_run_bit_for_bit() {
        let (dataset, bundle) = micro_corpus(6);
        let classes = all_classes(&bundle);
        let config = TrainConfig::micro(77);
        let text_cfg = EncoderConfig::micro_text();
        let image_cfg = EncoderConfig::micro_image();
        let a = train(&config, &text_cfg, &image_cfg, &dataset, &bundle, &classes, Ablation::default()).unwrap();
        let b = train(&config, &text_cfg, &image_cfg, &dataset, &bundle, &classes, Ablation::default()).unwrap();
        assert_eq!(a.shot_indices, b.shot_indices);
        assert_eq!(a.loss_log, b.loss_log);
        for name in a.params.names() {
            assert_eq!(
                a.params.get(&name).unwrap().data(),
                b.params.get(&name).unwrap().data()
            );
        }
    }

    #[test]
    fn loss_trends_down() {
        let (dataset, bundle) = micro_corpus(7);
        let classes = all_classes(&bundle);
        let mut config = TrainConfig::micro(13);
        config.epochs = 12;
        let model = train(
            &config,
            &EncoderConfig::micro_text(),
            &EncoderConfig::micro_image(),
            &dataset,
            &bundle,
            &classes,
            Ablation::default(),
        )
        .unwrap();
        let steps_per_epoch = model.loss_log.len() / config.epochs;
        let first: f64 = model.loss_log[..steps_per_epoch]
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / steps_per_epoch as f64;
        let last: f64 = model.loss_log[model.loss_log.len() - steps_per_epoch..]
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / steps_per_epoch as f64;
        assert!(
            last < first,
            "mean loss rose from {first} to {last} over {} epochs",
            config.epochs
        );
    }

    #[test]
    fn training_reads_each_shot_exactly_once() {
        let (dataset, bundle) = micro_corpus(8);
        let classes = all_classes(&bundle);
        let config = TrainConfig::micro(21);
        let model = train(
            &config,
            &EncoderConfig::micro_text(),
            &EncoderConfig::micro_image(),
            &dataset,
            &bundle,
            &classes,
            Ablation::default(),
        )
        .unwrap();
        let counts = dataset.access_counts();
        for (i, &c) in counts.iter().enumerate() {
            let expected = if model.shot_indices.contains(&i) { 1 } else { 0 };
            assert_eq!(c, expected, "image {i} read {c} times");
        }
    }

    #[test]
    fn micro_gradcheck_stays_within_tolerance() {
        let result = micro_model_grad_check(11).unwrap();
        assert!(
            result.max_rel_err <= 1e-4,
            "worst relative error {} at {:?}",
            result.max_rel_err,
            result.worst().map(|r| r.name.clone())
        );
    }
}
