//! Command-line front end for the prompt-tuning workspace. A run is
//! driven by an optional JSON config file plus flags, and flags always
//! win. Exit codes: 0 success, 2 usage, 3 validation or IO failure,
//! 4 numeric failure. Set HPT_LOG={error|info|debug} for diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use hpt_core::corpus::{
    generate_synthetic_corpus, load_corpus, parse_bundle, render_instructions, save_corpus,
    tokenize, CorpusSpec, ImageDataset, KnowledgeBundle, WordKind,
};
use hpt_core::dualpath::{
    load_checkpoint, micro_model_grad_check, save_checkpoint, train, TrainConfig, TrainedModel,
};
use hpt_core::encoder::{encode_text_str, EncoderConfig, LayerTrace};
use hpt_core::error::Error;
use hpt_core::harness::{
    base_new_split, base_to_new_report, cross_dataset_report, Protocol,
};
use hpt_core::hierarchy::{
    apply_ablation, assemble_low_prompts, generate_high_prompts, hierarchical_encode,
    register_hierarchy_params, Ablation, BiasMask, HierarchicalInput, SequenceLayout,
};
use hpt_core::numerics::primitive_grad_suite;

#[derive(Parser, Debug)]
#[command(name = "hpt", version, about = "Hierarchical prompt tuning on synthetic corpora")]
struct Cli {
    /// JSON config file; any flag given on the command line overrides it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic corpus and its knowledge bundle.
    GenCorpus {
        /// Seed for images, descriptions, and relation lists.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for manifest.json, images.bin, and bundle.json.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Print the description and extraction instructions for every class.
    EmitInstructions {
        /// Knowledge bundle supplying class names and the type phrase.
        #[arg(long, value_name = "PATH")]
        bundle: Option<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Train prompts on a corpus and write a checkpoint.
    Train {
        /// Corpus directory produced by gen-corpus.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Bundle file replacing the one stored with the corpus.
        #[arg(long, value_name = "PATH")]
        bundle: Option<PathBuf>,
        /// Checkpoint to write; a JSON sidecar lands next to it.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Seed for weights, shot selection, and batch order.
        #[arg(long)]
        seed: Option<u64>,
        /// Training images per class.
        #[arg(long)]
        shots: Option<usize>,
        /// Epoch cap.
        #[arg(long)]
        epochs: Option<usize>,
        /// SGD learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Ablation switch such as disable_low; repeat for several.
        #[arg(long = "ablate", value_name = "NAME")]
        ablate: Vec<String>,
    },

    /// Evaluate a checkpoint against a corpus and write a report.
    Eval {
        /// Checkpoint written by train.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Corpus directory to evaluate on.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Bundle file replacing the one stored with the corpus.
        #[arg(long, value_name = "PATH")]
        bundle: Option<PathBuf>,
        /// Report file; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Extra ablation switch applied on top of the stored ones.
        #[arg(long = "ablate", value_name = "NAME")]
        ablate: Vec<String>,
    },

    /// Run finite-difference checks over every primitive and the micro model.
    Gradcheck {
        /// Seed for the randomized check points.
        #[arg(long)]
        seed: Option<u64>,
    },

    /// Rank each class's low-level words by final-layer attention from the readout.
    Inspect {
        /// Checkpoint written by train.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Corpus directory whose bundle supplies the classes.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Bundle file used instead of the corpus bundle.
        #[arg(long, value_name = "PATH")]
        bundle: Option<PathBuf>,
    },
}

/// Keys a config file may set. Every path and training knob here can also
/// arrive as a flag, and the flag wins.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    shots: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    early_stop_accuracy: Option<f64>,
    n_global: Option<usize>,
    /// Preset pair to start from: "desk" (default) or "micro".
    scale: Option<String>,
    /// "base-to-new" (default) or "cross-dataset".
    protocol: Option<String>,
    ablate: Option<Vec<String>>,
    corpus: Option<PathBuf>,
    bundle: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    /// Cross-dataset evaluation targets.
    targets: Option<Vec<TargetEntry>>,
    n_classes: Option<usize>,
    n_images_per_class: Option<usize>,
    image_side: Option<usize>,
    n_entities: Option<usize>,
    n_attributes: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetEntry {
    name: String,
    corpus: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::NumericDomain(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HPT_LOG", "error"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Validation(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::Validation(format!("config {} is malformed: {e}", path.display()))
            })?
        }
        None => FileConfig::default(),
    };

    match cli.command {
        Command::GenCorpus { seed, out } => gen_corpus(&file, seed, out),
        Command::EmitInstructions { bundle, out } => emit_instructions(&file, bundle, out),
        Command::Train {
            corpus,
            bundle,
            checkpoint,
            seed,
            shots,
            epochs,
            lr,
            ablate,
        } => run_train(&file, corpus, bundle, checkpoint, seed, shots, epochs, lr, &ablate),
        Command::Eval {
            checkpoint,
            corpus,
            bundle,
            out,
            ablate,
        } => run_eval(&file, checkpoint, corpus, bundle, out, &ablate),
        Command::Gradcheck { seed } => gradcheck(&file, seed),
        Command::Inspect {
            checkpoint,
            corpus,
            bundle,
        } => inspect(&file, checkpoint, corpus, bundle),
    }
}

fn require<T>(value: Option<T>, name: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::Usage(format!("--{name} is required (flag or config key)")))
}

fn read_bundle(path: &Path) -> Result<KnowledgeBundle, Failure> {
    let bytes = fs::read(path)
        .map_err(|e| Failure::Validation(format!("cannot read bundle {}: {e}", path.display())))?;
    Ok(parse_bundle(&bytes)?)
}

/// Corpus plus optional bundle override, shared by train, eval, and inspect.
fn load_inputs(
    corpus: Option<PathBuf>,
    bundle: Option<PathBuf>,
    file: &FileConfig,
) -> Result<(ImageDataset, KnowledgeBundle), Failure> {
    let dir = require(corpus.or_else(|| file.corpus.clone()), "corpus")?;
    let (dataset, mut bundle_doc) = load_corpus(&dir)?;
    if let Some(path) = bundle.or_else(|| file.bundle.clone()) {
        bundle_doc = read_bundle(&path)?;
    }
    Ok((dataset, bundle_doc))
}

fn ablation_from(flags: &[String], file: &FileConfig) -> Result<Ablation, Failure> {
    let names = if flags.is_empty() {
        file.ablate.clone().unwrap_or_default()
    } else {
        flags.to_vec()
    };
    let mut ablation = Ablation::default();
    for name in &names {
        ablation.set(name)?;
    }
    Ok(ablation)
}

fn protocol_from(file: &FileConfig) -> Result<Protocol, Failure> {
    match &file.protocol {
        Some(name) => Ok(name.parse::<Protocol>()?),
        None => Ok(Protocol::BaseToNew),
    }
}

/// Resolve the training and encoder configs: preset from `scale`, then
/// config-file keys, then flags.
fn resolve_train_config(
    file: &FileConfig,
    seed: Option<u64>,
    shots: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<(TrainConfig, EncoderConfig, EncoderConfig), Failure> {
    let seed = seed.or(file.seed).unwrap_or(0);
    let (mut config, text, image) = match file.scale.as_deref().unwrap_or("desk") {
        "desk" => (
            TrainConfig::desk(seed),
            EncoderConfig::desk_text(),
            EncoderConfig::desk_image(),
        ),
        "micro" => (
            TrainConfig::micro(seed),
            EncoderConfig::micro_text(),
            EncoderConfig::micro_image(),
        ),
        other => {
            return Err(Failure::Validation(format!(
                "unknown scale {other:?}; expected \"desk\" or \"micro\""
            )))
        }
    };
    if let Some(v) = shots.or(file.shots) {
        config.shots = v;
    }
    if let Some(v) = epochs.or(file.epochs) {
        config.epochs = v;
    }
    if let Some(v) = lr.or(file.lr) {
        config.lr = v;
    }
    if let Some(v) = file.early_stop_accuracy {
        config.early_stop_accuracy = Some(v);
    }
    if let Some(v) = file.n_global {
        config.n_global = v;
    }
    Ok((config, text, image))
}

fn gen_corpus(file: &FileConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require(out.or_else(|| file.out.clone()), "out")?;
    let spec = CorpusSpec {
        n_classes: file.n_classes.unwrap_or(4),
        n_images_per_class: file.n_images_per_class.unwrap_or(20),
        image_side: file.image_side.unwrap_or(16),
        n_entities: file.n_entities.unwrap_or(3),
        n_attributes: file.n_attributes.unwrap_or(3),
    };
    let seed = seed.or(file.seed).unwrap_or(0);
    let (dataset, bundle) = generate_synthetic_corpus(&spec, seed)?;
    fs::create_dir_all(&out)
        .map_err(|e| Failure::Validation(format!("cannot create {}: {e}", out.display())))?;
    save_corpus(&dataset, &bundle, &out)?;
    log::info!("corpus seed {seed}, spec {spec:?}");
    println!(
        "wrote {} classes, {} images to {}",
        bundle.categories.len(),
        dataset.len(),
        out.display()
    );
    Ok(())
}

fn emit_instructions(
    file: &FileConfig,
    bundle: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let path = require(bundle.or_else(|| file.bundle.clone()), "bundle")?;
    let doc = read_bundle(&path)?;
    let mut text = String::new();
    for category in &doc.categories {
        let (questions, extraction) =
            render_instructions(&category.class_name, &doc.type_phrase)?;
        let _ = writeln!(text, "# {}", category.class_name);
        for (i, q) in questions.iter().enumerate() {
            let _ = writeln!(text, "{}. {q}", i + 1);
        }
        let _ = writeln!(text, "extract: {extraction}");
        let _ = writeln!(text);
    }
    match out.or_else(|| file.out.clone()) {
        Some(path) => fs::write(&path, text)
            .map_err(|e| Failure::Validation(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    file: &FileConfig,
    corpus: Option<PathBuf>,
    bundle: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
    shots: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    ablate: &[String],
) -> Result<(), Failure> {
    let ckpt_path = require(checkpoint.or_else(|| file.checkpoint.clone()), "checkpoint")?;
    let (dataset, bundle_doc) = load_inputs(corpus, bundle, file)?;
    let ablation = ablation_from(ablate, file)?;
    let (mut config, text_cfg, image_cfg) = resolve_train_config(file, seed, shots, epochs, lr)?;
    config.n_descriptions = bundle_doc.n_descriptions;

    let names: Vec<String> = bundle_doc
        .categories
        .iter()
        .map(|c| c.class_name.clone())
        .collect();
    let classes = match protocol_from(file)? {
        Protocol::BaseToNew => base_new_split(&names)?.base_classes().to_vec(),
        Protocol::CrossDataset => names,
    };

    let started = Instant::now();
    let model = train(
        &config, &text_cfg, &image_cfg, &dataset, &bundle_doc, &classes, ablation,
    )?;
    log::info!(
        "trained {} classes in {:.1?}, {} steps logged",
        classes.len(),
        started.elapsed(),
        model.loss_log.len()
    );
    save_checkpoint(&model, &ckpt_path)?;
    let last_loss = model.loss_log.last().map_or(f64::NAN, |&(_, l)| l);
    println!(
        "wrote checkpoint to {} ({} classes, final loss {last_loss:.4})",
        ckpt_path.display(),
        model.classes.len()
    );
    Ok(())
}

fn run_eval(
    file: &FileConfig,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    bundle: Option<PathBuf>,
    out: Option<PathBuf>,
    ablate: &[String],
) -> Result<(), Failure> {
    let ckpt_path = require(checkpoint.or_else(|| file.checkpoint.clone()), "checkpoint")?;
    let mut model = load_checkpoint(&ckpt_path)?;
    let (dataset, bundle_doc) = load_inputs(corpus, bundle, file)?;

    let extra = ablation_from(ablate, file)?;
    if extra.any() {
        for flag in extra.active_flags() {
            model.ablation.set(flag)?;
        }
        model.ablation = model.ablation.normalized();
        log::info!(
            "evaluating with ablations: {}",
            model.ablation.active_flags().collect::<Vec<_>>().join(", ")
        );
    }

    let started = Instant::now();
    let report = match protocol_from(file)? {
        Protocol::BaseToNew => base_to_new_report(&model, &dataset, &bundle_doc)?,
        Protocol::CrossDataset => {
            let entries = file.targets.as_deref().ok_or_else(|| {
                Failure::Usage("cross-dataset needs a targets list in the config".into())
            })?;
            let mut loaded = Vec::with_capacity(entries.len());
            for t in entries {
                let (d, b) = load_corpus(&t.corpus)?;
                loaded.push((t.name.clone(), d, b));
            }
            let refs: Vec<(String, &ImageDataset, &KnowledgeBundle)> = loaded
                .iter()
                .map(|(n, d, b)| (n.clone(), d, b))
                .collect();
            cross_dataset_report(&model, &refs)?
        }
    };
    log::info!("evaluation took {:.1?}", started.elapsed());

    // Reports are written in canonical form (wall time zeroed) so repeated
    // runs of the same evaluation produce identical bytes.
    let bytes = report.canonical_bytes()?;
    match out.or_else(|| file.out.clone()) {
        Some(path) => {
            fs::write(&path, &bytes).map_err(|e| {
                Failure::Validation(format!("cannot write {}: {e}", path.display()))
            })?;
            println!("wrote report to {}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(&bytes);
        }
    }
    Ok(())
}

fn gradcheck(file: &FileConfig, seed: Option<u64>) -> Result<(), Failure> {
    let seed = seed.or(file.seed).unwrap_or(0);
    let primitives = primitive_grad_suite(seed)?;
    let worst_primitive = primitives
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0f64, f64::max);
    let model = micro_model_grad_check(seed)?;
    println!("primitive max rel err {worst_primitive:.3e} over {} ops", primitives.len());
    println!("micro-model max rel err {:.3e}", model.max_rel_err);
    let worst = worst_primitive.max(model.max_rel_err);
    if worst > 1e-4 {
        return Err(Failure::Numeric(format!(
            "gradient error {worst:.3e} exceeds 1e-4"
        )));
    }
    Ok(())
}

struct WordScore {
    kind: WordKind,
    total: f64,
    count: usize,
}

fn inspect(
    file: &FileConfig,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    bundle: Option<PathBuf>,
) -> Result<(), Failure> {
    let ckpt_path = require(checkpoint.or_else(|| file.checkpoint.clone()), "checkpoint")?;
    let model = load_checkpoint(&ckpt_path)?;
    let bundle_doc = match bundle.or_else(|| file.bundle.clone()) {
        Some(path) => read_bundle(&path)?,
        None => {
            let dir = require(corpus.or_else(|| file.corpus.clone()), "corpus")?;
            load_corpus(&dir)?.1
        }
    };

    let ablation = model.ablation.normalized();
    if ablation.disable_low {
        println!("low-level prompts are disabled in this checkpoint; nothing to rank");
        return Ok(());
    }
    for category in &bundle_doc.categories {
        let ranked = rank_low_words(&model, &bundle_doc, &category.class_name, ablation)?;
        println!("{}:", category.class_name);
        if ranked.is_empty() {
            println!("  (no low-level words after ablation)");
            continue;
        }
        for (i, (word, kind, score)) in ranked.iter().enumerate() {
            let kind = match kind {
                WordKind::Entity => "entity",
                WordKind::Attribute => "attribute",
            };
            println!("  {}. {word} ({kind}) {score:.4}", i + 1);
        }
    }
    Ok(())
}

/// Mean attention paid by the readout position to each low-level word at
/// the final layer, averaged over heads and description records, ranked
/// highest first.
fn rank_low_words(
    model: &TrainedModel,
    bundle: &KnowledgeBundle,
    class_name: &str,
    ablation: Ablation,
) -> Result<Vec<(String, WordKind, f64)>, Failure> {
    let entry = bundle
        .categories
        .iter()
        .find(|c| c.class_name == class_name)
        .ok_or_else(|| Failure::Validation(format!("class {class_name:?} not in the bundle")))?;
    let weights = &model.text_weights;
    let cfg = &weights.config;
    let n_global = model
        .params
        .get("hpt.global.l0")
        .map(|t| t.shape()[0])
        .unwrap_or(0);
    let traces: Vec<LayerTrace> = entry
        .records
        .iter()
        .map(|r| encode_text_str(&r.text, &model.vocab, weights).map(|(_, t)| t))
        .collect::<Result<_, _>>()?;
    let class_tokens = tokenize(class_name, &model.vocab);

    let mut scores: BTreeMap<String, WordScore> = BTreeMap::new();
    for record in &entry.records {
        let record = apply_ablation(record, ablation);
        let (low_tokens, map) = assemble_low_prompts(&record, &model.vocab)?;
        if map.is_empty() {
            continue;
        }

        let mut tape = hpt_core::numerics::Tape::new();
        let values = register_hierarchy_params(&mut tape, &model.params, cfg.n_layers, n_global)?;
        let global = if ablation.disable_global {
            Vec::new()
        } else {
            values.global.clone()
        };
        let high = if ablation.disable_high {
            Vec::new()
        } else {
            generate_high_prompts(
                &mut tape,
                &traces,
                entry.records.len(),
                values.generator_w,
                values.generator_b,
            )?
        };
        let layout = SequenceLayout {
            n_class: class_tokens.len(),
            n_global: if ablation.disable_global { 0 } else { n_global },
            n_high: if ablation.disable_high { 0 } else { entry.records.len() },
            n_low: low_tokens.len(),
        };
        let mask = if ablation.relations_active() {
            Some(BiasMask::build(&map, &record, &layout)?)
        } else {
            None
        };
        let input = HierarchicalInput {
            weights,
            class_tokens: &class_tokens,
            global: &global,
            high: &high,
            low_tokens: &low_tokens,
            bias: mask.as_ref(),
            lambda_e2e: if mask.is_some() { &values.lambda_e2e } else { &[] },
            lambda_e2a: if mask.is_some() { &values.lambda_e2a } else { &[] },
        };
        let mut heads = Vec::new();
        hierarchical_encode(&mut tape, &input, None, Some(&mut heads))?;

        let seq = layout.seq_len();
        let readout = layout.readout_index();
        let offset = layout.low_offset();
        for (j, token) in map.entries.iter().enumerate() {
            let column = offset + j;
            let mean_over_heads: f64 = heads
                .iter()
                .map(|h| h.data()[readout * seq + column])
                .sum::<f64>()
                / heads.len() as f64;
            let slot = scores.entry(token.word.clone()).or_insert(WordScore {
                kind: token.kind,
                total: 0.0,
                count: 0,
            });
            slot.total += mean_over_heads;
            slot.count += 1;
        }
    }

    let mut ranked: Vec<(String, WordKind, f64)> = scores
        .into_iter()
        .map(|(word, s)| (word, s.kind, s.total / s.count as f64))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    Ok(ranked)
}
