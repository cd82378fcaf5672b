//! Python bindings over the core crate: corpus generation, bundle
//! validation, instruction rendering, gradient checks, and a one-call
//! base-to-new evaluation. Errors surface as ValueError with the core
//! error's message.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use hpt_core::corpus::{
    generate_synthetic_corpus, load_corpus, parse_bundle, render_instructions as render_core,
    save_corpus, CorpusSpec,
};
use hpt_core::dualpath::{micro_model_grad_check, TrainConfig};
use hpt_core::encoder::EncoderConfig;
use hpt_core::harness::{harmonic_mean as hm_core, run_base_to_new};
use hpt_core::hierarchy::Ablation;
use hpt_core::numerics::primitive_grad_suite;

fn value_error(e: hpt_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Harmonic mean of base and new accuracies, the scalar that summarizes a
/// base-to-new run.
#[pyfunction]
fn harmonic_mean(base: f64, new: f64) -> PyResult<f64> {
    hm_core(base, new).map_err(value_error)
}

/// The description questions and the structure-extraction instruction for
/// one class. Returns (questions, extraction).
#[pyfunction]
fn render_instructions(class_name: &str, type_phrase: &str) -> PyResult<(Vec<String>, String)> {
    render_core(class_name, type_phrase).map_err(value_error)
}

/// Parse and validate a bundle document, returning
/// (type_phrase, n_descriptions, class names). Raises ValueError with the
/// structured message on any schema violation.
#[pyfunction]
fn validate_bundle(document: &[u8]) -> PyResult<(String, usize, Vec<String>)> {
    let bundle = parse_bundle(document).map_err(value_error)?;
    let classes = bundle
        .categories
        .iter()
        .map(|c| c.class_name.clone())
        .collect();
    Ok((bundle.type_phrase, bundle.n_descriptions, classes))
}

/// Generate a seeded synthetic corpus into `out_dir` and return
/// (n_classes, n_images).
#[pyfunction]
#[pyo3(signature = (out_dir, seed, n_classes=4, n_images_per_class=4, image_side=8, n_entities=2, n_attributes=2))]
fn generate_corpus(
    out_dir: PathBuf,
    seed: u64,
    n_classes: usize,
    n_images_per_class: usize,
    image_side: usize,
    n_entities: usize,
    n_attributes: usize,
) -> PyResult<(usize, usize)> {
    let spec = CorpusSpec {
        n_classes,
        n_images_per_class,
        image_side,
        n_entities,
        n_attributes,
    };
    let (dataset, bundle) = generate_synthetic_corpus(&spec, seed).map_err(value_error)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| PyValueError::new_err(format!("cannot create {out_dir:?}: {e}")))?;
    save_corpus(&dataset, &bundle, &out_dir).map_err(value_error)?;
    Ok((bundle.categories.len(), dataset.len()))
}

/// Finite-difference gradient checks; returns
/// (primitive max rel err, micro-model max rel err).
#[pyfunction]
fn gradcheck(seed: u64) -> PyResult<(f64, f64)> {
    let primitives = primitive_grad_suite(seed).map_err(value_error)?;
    let worst = primitives
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0f64, f64::max);
    let model = micro_model_grad_check(seed).map_err(value_error)?;
    Ok((worst, model.max_rel_err))
}

/// Train on the base half of a corpus and evaluate base-to-new, returning
/// the report as a canonical JSON string. `scale` is "desk" or "micro";
/// `ablate` lists switches such as "disable_low".
#[pyfunction]
#[pyo3(signature = (corpus_dir, seed, scale="micro", epochs=None, ablate=None))]
fn evaluate_corpus(
    corpus_dir: PathBuf,
    seed: u64,
    scale: &str,
    epochs: Option<usize>,
    ablate: Option<Vec<String>>,
) -> PyResult<String> {
    let (dataset, bundle) = load_corpus(&corpus_dir).map_err(value_error)?;
    let (mut config, text, image) = match scale {
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
            return Err(PyValueError::new_err(format!(
                "unknown scale {other:?}; expected \"desk\" or \"micro\""
            )))
        }
    };
    config.n_descriptions = bundle.n_descriptions;
    if let Some(v) = epochs {
        config.epochs = v;
    }
    let mut ablation = Ablation::default();
    for flag in ablate.unwrap_or_default() {
        ablation.set(&flag).map_err(value_error)?;
    }
    let (report, _) =
        run_base_to_new(&config, &text, &image, &dataset, &bundle, ablation).map_err(value_error)?;
    let bytes = report.canonical_bytes().map_err(value_error)?;
    String::from_utf8(bytes).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn hpt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(render_instructions, m)?)?;
    m.add_function(wrap_pyfunction!(validate_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_corpus, m)?)?;
    Ok(())
}
