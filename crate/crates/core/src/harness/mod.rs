//! Evaluation protocols: deterministic base/new class splits, accuracy over
//! the averaged distribution, harmonic-mean summaries, and cross-dataset
//! transfer, all emitting machine-readable reports.

mod eval;
mod report;

pub use eval::{
    base_to_new_report, cross_dataset_report, evaluate, run_base_to_new, run_cross_dataset,
    run_protocol, Protocol, ProtocolInputs,
};
pub use report::{ConfigSnapshot, Metrics, Report};

use crate::error::{Error, Result};

/// Harmonic mean of two accuracies, the standard summary for base/new
/// generalization. Zero if either side is zero.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> Result<f64> {
    for (name, v) in [("base", base_acc), ("new", new_acc)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Argument(format!(
                "{name} accuracy {v} outside [0, 1]"
            )));
        }
    }
    if base_acc == 0.0 || new_acc == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base_acc * new_acc / (base_acc + new_acc))
}

/// A deterministic ordered split: the first half of the classes (rounded
/// up) are base, the rest are new.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    classes: Vec<String>,
    n_base: usize,
}

impl SplitSpec {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn base_classes(&self) -> &[String] {
        &self.classes[..self.n_base]
    }

    pub fn new_classes(&self) -> &[String] {
        &self.classes[self.n_base..]
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.n_base).collect()
    }

    pub fn new_indices(&self) -> Vec<usize> {
        (self.n_base..self.classes.len()).collect()
    }
}

/// Split an ordered class list into base and new halves.
pub fn base_new_split(classes: &[String]) -> Result<SplitSpec> {
    if classes.len() < 2 {
        return Err(Error::Argument(format!(
            "{} classes cannot be split into base and new",
            classes.len()
        )));
    }
    Ok(SplitSpec {
        classes: classes.to_vec(),
        n_base: classes.len().div_ceil(2),
    })
}
