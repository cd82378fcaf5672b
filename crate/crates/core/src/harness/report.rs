//! Machine-readable run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dualpath::TrainConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::hierarchy::Ablation;

/// Everything that shaped a run, embedded in its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub train: TrainConfig,
    pub text: EncoderConfig,
    pub image: EncoderConfig,
    pub ablation: Ablation,
    /// Classes the model was trained on.
    pub classes: Vec<String>,
}

/// Protocol-specific accuracy block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    BaseNew { base: f64, new: f64, hm: f64 },
    Transfer { targets: BTreeMap<String, f64>, mean: f64 },
}

/// One run's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub config: ConfigSnapshot,
    pub runtime_s: f64,
}

impl Report {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!(
                    "{name} accuracy {v} outside [0, 1]"
                )));
            }
            Ok(())
        };
        match &self.metrics {
            Metrics::BaseNew { base, new, hm } => {
                in_unit("base", *base)?;
                in_unit("new", *new)?;
                in_unit("hm", *hm)?;
                let recomputed = crate::harness::harmonic_mean(*base, *new)?;
                if (recomputed - hm).abs() > 1e-12 {
                    return Err(Error::Consistency(format!(
                        "reported hm {hm} does not match recomputed {recomputed}"
                    )));
                }
            }
            Metrics::Transfer { targets, mean } => {
                if targets.is_empty() {
                    return Err(Error::Argument("report has no targets".into()));
                }
                let mut sum = 0.0;
                for (name, acc) in targets {
                    in_unit(name, *acc)?;
                    sum += acc;
                }
                let recomputed = sum / targets.len() as f64;
                if (recomputed - mean).abs() > 1e-12 {
                    return Err(Error::Consistency(format!(
                        "reported mean {mean} does not match recomputed {recomputed}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Report> {
        let report: Report = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("report is malformed: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// Serialized bytes with the wall clock zeroed, so identical runs give
    /// identical files regardless of how long they took.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut canonical = self.clone();
        canonical.runtime_s = 0.0;
        let mut bytes = canonical.to_json()?.into_bytes();
        bytes.push(b'\n');
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::N_H;

    fn snapshot() -> ConfigSnapshot {
        ConfigSnapshot {
            train: TrainConfig::micro(3),
            text: EncoderConfig::micro_text(),
            image: EncoderConfig::micro_image(),
            ablation: Ablation::default(),
            classes: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn base_new_report_round_trips() {
        let report = Report {
            protocol: "base-to-new".into(),
            seed: 9,
            metrics: Metrics::BaseNew {
                base: 0.75,
                new: 0.5,
                hm: crate::harness::harmonic_mean(0.75, 0.5).unwrap(),
            },
            config: snapshot(),
            runtime_s: 12.25,
        };
        report.validate().unwrap();
        let text = report.to_json().unwrap();
        let back = Report::from_json(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.config.train.n_descriptions, N_H);
    }

    #[test]
    fn transfer_report_round_trips() {
        let mut targets = BTreeMap::new();
        targets.insert("alpha".to_string(), 0.5);
        targets.insert("beta".to_string(), 0.7);
        let report = Report {
            protocol: "cross-dataset".into(),
            seed: 4,
            metrics: Metrics::Transfer { targets, mean: 0.6 },
            config: snapshot(),
            runtime_s: 3.0,
        };
        report.validate().unwrap();
        let back = Report::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn json_uses_the_documented_field_names() {
        let report = Report {
            protocol: "base-to-new".into(),
            seed: 1,
            metrics: Metrics::BaseNew {
                base: 1.0,
                new: 1.0,
                hm: 1.0,
            },
            config: snapshot(),
            runtime_s: 0.5,
        };
        let value: serde_json::Value =
            serde_json::from_str(&report.to_json().unwrap()).unwrap();
        for key in ["protocol", "seed", "metrics", "config", "runtime_s"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        for key in ["base", "new", "hm"] {
            assert!(value["metrics"].get(key).is_some(), "missing metrics.{key}");
        }
    }

    #[test]
    fn inconsistent_harmonic_mean_is_rejected() {
        let report = Report {
            protocol: "base-to-new".into(),
            seed: 1,
            metrics: Metrics::BaseNew {
                base: 0.8,
                new: 0.4,
                hm: 0.9,
            },
            config: snapshot(),
            runtime_s: 0.0,
        };
        assert!(matches!(report.validate(), Err(Error::Consistency(_))));
        let text = serde_json::to_string(&report).unwrap();
        assert!(Report::from_json(&text).is_err());
    }

    #[test]
    fn canonical_bytes_ignore_the_wall_clock() {
        let mut a = Report {
            protocol: "base-to-new".into(),
            seed: 1,
            metrics: Metrics::BaseNew {
                base: 0.5,
                new: 0.5,
                hm: 0.5,
            },
            config: snapshot(),
            runtime_s: 1.5,
        };
        let mut b = a.clone();
        b.runtime_s = 99.0;
        assert_eq!(a.canonical_bytes().unwrap(), b.canonical_bytes().unwrap());
        a.seed = 2;
        assert_ne!(a.canonical_bytes().unwrap(), b.canonical_bytes().unwrap());
    }
}
