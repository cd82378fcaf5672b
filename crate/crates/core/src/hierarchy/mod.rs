//! Hierarchical text-side prompting. A class is encoded from an assembled
//! sequence of four blocks: class-name tokens, learnable global prompt
//! vectors, high-level prompts generated from frozen per-layer description
//! traces, and low-level entity/attribute tokens. Relations between those
//! words enter as a learnable additive bias on the attention logits.

mod bias;
mod encode;
mod low;

pub use bias::{build_bias_matrix, BiasMask};
pub use encode::{
    class_text_embedding, generate_high_prompts, hierarchical_encode, init_hierarchy_params,
    register_hierarchy_params, ClassTextInputs, HierarchicalInput, HierarchyValues, TextMode,
};
pub use low::{apply_ablation, assemble_low_prompts};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of learnable global prompt vectors per layer.
pub const N_GLOBAL: usize = 2;

/// Accepted names for `Ablation::set`.
pub const ABLATION_FLAGS: [&str; 6] = [
    "disable_global",
    "disable_high",
    "disable_low",
    "disable_entities",
    "disable_attributes",
    "disable_relations",
];

/// Switches that remove one prompt level or one ingredient of the low
/// level. Disabling the low level removes the token positions the relation
/// bias attaches to, so it implies `disable_relations`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_global: bool,
    pub disable_high: bool,
    pub disable_low: bool,
    pub disable_entities: bool,
    pub disable_attributes: bool,
    pub disable_relations: bool,
}

impl Ablation {
    /// Turn on the switch named by `flag`.
    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "disable_global" => self.disable_global = true,
            "disable_high" => self.disable_high = true,
            "disable_low" => self.disable_low = true,
            "disable_entities" => self.disable_entities = true,
            "disable_attributes" => self.disable_attributes = true,
            "disable_relations" => self.disable_relations = true,
            other => {
                return Err(Error::Argument(format!(
                    "unknown ablation flag {other:?}; expected one of {:?}",
                    ABLATION_FLAGS
                )))
            }
        }
        Ok(())
    }

    /// Apply the implication rules and return the closed-over form.
    pub fn normalized(mut self) -> Self {
        if self.disable_low {
            self.disable_relations = true;
        }
        self
    }

    pub fn relations_active(&self) -> bool {
        !self.disable_relations && !self.disable_low
    }

    pub fn any(&self) -> bool {
        self.active_flags().next().is_some()
    }

    /// Names of the switches that are on, in declaration order.
    pub fn active_flags(&self) -> impl Iterator<Item = &'static str> {
        let on = [
            self.disable_global,
            self.disable_high,
            self.disable_low,
            self.disable_entities,
            self.disable_attributes,
            self.disable_relations,
        ];
        ABLATION_FLAGS
            .into_iter()
            .zip(on)
            .filter_map(|(name, set)| set.then_some(name))
    }
}

/// Row layout of the assembled text sequence: class tokens, then global
/// prompts, then high prompts, then low tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub n_class: usize,
    pub n_global: usize,
    pub n_high: usize,
    pub n_low: usize,
}

impl SequenceLayout {
    pub fn seq_len(&self) -> usize {
        self.n_class + self.n_global + self.n_high + self.n_low
    }

    /// First row of the prompt region (global + high), the part whose layer
    /// outputs are discarded and replaced on re-injection.
    pub fn prompt_offset(&self) -> usize {
        self.n_class
    }

    pub fn n_prompts(&self) -> usize {
        self.n_global + self.n_high
    }

    /// First row of the low-level token block.
    pub fn low_offset(&self) -> usize {
        self.n_class + self.n_global + self.n_high
    }

    /// Row whose final-layer state is projected into the joint space: the
    /// last low token, or the last class token when the low block is empty
    /// (prompt outputs are discarded, so they are never read out).
    pub fn readout_index(&self) -> usize {
        if self.n_low > 0 {
            self.seq_len() - 1
        } else {
            self.n_class - 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_accepts_every_flag_and_rejects_unknown() {
        let mut a = Ablation::default();
        for f in ABLATION_FLAGS {
            a.set(f).unwrap();
        }
        assert!(a.disable_global && a.disable_relations);
        assert_eq!(a.active_flags().count(), 6);
        assert!(Ablation::default().set("disable_bias").is_err());
    }

    #[test]
    fn low_implies_relations() {
        let mut a = Ablation::default();
        a.set("disable_low").unwrap();
        assert!(!a.disable_relations);
        let n = a.normalized();
        assert!(n.disable_relations);
        assert!(!n.relations_active());
        assert!(!a.relations_active());
    }

    #[test]
    fn layout_offsets_and_readout() {
        let l = SequenceLayout {
            n_class: 2,
            n_global: 2,
            n_high: 5,
            n_low: 4,
        };
        assert_eq!(l.seq_len(), 13);
        assert_eq!(l.prompt_offset(), 2);
        assert_eq!(l.n_prompts(), 7);
        assert_eq!(l.low_offset(), 9);
        assert_eq!(l.readout_index(), 12);

        let empty_low = SequenceLayout { n_low: 0, ..l };
        assert_eq!(empty_low.readout_index(), 1);
    }

    #[test]
    fn default_ablation_is_inactive() {
        let a = Ablation::default();
        assert!(!a.any());
        assert!(a.relations_active());
        assert_eq!(a, a.normalized());
    }
}
