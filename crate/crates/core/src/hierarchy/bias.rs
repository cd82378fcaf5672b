//! Relationship-guided attention bias. For every pair of low-block token
//! positions whose source words are related, the bias matrix holds the
//! layer's entity-entity or entity-attribute scalar; everywhere else it is
//! zero. One matrix is shared by all heads of a layer.

use crate::corpus::{DescriptionRecord, TokenWordMap, WordKind};
use crate::error::{Error, Result};
use crate::hierarchy::SequenceLayout;
use crate::numerics::{Tape, Tensor, Value};

/// Membership masks for one record at one sequence layout: 0/1 indicator
/// matrices for the entity-entity and entity-attribute pairs. The masks are
/// fixed data; the trainable scalars enter when a layer's matrix is built.
#[derive(Debug, Clone)]
pub struct BiasMask {
    seq_len: usize,
    e2e: Tensor,
    e2a: Tensor,
    nnz: usize,
}

impl BiasMask {
    /// Resolve word-pair membership over every low-block position pair.
    /// Entries are symmetric, the diagonal stays zero, and positions
    /// outside the low block never receive a value.
    pub fn build(
        map: &TokenWordMap,
        record: &DescriptionRecord,
        layout: &SequenceLayout,
    ) -> Result<BiasMask> {
        if map.len() != layout.n_low {
            return Err(Error::Dimension(format!(
                "token map covers {} positions but layout has a low block of {}",
                map.len(),
                layout.n_low
            )));
        }
        for entry in &map.entries {
            let list = match entry.kind {
                WordKind::Entity => &record.entities,
                WordKind::Attribute => &record.attributes,
            };
            if !list.contains(&entry.word) {
                return Err(Error::Consistency(format!(
                    "mapped word {:?} is not in the record's {:?} list",
                    entry.word, entry.kind
                )));
            }
        }
        let seq_len = layout.seq_len();
        let off = layout.low_offset();
        let mut e2e = Tensor::zeros(vec![seq_len, seq_len]);
        let mut e2a = Tensor::zeros(vec![seq_len, seq_len]);
        let mut nnz = 0;
        for i in 0..map.len() {
            for j in (i + 1)..map.len() {
                let wi = &map.entries[i].word;
                let wj = &map.entries[j].word;
                let target = if record.related_e2e(wi, wj) {
                    Some(e2e.data_mut())
                } else if record.related_e2a(wi, wj) {
                    Some(e2a.data_mut())
                } else {
                    None
                };
                if let Some(data) = target {
                    data[(off + i) * seq_len + (off + j)] = 1.0;
                    data[(off + j) * seq_len + (off + i)] = 1.0;
                    nnz += 2;
                }
            }
        }
        Ok(BiasMask {
            seq_len,
            e2e,
            e2a,
            nnz,
        })
    }

    /// Build one layer's bias matrix on the tape from that layer's scalars.
    /// Gradients flow to the scalars; the masks enter as constants.
    pub fn to_matrix(&self, tape: &mut Tape, lambda_e2e: Value, lambda_e2a: Value) -> Result<Value> {
        let me = tape.constant(&self.e2e);
        let ma = tape.constant(&self.e2a);
        let be = tape.scalar_mul(lambda_e2e, me)?;
        let ba = tape.scalar_mul(lambda_e2a, ma)?;
        tape.add(be, ba)
    }

    /// Off-tape rendering for oracle comparisons.
    pub fn dense(&self, lambda_e2e: f64, lambda_e2a: f64) -> Tensor {
        let data = self
            .e2e
            .data()
            .iter()
            .zip(self.e2a.data())
            .map(|(e, a)| e * lambda_e2e + a * lambda_e2a)
            .collect();
        Tensor::new(vec![self.seq_len, self.seq_len], data).expect("mask shape is valid")
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// True when no pair is related: the bias is identically zero for any
    /// scalar values.
    pub fn is_zero(&self) -> bool {
        self.nnz == 0
    }
}

/// One-call form: membership resolution plus tape matrix.
pub fn build_bias_matrix(
    tape: &mut Tape,
    map: &TokenWordMap,
    record: &DescriptionRecord,
    layout: &SequenceLayout,
    lambda_e2e: Value,
    lambda_e2a: Value,
) -> Result<Value> {
    BiasMask::build(map, record, layout)?.to_matrix(tape, lambda_e2e, lambda_e2a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Vocabulary};
    use crate::hierarchy::assemble_low_prompts;

    fn layout(n_low: usize) -> SequenceLayout {
        SequenceLayout {
            n_class: 1,
            n_global: 2,
            n_high: 2,
            n_low,
        }
    }

    fn rec() -> DescriptionRecord {
        DescriptionRecord {
            text: "leaves and blooms".into(),
            entities: vec!["leaves".into(), "blooms".into()],
            attributes: vec!["broad".into()],
            e2e: vec![("leaves".into(), "blooms".into())],
            e2a: vec![("leaves".into(), "broad".into())],
        }
    }

    fn setup() -> (DescriptionRecord, Vocabulary, Vec<u32>, TokenWordMap) {
        let r = rec();
        let vocab = Vocabulary::build(["leaves blooms broad"]);
        let (tokens, map) = assemble_low_prompts(&r, &vocab).unwrap();
        (r, vocab, tokens, map)
    }

    #[test]
    fn placed_values_match_membership_brute_force() {
        let (r, _, tokens, map) = setup();
        let lay = layout(tokens.len());
        let mask = BiasMask::build(&map, &r, &lay).unwrap();
        let (le, la) = (0.7, -0.3);
        let dense = mask.dense(le, la);
        let n = lay.seq_len();
        let off = lay.low_offset();
        for i in 0..n {
            for j in 0..n {
                let got = dense.data()[i * n + j];
                let expect = if i == j || i < off || j < off {
                    0.0
                } else {
                    let wi = &map.entries[i - off].word;
                    let wj = &map.entries[j - off].word;
                    if r.related_e2e(wi, wj) {
                        le
                    } else if r.related_e2a(wi, wj) {
                        la
                    } else {
                        0.0
                    }
                };
                assert_eq!(got, expect, "mismatch at ({i},{j})");
            }
        }
    }

    #[test]
    fn symmetric_zero_diagonal_zero_outside() {
        let (r, _, tokens, map) = setup();
        let lay = layout(tokens.len());
        let dense = BiasMask::build(&map, &r, &lay).unwrap().dense(1.3, 2.1);
        let n = lay.seq_len();
        let off = lay.low_offset();
        for i in 0..n {
            assert_eq!(dense.data()[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(dense.data()[i * n + j], dense.data()[j * n + i]);
                if i < off || j < off {
                    assert_eq!(dense.data()[i * n + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_relations_give_zero_matrix() {
        let mut r = rec();
        r.e2e.clear();
        r.e2a.clear();
        let vocab = Vocabulary::build(["leaves blooms broad"]);
        let (tokens, map) = assemble_low_prompts(&r, &vocab).unwrap();
        let lay = layout(tokens.len());
        let mask = BiasMask::build(&map, &r, &lay).unwrap();
        assert!(mask.is_zero());
        assert!(mask.dense(5.0, -5.0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multi_token_words_bias_every_position_pair() {
        let r = DescriptionRecord {
            text: "t".into(),
            entities: vec!["water lily".into(), "stem".into()],
            attributes: vec![],
            e2e: vec![("water lily".into(), "stem".into())],
            e2a: vec![],
        };
        let vocab = Vocabulary::build(["water lily stem"]);
        let (tokens, map) = assemble_low_prompts(&r, &vocab).unwrap();
        assert_eq!(tokens, tokenize("water lily stem", &vocab));
        let lay = SequenceLayout {
            n_class: 1,
            n_global: 0,
            n_high: 0,
            n_low: 3,
        };
        let dense = BiasMask::build(&map, &r, &lay).unwrap().dense(1.0, 0.0);
        let n = lay.seq_len();
        // positions 1,2 are "water lily", position 3 is "stem"
        for i in [1, 2] {
            assert_eq!(dense.data()[i * n + 3], 1.0);
            assert_eq!(dense.data()[3 * n + i], 1.0);
        }
        // two tokens of the same word are not a relation pair
        assert_eq!(dense.data()[n + 2], 0.0);
    }

    #[test]
    fn foreign_word_is_a_consistency_error() {
        let (r, vocab, ..) = setup();
        let other = DescriptionRecord {
            entities: vec!["petals".into()],
            ..rec()
        };
        let (_, map) = assemble_low_prompts(&other, &vocab).unwrap();
        let lay = layout(map.len());
        assert!(matches!(
            BiasMask::build(&map, &r, &lay),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn map_layout_size_mismatch_is_rejected() {
        let (r, _, tokens, map) = setup();
        let lay = layout(tokens.len() + 1);
        assert!(matches!(
            BiasMask::build(&map, &r, &lay),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradients_flow_to_both_scalars() {
        let (r, _, tokens, map) = setup();
        let lay = layout(tokens.len());
        let mut tape = Tape::new();
        let le = tape.param("le", &Tensor::new(vec![1], vec![0.4]).unwrap()).unwrap();
        let la = tape.param("la", &Tensor::new(vec![1], vec![-0.2]).unwrap()).unwrap();
        let m = build_bias_matrix(&mut tape, &map, &r, &lay, le, la).unwrap();
        // weight the matrix so the two scalar grads differ
        let n = lay.seq_len();
        let w: Vec<f64> = (0..n * n).map(|i| (i as f64) * 0.01 + 1.0).collect();
        let wv = tape.constant(&Tensor::new(vec![n, n], w).unwrap());
        let prod = tape.mul(m, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let ge = tape.grad(le).unwrap()[0];
        let ga = tape.grad(la).unwrap()[0];
        assert!(ge != 0.0 && ga != 0.0);
        assert_ne!(ge, ga);
    }

    #[test]
    fn conflicting_pair_rejected_at_validation() {
        // an e2a pair whose right side is an entity cannot validate, so a
        // precedence rule between the two masks is never needed
        let r = DescriptionRecord {
            text: "t".into(),
            entities: vec!["a".into(), "b".into()],
            attributes: vec![],
            e2e: vec![("a".into(), "b".into())],
            e2a: vec![("a".into(), "b".into())],
        };
        let bundle = crate::corpus::KnowledgeBundle {
            schema: crate::corpus::BUNDLE_SCHEMA,
            type_phrase: "types of things".into(),
            n_descriptions: 1,
            categories: vec![crate::corpus::CategoryEntry {
                class_name: "thing".into(),
                records: vec![r],
            }],
        };
        assert!(bundle.validate().is_err());
    }
}
