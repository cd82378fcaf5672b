//! Low-level prompt assembly: a record's entity words followed by its
//! attribute words, tokenized into one contiguous block with a map from
//! every token position back to its source word.

use crate::corpus::{
    tokenize, DescriptionRecord, TokenWordEntry, TokenWordMap, Vocabulary, WordKind,
};
use crate::error::{Error, Result};
use crate::hierarchy::Ablation;

/// Tokenize entities then attributes, in record order. Both outputs are
/// empty when the record has neither; the caller then encodes with an
/// empty low block and no bias region.
pub fn assemble_low_prompts(
    record: &DescriptionRecord,
    vocab: &Vocabulary,
) -> Result<(Vec<u32>, TokenWordMap)> {
    let mut tokens = Vec::new();
    let mut entries = Vec::new();
    for (list, kind) in [
        (&record.entities, WordKind::Entity),
        (&record.attributes, WordKind::Attribute),
    ] {
        for word in list {
            let ids = tokenize(word, vocab);
            if ids.is_empty() {
                return Err(Error::DegenerateInput(format!(
                    "word {word:?} produced no tokens"
                )));
            }
            for id in ids {
                tokens.push(id);
                entries.push(TokenWordEntry {
                    word: word.clone(),
                    kind,
                });
            }
        }
    }
    Ok((tokens, TokenWordMap { entries }))
}

/// Strip the parts of a record that an ablation turns off. Removing a word
/// list also removes the relations that reference it.
pub fn apply_ablation(record: &DescriptionRecord, ablation: Ablation) -> DescriptionRecord {
    let a = ablation.normalized();
    let mut out = record.clone();
    if a.disable_entities {
        out.entities.clear();
        out.e2e.clear();
        out.e2a.clear();
    }
    if a.disable_attributes {
        out.attributes.clear();
        out.e2a.clear();
    }
    if a.disable_relations {
        out.e2e.clear();
        out.e2a.clear();
    }
    out
}
