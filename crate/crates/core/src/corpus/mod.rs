//! Text-side data contract: knowledge bundles, tokenizer, instruction
//! templates, and the synthetic corpus generator.

mod bundle;
mod instructions;
mod synth;
mod vocab;

pub use bundle::{
    parse_bundle, serialize_bundle, CategoryEntry, DescriptionRecord, KnowledgeBundle,
    BUNDLE_SCHEMA,
};
pub use instructions::{render_instructions, N_H};
pub use synth::{
    generate_synthetic_corpus, load_corpus, load_dataset, save_corpus, save_dataset, CorpusSpec,
    ImageDataset, PATTERN_CELL,
};
pub use vocab::{detokenize, tokenize, words, Vocabulary, EOT, PAD, UNK};

use serde::{Deserialize, Serialize};

/// Whether a low-level token position came from an entity or an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordKind {
    Entity,
    Attribute,
}

/// Source word and kind for one low-level token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenWordEntry {
    pub word: String,
    pub kind: WordKind,
}

/// Maps every position of a low-level token block back to the entity or
/// attribute word it tokenized from. Entry `i` covers token position `i`;
/// the block is contiguous by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenWordMap {
    pub entries: Vec<TokenWordEntry>,
}

impl TokenWordMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
