//! Word-level vocabulary and tokenizer.
//!
//! Normalization lowercases, maps every non-alphanumeric character to a
//! space, and splits on whitespace. Ids 0..2 are reserved; everything else is
//! assigned in first-appearance order, so vocabulary construction is a pure
//! function of the input text sequence.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::corpus::bundle::KnowledgeBundle;
use crate::corpus::instructions::render_instructions;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOT: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

/// Normalize text into its word sequence.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

impl Vocabulary {
    /// Build a vocabulary from texts, assigning ids in first-appearance
    /// order after the reserved entries.
    pub fn build<'a, I>(texts: I) -> Vocabulary
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut id_to_token: Vec<String> =
            vec!["<pad>".into(), "<unk>".into(), "<eot>".into()];
        let mut token_to_id: BTreeMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for text in texts {
            for w in words(text) {
                if !token_to_id.contains_key(&w) {
                    token_to_id.insert(w.clone(), id_to_token.len() as u32);
                    id_to_token.push(w);
                }
            }
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Build from everything the pipeline will ever tokenize for a bundle:
    /// the type phrase, class names, rendered instructions, description
    /// texts, and all entity/attribute words.
    pub fn from_bundle(bundle: &KnowledgeBundle) -> Result<Vocabulary> {
        let mut texts: Vec<String> = vec![bundle.type_phrase.clone()];
        for cat in &bundle.categories {
            texts.push(cat.class_name.clone());
            let (t_strings, t_prime) =
                render_instructions(&cat.class_name, &bundle.type_phrase)?;
            texts.extend(t_strings);
            texts.push(t_prime);
            for rec in &cat.records {
                texts.push(rec.text.clone());
                texts.extend(rec.entities.iter().cloned());
                texts.extend(rec.attributes.iter().cloned());
            }
        }
        Ok(Vocabulary::build(texts.iter().map(|s| s.as_str())))
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }

    /// Consistency check for vocabularies coming off disk.
    pub fn validate(&self) -> Result<()> {
        if self.id_to_token.len() < 3
            || self.id_to_token[PAD as usize] != "<pad>"
            || self.id_to_token[UNK as usize] != "<unk>"
            || self.id_to_token[EOT as usize] != "<eot>"
        {
            return Err(Error::Format("vocabulary reserved entries corrupted".into()));
        }
        if self.token_to_id.len() != self.id_to_token.len() {
            return Err(Error::Format("vocabulary mapping is not bijective".into()));
        }
        for (tok, &id) in &self.token_to_id {
            if self.id_to_token.get(id as usize).map(|s| s.as_str()) != Some(tok.as_str()) {
                return Err(Error::Format(format!(
                    "vocabulary entry {tok:?} maps to inconsistent id {id}"
                )));
            }
        }
        Ok(())
    }
}

/// Map text to token ids; unknown words become UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    words(text).iter().map(|w| vocab.id(w)).collect()
}

/// Inverse of tokenize up to normalization: space-joined tokens.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
