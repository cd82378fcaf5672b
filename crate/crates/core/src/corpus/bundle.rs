//! Knowledge bundles: per-category description records with entity and
//! attribute graphs.
//!
//! A bundle is the on-disk contract for everything the text side consumes:
//! descriptions, their entity/attribute word sets, and the two relation sets
//! (entity-entity and entity-attribute pairs) that later drive attention
//! bias. Parsing always validates; no unvalidated bundle can escape this
//! module.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Current (and only) bundle schema version.
pub const BUNDLE_SCHEMA: u32 = 1;

/// One description of a category plus its structured knowledge.
///
/// `e2e` holds unordered entity-entity pairs, `e2a` ordered
/// (entity, attribute) pairs. The wire format for both is a two-element
/// string array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub text: String,
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub e2e: Vec<(String, String)>,
    pub e2a: Vec<(String, String)>,
}

/// All descriptions of one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub class_name: String,
    pub records: Vec<DescriptionRecord>,
}

/// A validated corpus of categories sharing one type phrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    pub schema: u32,
    pub type_phrase: String,
    pub n_descriptions: usize,
    pub categories: Vec<CategoryEntry>,
}

fn normalized_pair<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// True when the word survives tokenizer normalization with at least one
/// token (i.e. contains an alphanumeric character).
fn has_token_content(word: &str) -> bool {
    word.chars().any(|c| c.is_alphanumeric())
}

impl DescriptionRecord {
    fn validate(&self, category: &str, record: usize) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Validation {
                category: category.to_string(),
                record,
                detail,
            })
        };

        if self.text.trim().is_empty() {
            return fail("empty description text".into());
        }

        for (list, kind) in [(&self.entities, "entity"), (&self.attributes, "attribute")] {
            let mut seen = BTreeSet::new();
            for w in list {
                if w.trim().is_empty() || !has_token_content(w) {
                    return fail(format!("{kind} {w:?} has no tokenizable content"));
                }
                if !seen.insert(w.as_str()) {
                    return fail(format!("duplicate {kind} {w:?}"));
                }
            }
        }
        let entity_set: BTreeSet<&str> = self.entities.iter().map(|s| s.as_str()).collect();
        let attribute_set: BTreeSet<&str> = self.attributes.iter().map(|s| s.as_str()).collect();
        if let Some(w) = entity_set.intersection(&attribute_set).next() {
            return fail(format!("word {w:?} listed as both entity and attribute"));
        }

        let mut seen_e2e = BTreeSet::new();
        for (a, b) in &self.e2e {
            if a == b {
                return fail(format!("self-referential pair ({a:?}, {a:?})"));
            }
            for w in [a, b] {
                if !entity_set.contains(w.as_str()) {
                    return fail(format!("pair ({a:?}, {b:?}) references {w:?} absent from entities"));
                }
            }
            if !seen_e2e.insert(normalized_pair(a, b)) {
                return fail(format!("duplicate entity pair ({a:?}, {b:?})"));
            }
        }

        let mut seen_e2a = BTreeSet::new();
        for (e, a) in &self.e2a {
            if !entity_set.contains(e.as_str()) {
                return fail(format!("pair ({e:?}, {a:?}) references {e:?} absent from entities"));
            }
            if !attribute_set.contains(a.as_str()) {
                return fail(format!("pair ({e:?}, {a:?}) references {a:?} absent from attributes"));
            }
            if !seen_e2a.insert((e.as_str(), a.as_str())) {
                return fail(format!("duplicate entity-attribute pair ({e:?}, {a:?})"));
            }
        }
        Ok(())
    }

    /// Membership test for the unordered entity-entity relation set.
    pub fn related_e2e(&self, a: &str, b: &str) -> bool {
        let q = normalized_pair(a, b);
        self.e2e
            .iter()
            .any(|(x, y)| normalized_pair(x, y) == q)
    }

    /// Membership test for the entity-attribute relation set, symmetric in
    /// position order (the attribute may sit on either side of the query).
    pub fn related_e2a(&self, a: &str, b: &str) -> bool {
        self.e2a
            .iter()
            .any(|(e, t)| (e == a && t == b) || (e == b && t == a))
    }
}

impl KnowledgeBundle {
    /// Validate the whole bundle against every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(Error::BundleValidation(format!(
                "unsupported schema version {} (expected {BUNDLE_SCHEMA})",
                self.schema
            )));
        }
        if self.type_phrase.trim().is_empty() {
            return Err(Error::BundleValidation("empty type_phrase".into()));
        }
        if self.n_descriptions == 0 {
            return Err(Error::BundleValidation("n_descriptions must be >= 1".into()));
        }
        let mut names = BTreeSet::new();
        for cat in &self.categories {
            if cat.class_name.trim().is_empty() || !has_token_content(&cat.class_name) {
                return Err(Error::BundleValidation(format!(
                    "class_name {:?} has no tokenizable content",
                    cat.class_name
                )));
            }
            if !names.insert(cat.class_name.as_str()) {
                return Err(Error::BundleValidation(format!(
                    "duplicate class_name {:?}",
                    cat.class_name
                )));
            }
            if cat.records.len() != self.n_descriptions {
                return Err(Error::BundleValidation(format!(
                    "category {:?} has {} records, bundle declares {}",
                    cat.class_name,
                    cat.records.len(),
                    self.n_descriptions
                )));
            }
            for (i, rec) in cat.records.iter().enumerate() {
                rec.validate(&cat.class_name, i)?;
            }
        }
        Ok(())
    }

    pub fn category(&self, class_name: &str) -> Option<&CategoryEntry> {
        self.categories.iter().find(|c| c.class_name == class_name)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.class_name.clone()).collect()
    }
}

/// Parse and validate a bundle document.
pub fn parse_bundle(document: &[u8]) -> Result<KnowledgeBundle> {
    let bundle: KnowledgeBundle = serde_json::from_slice(document).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    bundle.validate()?;
    Ok(bundle)
}

/// Serialize a bundle to its canonical pretty-printed JSON document.
pub fn serialize_bundle(bundle: &KnowledgeBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut out = serde_json::to_vec_pretty(bundle)
        .map_err(|e| Error::Format(format!("bundle serialization failed: {e}")))?;
    out.push(b'\n');
    Ok(out)
}
