//! Instruction templates.
//!
//! Five fixed question templates describe a class among a type; a sixth
//! template asks for structured extraction (entities, attributes,
//! relations). Substitution is literal: the class and type phrases are
//! dropped into the placeholders verbatim, articles and all.

use crate::error::{Error, Result};

/// Number of description-eliciting templates, and therefore the default
/// number of descriptions per category.
pub const N_H: usize = 5;

const TEMPLATES: [&str; N_H] = [
    "What does a [CLASS] look like among all a [TYPE]?",
    "What are the distinct features of [CLASS] for recognition among all [TYPE]?",
    "How would you describe a [CLASS] among all [TYPE]?",
    "What visual cues identify a [CLASS] among all [TYPE]?",
    "Which characteristics set a [CLASS] apart from other [TYPE]?",
];

const EXTRACTION_TEMPLATE: &str =
    "List the entities, attributes, and entity relations that characterize a [CLASS] among all [TYPE].";

fn substitute(template: &str, class_name: &str, type_phrase: &str) -> String {
    template
        .replace("[CLASS]", class_name)
        .replace("[TYPE]", type_phrase)
}

/// Render the question templates and the extraction instruction for one
/// class.
pub fn render_instructions(
    class_name: &str,
    type_phrase: &str,
) -> Result<(Vec<String>, String)> {
    if class_name.trim().is_empty() {
        return Err(Error::Argument("empty class name".into()));
    }
    if type_phrase.trim().is_empty() {
        return Err(Error::Argument("empty type phrase".into()));
    }
    let questions = TEMPLATES
        .iter()
        .map(|t| substitute(t, class_name, type_phrase))
        .collect();
    let extraction = substitute(EXTRACTION_TEMPLATE, class_name, type_phrase);
    Ok((questions, extraction))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_template_wording_is_literal() {
        let (qs, _) = render_instructions("a pet Abyssinian", "types of pets").unwrap();
        assert_eq!(
            qs[0],
            "What does a a pet Abyssinian look like among all a types of pets?"
        );
        assert_eq!(
            qs[1],
            "What are the distinct features of a pet Abyssinian for recognition among all types of pets?"
        );
    }

    #[test]
    fn renders_exactly_n_h_questions() {
        let (qs, _) = render_instructions("X", "Y").unwrap();
        assert_eq!(qs.len(), N_H);
    }

    #[test]
    fn no_residual_placeholders() {
        let (qs, ex) = render_instructions("fern", "types of plants").unwrap();
        for s in qs.iter().chain(std::iter::once(&ex)) {
            assert!(!s.contains("[CLASS]"), "{s}");
            assert!(!s.contains("[TYPE]"), "{s}");
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(
            render_instructions("", "types"),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            render_instructions("fern", "  "),
            Err(Error::Argument(_))
        ));
    }
}
