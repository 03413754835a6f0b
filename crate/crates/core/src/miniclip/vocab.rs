use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_SLOT: &str = "{class}";

/// Whitespace word-level vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Sorted, deduplicated vocabulary over template words and class-name
    /// words.
    pub fn build<'a>(
        templates: impl IntoIterator<Item = &'a str>,
        words: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut set = BTreeSet::new();
        for t in templates {
            for w in t.split_whitespace().filter(|w| *w != CLASS_SLOT) {
                set.insert(w.to_string());
            }
        }
        for w in words {
            for part in w.split_whitespace() {
                set.insert(part.to_string());
            }
        }
        Self::from(set.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }
}

/// Inserts a class name into a template's `{class}` slot.
pub fn format_prompt(template: &str, class_name: &str) -> Result<String> {
    if !template.contains(CLASS_SLOT) {
        return Err(Error::Config(format!(
            "template {template:?} has no {CLASS_SLOT} slot"
        )));
    }
    Ok(template.replace(CLASS_SLOT, class_name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_sorted_unique_vocab() {
        let v = Vocabulary::build(["a photo of a {class}"], ["golden dog", "cat"]);
        assert_eq!(v.words(), &["a", "cat", "dog", "golden", "of", "photo"]);
        assert_eq!(
            v.encode("a photo of a golden dog").unwrap(),
            vec![0, 5, 4, 0, 3, 2]
        );
        assert!(matches!(v.encode("a bird"), Err(Error::UnknownToken(w)) if w == "bird"));
    }

    #[test]
    fn prompt_needs_slot() {
        assert_eq!(format_prompt("a {class}", "cat").unwrap(), "a cat");
        assert!(format_prompt("a cat", "cat").is_err());
    }
}
