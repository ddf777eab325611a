//! Semantic grouping of segmentation classes.
//!
//! Each segmentation class is described by a set of words. Word similarity
//! comes from a hypernym taxonomy (Li et al. metric); class sets of the
//! content and style images are first reconciled by a difference merge and
//! then reduced by merging everything connected through word pairs whose
//! similarity exceeds a threshold.

mod grouping;
mod taxonomy;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

pub use grouping::{
    class_reduction, class_reduction_with, class_similarity, difference_merge, group_semantics, ClassGroup, Grouping,
    MergeResult,
};
pub use taxonomy::{LiParams, Taxonomy};

/// Words describing one segmentation class: lowercase, underscores instead of
/// spaces, never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassSet(BTreeSet<String>);

impl ClassSet {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() {
                return Err(Error::EmptyWord);
            }
            if w.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::TaxonomyStructure(format!(
                    "class word `{w}` is not normalized"
                )));
            }
            set.insert(w.to_string());
        }
        if set.is_empty() {
            return Err(Error::EmptyWord);
        }
        Ok(Self(set))
    }

    /// Single-word class; panics on words that are not normalized.
    pub fn word(w: &str) -> Self {
        Self::new([w]).expect("normalized word")
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        ClassSet(self.0.union(&other.0).cloned().collect())
    }

    /// Sorted words joined by `;`. Used for deterministic tie-breaking.
    pub fn canonical_name(&self) -> String {
        self.words().collect::<Vec<_>>().join(";")
    }

    /// Rewrites every word through the substitution table.
    pub fn substituted(&self, subs: &Substitutions) -> ClassSet {
        ClassSet(self.0.iter().map(|w| subs.apply(w).to_string()).collect())
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.words().collect::<Vec<_>>().join(", "))
    }
}

/// Word replacements for class names the taxonomy does not know.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Substitutions(HashMap<String, String>);

impl Substitutions {
    /// Parses `from<TAB>to` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (from, to) = line.split_once('\t').ok_or_else(|| Error::TaxonomySyntax {
                line: i + 1,
                reason: "expected `from<TAB>to`".into(),
            })?;
            let from = join_words(from)?;
            let to = join_words(to)?;
            map.insert(from, to);
        }
        Ok(Self(map))
    }

    /// The substitution list shipped for the ADE20K class names.
    pub fn ade20k() -> Self {
        Self::parse(crate::data::ADE20K_SUBSTITUTIONS).expect("shipped substitutions parse")
    }

    pub fn apply<'a>(&'a self, word: &'a str) -> &'a str {
        self.0.get(word).map(String::as_str).unwrap_or(word)
    }

    pub fn insert(&mut self, from: &str, to: &str) {
        self.0.insert(from.to_string(), to.to_string());
    }
}

fn join_words(raw: &str) -> Result<String> {
    let joined = raw
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_");
    if joined.is_empty() {
        Err(Error::EmptyWord)
    } else {
        Ok(joined)
    }
}

/// Lowercases, joins multi-word names with underscores, then applies the
/// substitution table.
pub fn normalize_word(raw: &str, subs: &Substitutions) -> Result<String> {
    let joined = join_words(raw)?;
    Ok(subs.apply(&joined).to_string())
}
