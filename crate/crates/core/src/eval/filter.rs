use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;

use super::criterion::{boundary_words, contains_words};

/// Keyword filter matching whole words, case-insensitively.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlocklistFilter {
    terms: Vec<Vec<String>>,
}

impl BlocklistFilter {
    pub fn new<'a>(terms: impl IntoIterator<Item = &'a str>) -> Self {
        let mut terms: Vec<Vec<String>> = terms
            .into_iter()
            .map(boundary_words)
            .filter(|w| !w.is_empty())
            .collect();
        terms.sort();
        terms.dedup();
        BlocklistFilter { terms }
    }

    /// One term per line; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(|l| l.split('#').next().unwrap_or("").trim()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn terms(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.join(" ")).collect()
    }

    pub fn blocks(&self, caption: &str) -> bool {
        let words = boundary_words(caption);
        self.terms.iter().any(|t| contains_words(&words, t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterVerdict {
    pub target_term: String,
    pub caption: String,
    pub blocked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRate {
    pub target_term: String,
    pub blocked: usize,
    pub total: usize,
}

impl BlockRate {
    pub fn rate(&self) -> f64 {
        self.blocked as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSummary {
    pub verdicts: Vec<FilterVerdict>,
    /// Sorted by target term.
    pub per_term: Vec<BlockRate>,
}

/// Flags every `(target_term, caption)` pair and aggregates block rates per
/// target term.
pub fn filter_check(captions: &[(String, String)], filter: &BlocklistFilter) -> FilterSummary {
    let mut per_term: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let verdicts = captions
        .iter()
        .map(|(term, caption)| {
            let blocked = filter.blocks(caption);
            let e = per_term.entry(term).or_default();
            e.0 += blocked as usize;
            e.1 += 1;
            FilterVerdict {
                target_term: term.clone(),
                caption: caption.clone(),
                blocked,
            }
        })
        .collect();
    let per_term = per_term
        .into_iter()
        .map(|(t, (blocked, total))| BlockRate {
            target_term: t.to_string(),
            blocked,
            total,
        })
        .collect();
    FilterSummary { verdicts, per_term }
}
