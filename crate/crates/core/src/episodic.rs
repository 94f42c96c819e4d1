//! Episodic memory: an inverted index from clue words to the interactions
//! containing them. Retrieval picks the rarest indexed word of the query.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::InteractionId;
use crate::text;

/// Lowercased alphanumeric runs, minus stopwords and 1-character tokens,
/// deduplicated in first-occurrence order.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    text::content_words(text)
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClueIndex {
    postings: BTreeMap<String, BTreeSet<InteractionId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpisodicResult {
    /// Selected clue words, best first. Holds at most one word unless a
    /// multi-clue retrieval was requested.
    pub clues: Vec<String>,
    pub ids: BTreeSet<InteractionId>,
}

impl EpisodicResult {
    pub fn clue(&self) -> Option<&str> {
        self.clues.first().map(String::as_str)
    }
}

impl ClueIndex {
    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, word: &str) -> Option<&BTreeSet<InteractionId>> {
        self.postings.get(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn document_frequency(&self, word: &str) -> usize {
        self.postings.get(word).map_or(0, BTreeSet::len)
    }

    pub(crate) fn all_ids(&self) -> impl Iterator<Item = InteractionId> + '_ {
        self.postings.values().flatten().copied()
    }

    pub fn index_clues<S: AsRef<str>>(&mut self, id: InteractionId, words: &[S]) {
        for w in words {
            let w = w.as_ref();
            if w.is_empty() {
                continue;
            }
            match self.postings.get_mut(w) {
                Some(set) => {
                    set.insert(id);
                }
                None => {
                    self.postings.insert(w.to_string(), BTreeSet::from([id]));
                }
            }
        }
    }

    /// `1 / df` for an indexed word; `None` when the word has never been seen
    /// and so cannot be a clue.
    pub fn clue_score(&self, word: &str) -> Option<f64> {
        self.postings.get(word).map(|p| 1.0 / p.len() as f64)
    }

    /// Picks the indexed query word with the smallest document frequency.
    /// Ties go to the longer word, then the lexicographically smaller one.
    pub fn retrieve<S: AsRef<str>>(&self, query_words: &[S]) -> EpisodicResult {
        self.retrieve_top(query_words, 1)
    }

    /// Generalization to the `m` best clues, unioning their postings.
    pub fn retrieve_top<S: AsRef<str>>(&self, query_words: &[S], m: usize) -> EpisodicResult {
        let mut candidates: Vec<(&str, usize)> = query_words
            .iter()
            .map(AsRef::as_ref)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter_map(|w| self.postings.get(w).map(|p| (w, p.len())))
            .collect();
        candidates.sort_by(|a, b| {
            a.1.cmp(&b.1)
                .then_with(|| b.0.chars().count().cmp(&a.0.chars().count()))
                .then_with(|| a.0.cmp(b.0))
        });
        candidates.truncate(m);
        let ids = candidates
            .iter()
            .flat_map(|(w, _)| self.postings[*w].iter().copied())
            .collect();
        EpisodicResult {
            clues: candidates.into_iter().map(|(w, _)| w.to_string()).collect(),
            ids,
        }
    }

    pub(crate) fn check_integrity(&self) -> Result<()> {
        if let Some((w, _)) = self.postings.iter().find(|(_, p)| p.is_empty()) {
            return Err(Error::invalid(format!("empty posting list for {w:?}")));
        }
        Ok(())
    }
}
