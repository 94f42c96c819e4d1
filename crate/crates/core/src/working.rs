//! Working memory: topic → interactions, retrieved by topic similarity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{top_k, Embedding, EmbeddingProvider, Scored};
use crate::error::{Error, Result};
use crate::memory::InteractionId;
use crate::text::normalize_key;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopicIndex {
    entries: BTreeMap<String, BTreeSet<InteractionId>>,
    vectors: BTreeMap<String, Embedding>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorkingResult {
    /// Selected topics, most similar first.
    pub topics: Vec<Scored<String>>,
    /// Union of the selected topics' interactions, ascending.
    pub ids: BTreeSet<InteractionId>,
}

impl TopicIndex {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn topics(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn interactions(&self, topic: &str) -> Option<&BTreeSet<InteractionId>> {
        self.entries.get(&normalize_key(topic))
    }

    pub fn vector(&self, topic: &str) -> Option<&Embedding> {
        self.vectors.get(&normalize_key(topic))
    }

    pub(crate) fn all_ids(&self) -> impl Iterator<Item = InteractionId> + '_ {
        self.entries.values().flatten().copied()
    }

    /// Records that `id` belongs to `topic`. A topic's vector is computed the
    /// first time the topic is seen and never recomputed.
    pub fn index_topic(
        &mut self,
        topic: &str,
        id: InteractionId,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<()> {
        let key = normalize_key(topic);
        if key.is_empty() {
            return Err(Error::invalid("topic is empty"));
        }
        let vector = if self.vectors.contains_key(&key) {
            None
        } else {
            Some(embedder.embed(&key)?)
        };
        self.insert(key, id, vector)
    }

    /// The vector `topic` would need if indexed now, or `None` when the topic
    /// is already known. Lets callers embed before mutating anything.
    pub fn prepare_vector(
        &self,
        topic: &str,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<Option<Embedding>> {
        let key = normalize_key(topic);
        if key.is_empty() {
            return Err(Error::invalid("topic is empty"));
        }
        if self.vectors.contains_key(&key) {
            Ok(None)
        } else {
            embedder.embed(&key).map(Some)
        }
    }

    /// Indexes with a vector from [`prepare_vector`](Self::prepare_vector).
    pub fn insert(&mut self, topic: String, id: InteractionId, vector: Option<Embedding>) -> Result<()> {
        let key = normalize_key(&topic);
        if !self.vectors.contains_key(&key) {
            let v = vector.ok_or_else(|| Error::invalid(format!("new topic {key:?} needs a vector")))?;
            self.vectors.insert(key.clone(), v);
        }
        self.entries.entry(key).or_default().insert(id);
        Ok(())
    }

    /// Top `k_topics` topics by cosine similarity to the query, dropping any
    /// below `min_similarity`, and the union of their interactions.
    pub fn retrieve(
        &self,
        query: &Embedding,
        k_topics: usize,
        min_similarity: f64,
    ) -> Result<WorkingResult> {
        let ranked = top_k(
            self.vectors.iter().map(|(t, v)| (t.clone(), v)),
            query,
            k_topics,
        )?;
        let topics: Vec<_> = ranked
            .into_iter()
            .filter(|s| s.score >= min_similarity)
            .collect();
        let ids = topics
            .iter()
            .flat_map(|s| self.entries[&s.key].iter().copied())
            .collect();
        Ok(WorkingResult { topics, ids })
    }

    pub(crate) fn check_integrity(&self) -> Result<()> {
        let same_keys = self.entries.len() == self.vectors.len()
            && self.entries.keys().zip(self.vectors.keys()).all(|(a, b)| a == b);
        if !same_keys {
            return Err(Error::invalid("topic entries and topic vectors disagree"));
        }
        if self.entries.values().any(BTreeSet::is_empty) {
            return Err(Error::invalid("topic with no interactions"));
        }
        Ok(())
    }
}
