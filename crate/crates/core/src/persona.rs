//! Persona memory: curated fact events and user attributes.
//!
//! Facts and attributes are edited through [`MemoryOp`]s. Attributes are
//! additionally consolidated by compaction: each attribute is linked to its
//! most similar peer, the resulting graph is split into connected
//! components, and every multi-member component is merged into one entry by
//! the analyzer.

use std::collections::{BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analyzer::Analyzer;
use crate::embedding::{cosine_similarity, top_k, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::memory::{InteractionId, MemoryOp, OpKind};

pub type EntryId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Fact,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaEntry {
    pub id: EntryId,
    pub kind: EntryKind,
    pub text: String,
    pub vector: Embedding,
    pub created_from: InteractionId,
    pub updated_at: DateTime<Utc>,
    /// Interactions that contributed to this entry, ascending.
    pub sources: Vec<InteractionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaStore {
    facts: Vec<PersonaEntry>,
    attributes: Vec<PersonaEntry>,
    pending_attribute_count: u64,
    next_fact_id: EntryId,
    next_attribute_id: EntryId,
    partial_compaction: bool,
}

impl Default for PersonaStore {
    fn default() -> Self {
        PersonaStore {
            facts: Vec::new(),
            attributes: Vec::new(),
            pending_attribute_count: 0,
            next_fact_id: 1,
            next_attribute_id: 1,
            partial_compaction: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Added(EntryId),
    Ignored,
    Updated(EntryId),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompactionReport {
    pub attributes_before: usize,
    pub attributes_after: usize,
    pub components: usize,
    /// Multi-member components replaced by a merged entry.
    pub components_merged: usize,
    /// True when at least one component could not be merged and was kept.
    pub partial: bool,
}

/// An entry returned by persona retrieval with its similarity to the query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedEntry {
    pub kind: EntryKind,
    pub id: EntryId,
    pub text: String,
    pub score: f64,
}

impl PersonaStore {
    pub fn facts(&self) -> &[PersonaEntry] {
        &self.facts
    }

    pub fn attributes(&self) -> &[PersonaEntry] {
        &self.attributes
    }

    pub fn entries(&self, kind: EntryKind) -> &[PersonaEntry] {
        match kind {
            EntryKind::Fact => &self.facts,
            EntryKind::Attribute => &self.attributes,
        }
    }

    pub fn pending_attribute_count(&self) -> u64 {
        self.pending_attribute_count
    }

    pub fn partial_compaction(&self) -> bool {
        self.partial_compaction
    }

    pub(crate) fn source_ids(&self) -> impl Iterator<Item = InteractionId> + '_ {
        self.facts
            .iter()
            .chain(&self.attributes)
            .flat_map(|e| e.sources.iter().copied().chain([e.created_from]))
    }

    fn list_mut(&mut self, kind: EntryKind) -> &mut Vec<PersonaEntry> {
        match kind {
            EntryKind::Fact => &mut self.facts,
            EntryKind::Attribute => &mut self.attributes,
        }
    }

    fn fresh_id(&mut self, kind: EntryKind) -> EntryId {
        let next = match kind {
            EntryKind::Fact => &mut self.next_fact_id,
            EntryKind::Attribute => &mut self.next_attribute_id,
        };
        let id = *next;
        *next += 1;
        id
    }

    /// `(id, text)` pairs in id order, the form handed to the analyzer.
    pub fn listing(&self, kind: EntryKind) -> Vec<(EntryId, &str)> {
        self.entries(kind)
            .iter()
            .map(|e| (e.id, e.text.as_str()))
            .collect()
    }

    /// Applies one op to the fact or attribute list. Add appends a new entry,
    /// Ignore does nothing, Update rewrites and re-embeds the target in place.
    pub fn apply_op(
        &mut self,
        kind: EntryKind,
        op: &MemoryOp,
        source: InteractionId,
        at: DateTime<Utc>,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<ApplyOutcome> {
        op.validate()?;
        let outcome = match op.kind {
            OpKind::Ignore => return Ok(ApplyOutcome::Ignored),
            OpKind::Add => {
                let vector = embedder.embed(&op.payload)?;
                let id = self.fresh_id(kind);
                self.list_mut(kind).push(PersonaEntry {
                    id,
                    kind,
                    text: op.payload.clone(),
                    vector,
                    created_from: source,
                    updated_at: at,
                    sources: vec![source],
                });
                ApplyOutcome::Added(id)
            }
            OpKind::Update => {
                let target = op.target_id.expect("validated");
                let pos = self
                    .entries(kind)
                    .binary_search_by_key(&target, |e| e.id)
                    .map_err(|_| Error::OpTargetMissing(target))?;
                let vector = embedder.embed(&op.payload)?;
                let entry = &mut self.list_mut(kind)[pos];
                entry.text = op.payload.clone();
                entry.vector = vector;
                entry.updated_at = at;
                if let Err(i) = entry.sources.binary_search(&source) {
                    entry.sources.insert(i, source);
                }
                ApplyOutcome::Updated(target)
            }
        };
        if kind == EntryKind::Attribute {
            self.pending_attribute_count += 1;
        }
        Ok(outcome)
    }

    /// Replaces the attribute list by one entry per nearest-neighbor
    /// component. Singleton components are kept untouched; larger ones are
    /// merged by the analyzer into a fresh entry. With `min_similarity` set,
    /// neighbor links weaker than the floor are not drawn.
    pub fn compact_attributes(
        &mut self,
        analyzer: &dyn Analyzer,
        embedder: &dyn EmbeddingProvider,
        min_similarity: Option<f64>,
        at: DateTime<Utc>,
    ) -> Result<CompactionReport> {
        let before = self.attributes.len();
        if self.attributes.is_empty() {
            self.pending_attribute_count = 0;
            return Ok(CompactionReport::default());
        }
        let graph = build_nn_graph_with_floor(&self.attributes, min_similarity)?;
        let components = connected_components(&graph);
        let by_id: HashMap<EntryId, &PersonaEntry> =
            self.attributes.iter().map(|e| (e.id, e)).collect();

        let mut kept: Vec<PersonaEntry> = Vec::new();
        let mut merged: Vec<(Vec<InteractionId>, String)> = Vec::new();
        let mut partial = false;
        for comp in &components {
            let members: Vec<&PersonaEntry> = comp.iter().map(|id| by_id[id]).collect();
            if members.len() == 1 {
                kept.push(members[0].clone());
                continue;
            }
            let texts: Vec<&str> = members.iter().map(|e| e.text.as_str()).collect();
            match analyzer.merge_cluster(&texts) {
                Ok(text) if !text.trim().is_empty() => {
                    let sources: BTreeSet<InteractionId> = members
                        .iter()
                        .flat_map(|e| e.sources.iter().copied().chain([e.created_from]))
                        .collect();
                    merged.push((sources.into_iter().collect(), text));
                }
                Ok(_) | Err(_) => {
                    tracing::warn!(size = members.len(), "attribute merge failed; keeping members");
                    partial = true;
                    kept.extend(members.into_iter().cloned());
                }
            }
        }

        let texts: Vec<&str> = merged.iter().map(|(_, t)| t.as_str()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embedder.embed_batch(&texts)?
        };
        let components_merged = merged.len();
        for ((sources, text), vector) in merged.into_iter().zip(vectors) {
            let id = self.fresh_id(EntryKind::Attribute);
            kept.push(PersonaEntry {
                id,
                kind: EntryKind::Attribute,
                created_from: sources[0],
                text,
                vector,
                updated_at: at,
                sources,
            });
        }
        kept.sort_by_key(|e| e.id);
        self.attributes = kept;
        self.pending_attribute_count = 0;
        self.partial_compaction = partial;
        Ok(CompactionReport {
            attributes_before: before,
            attributes_after: self.attributes.len(),
            components: components.len(),
            components_merged,
            partial,
        })
    }

    /// Top `k_facts` facts followed by top `k_attributes` attributes.
    pub fn retrieve(
        &self,
        query: &Embedding,
        k_facts: usize,
        k_attributes: usize,
    ) -> Result<Vec<RetrievedEntry>> {
        let mut out = Vec::new();
        for (list, k) in [(&self.facts, k_facts), (&self.attributes, k_attributes)] {
            let by_id: HashMap<EntryId, &PersonaEntry> = list.iter().map(|e| (e.id, e)).collect();
            for s in top_k(list.iter().map(|e| (e.id, &e.vector)), query, k)? {
                let e = by_id[&s.key];
                out.push(RetrievedEntry {
                    kind: e.kind,
                    id: e.id,
                    text: e.text.clone(),
                    score: s.score,
                });
            }
        }
        Ok(out)
    }

    pub(crate) fn check_integrity(&self) -> Result<()> {
        for (kind, list, next) in [
            (EntryKind::Fact, &self.facts, self.next_fact_id),
            (EntryKind::Attribute, &self.attributes, self.next_attribute_id),
        ] {
            if list.windows(2).any(|w| w[0].id >= w[1].id) {
                return Err(Error::invalid(format!("{kind:?} ids not strictly increasing")));
            }
            if list.iter().any(|e| e.kind != kind || e.text.trim().is_empty() || e.id >= next) {
                return Err(Error::invalid(format!("malformed {kind:?} entry")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct NearestNeighborGraph {
    pub vertices: Vec<EntryId>,
    /// Undirected edges stored as `(smaller, larger)`.
    pub edges: BTreeSet<(EntryId, EntryId)>,
}

/// The entry most similar to `id` among the others; ties go to the smaller
/// id. `None` when there is no other entry (or `id` is absent).
pub fn nearest_neighbor(entries: &[PersonaEntry], id: EntryId) -> Result<Option<EntryId>> {
    let Some(me) = entries.iter().find(|e| e.id == id) else {
        return Ok(None);
    };
    Ok(nearest_with_score(entries, me)?.map(|(id, _)| id))
}

fn nearest_with_score(entries: &[PersonaEntry], me: &PersonaEntry) -> Result<Option<(EntryId, f64)>> {
    let mut best: Option<(EntryId, f64)> = None;
    for other in entries.iter().filter(|e| e.id != me.id) {
        let s = cosine_similarity(&me.vector, &other.vector)?;
        best = match best {
            Some((bid, bs)) if bs > s || (bs == s && bid < other.id) => Some((bid, bs)),
            _ => Some((other.id, s)),
        };
    }
    Ok(best)
}

/// Links every entry to its nearest neighbor.
pub fn build_nn_graph(entries: &[PersonaEntry]) -> Result<NearestNeighborGraph> {
    build_nn_graph_with_floor(entries, None)
}

pub fn build_nn_graph_with_floor(
    entries: &[PersonaEntry],
    min_similarity: Option<f64>,
) -> Result<NearestNeighborGraph> {
    let mut graph = NearestNeighborGraph {
        vertices: entries.iter().map(|e| e.id).collect(),
        edges: BTreeSet::new(),
    };
    for e in entries {
        if let Some((nn, s)) = nearest_with_score(entries, e)? {
            if min_similarity.is_none_or(|floor| s >= floor) {
                graph.edges.insert((e.id.min(nn), e.id.max(nn)));
            }
        }
    }
    Ok(graph)
}

struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Partition of the vertices into connected components. Each component is
/// sorted ascending; components are ordered by their smallest member. Edges
/// naming unknown vertices are ignored.
pub fn connected_components(graph: &NearestNeighborGraph) -> Vec<Vec<EntryId>> {
    let mut vertices = graph.vertices.clone();
    vertices.sort_unstable();
    vertices.dedup();
    let index: HashMap<EntryId, usize> = vertices.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut sets = DisjointSets::new(vertices.len());
    for (a, b) in &graph.edges {
        if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
            sets.union(ia, ib);
        }
    }
    let mut by_root: HashMap<usize, Vec<EntryId>> = HashMap::new();
    for (i, v) in vertices.iter().enumerate() {
        by_root.entry(sets.find(i)).or_default().push(*v);
    }
    let mut comps: Vec<Vec<EntryId>> = by_root.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    comps
}
