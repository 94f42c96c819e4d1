//! End-to-end pipelines: encoding a turn into every store, and answering a
//! query by retrieving from the enabled channels, rendering one context under
//! a token budget and handing it to the responder.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::analyzer::Analyzer;
use crate::config::{ChannelOrder, EngineConfig, MIN_BUDGET};
use crate::embedding::{top_k, Embedding, EmbeddingProvider, Scored};
use crate::episodic::{tokenize, EpisodicResult};
use crate::error::{Error, Result};
use crate::memory::{Annotation, Interaction, InteractionId, MemoryOp, Role, UserMemory};
use crate::persona::{ApplyOutcome, CompactionReport, EntryId, EntryKind, RetrievedEntry};
use crate::working::WorkingResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Working,
    Episodic,
    Persona,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Working, Channel::Episodic, Channel::Persona];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Working => "working",
            Channel::Episodic => "episodic",
            Channel::Persona => "persona",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "working" | "wm" => Ok(Channel::Working),
            "episodic" | "em" => Ok(Channel::Episodic),
            "persona" | "pm" => Ok(Channel::Persona),
            other => Err(Error::invalid(format!("unknown channel {other:?}"))),
        }
    }
}

/// A subset of the three retrieval channels. Serialized as a list of names
/// in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<Channel>", from = "Vec<Channel>")]
pub struct ChannelSet {
    working: bool,
    episodic: bool,
    persona: bool,
}

impl ChannelSet {
    pub fn all() -> Self {
        ChannelSet { working: true, episodic: true, persona: true }
    }

    pub fn none() -> Self {
        ChannelSet { working: false, episodic: false, persona: false }
    }

    pub fn only(channels: &[Channel]) -> Self {
        channels.iter().fold(Self::none(), |set, c| set.with(*c))
    }

    pub fn with(mut self, channel: Channel) -> Self {
        match channel {
            Channel::Working => self.working = true,
            Channel::Episodic => self.episodic = true,
            Channel::Persona => self.persona = true,
        }
        self
    }

    pub fn contains(&self, channel: Channel) -> bool {
        match channel {
            Channel::Working => self.working,
            Channel::Episodic => self.episodic,
            Channel::Persona => self.persona,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.working || self.episodic || self.persona)
    }

    pub fn iter(&self) -> impl Iterator<Item = Channel> + '_ {
        Channel::ALL.into_iter().filter(|c| self.contains(*c))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.iter().map(Channel::as_str).collect()
    }
}

impl Default for ChannelSet {
    fn default() -> Self {
        Self::all()
    }
}

impl From<ChannelSet> for Vec<Channel> {
    fn from(set: ChannelSet) -> Self {
        set.iter().collect()
    }
}

impl From<Vec<Channel>> for ChannelSet {
    fn from(v: Vec<Channel>) -> Self {
        ChannelSet::only(&v)
    }
}

/// Parses comma-separated names: `wm,em,pm` or `working,episodic,persona`.
impl FromStr for ChannelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = ChannelSet::none();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set = set.with(part.parse()?);
        }
        if set.is_empty() {
            return Err(Error::invalid("at least one channel is required"));
        }
        Ok(set)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    /// `None` disables trimming.
    pub max_tokens: Option<usize>,
    pub channel_order: ChannelOrder,
}

impl BudgetPolicy {
    pub fn new(max_tokens: usize, channel_order: ChannelOrder) -> Result<Self> {
        if max_tokens < MIN_BUDGET {
            return Err(Error::invalid(format!(
                "budget must be at least {MIN_BUDGET} tokens, got {max_tokens}"
            )));
        }
        Ok(BudgetPolicy { max_tokens: Some(max_tokens), channel_order })
    }

    pub fn unlimited(channel_order: ChannelOrder) -> Self {
        BudgetPolicy { max_tokens: None, channel_order }
    }

    /// Any positive cap, skipping the minimum check. For ablations and
    /// tests of the trim rule on tiny fixtures.
    pub fn exact(max_tokens: usize, channel_order: ChannelOrder) -> Self {
        BudgetPolicy { max_tokens: Some(max_tokens), channel_order }
    }

    pub fn from_config(config: &EngineConfig) -> Self {
        BudgetPolicy { max_tokens: Some(config.max_tokens), channel_order: config.channel_order }
    }

    fn blocks(&self) -> [Channel; 3] {
        match self.channel_order {
            ChannelOrder::PersonaFirst => [Channel::Persona, Channel::Working, Channel::Episodic],
            ChannelOrder::WorkingFirst => [Channel::Working, Channel::Episodic, Channel::Persona],
        }
    }
}

/// Rendered tokens per channel after trimming.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBreakdown {
    pub persona: usize,
    pub working: usize,
    pub episodic: usize,
    /// Raw-history lines in the baseline mode.
    pub raw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalBundle {
    pub query: String,
    pub channels: ChannelSet,
    pub working_topics: Vec<Scored<String>>,
    pub working_ids: BTreeSet<InteractionId>,
    pub episodic_clue: Option<String>,
    pub episodic_clues: Vec<String>,
    pub episodic_ids: BTreeSet<InteractionId>,
    pub persona_entries: Vec<RetrievedEntry>,
    /// Raw-history hits, best first. Empty outside the baseline mode.
    pub raw_hits: Vec<Scored<InteractionId>>,
    pub merged_context: String,
    pub token_count: usize,
    pub channel_breakdown: ChannelBreakdown,
    pub max_tokens: Option<usize>,
    /// Items that did not fit the budget.
    pub dropped_items: usize,
    /// Interactions rendered into the context, in render order.
    pub rendered_ids: Vec<InteractionId>,
}

impl RetrievalBundle {
    fn empty(query: &str, channels: ChannelSet, budget: &BudgetPolicy) -> Self {
        RetrievalBundle {
            query: query.to_string(),
            channels,
            working_topics: Vec::new(),
            working_ids: BTreeSet::new(),
            episodic_clue: None,
            episodic_clues: Vec::new(),
            episodic_ids: BTreeSet::new(),
            persona_entries: Vec::new(),
            raw_hits: Vec::new(),
            merged_context: String::new(),
            token_count: 0,
            channel_breakdown: ChannelBreakdown::default(),
            max_tokens: budget.max_tokens,
            dropped_items: 0,
            rendered_ids: Vec::new(),
        }
    }
}

/// Whitespace-and-punctuation token count, a rough stand-in for model
/// tokenizers. Each whitespace-separated chunk counts 1 for its core plus 1
/// per leading or trailing punctuation character, so `don't` is 1 token and
/// `(hello),` is 4.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace()
        .map(|chunk| {
            let is_punct = |c: char| !c.is_alphanumeric();
            let lead = chunk.chars().take_while(|c| is_punct(*c)).count();
            let total = chunk.chars().count();
            if lead == total {
                return total;
            }
            let trail = chunk.chars().rev().take_while(|c| is_punct(*c)).count();
            lead + trail + 1
        })
        .sum()
}

fn one_line(text: &str) -> String {
    if text.contains(['\n', '\r']) {
        text.split(['\n', '\r']).filter(|l| !l.trim().is_empty()).collect::<Vec<_>>().join(" ")
    } else {
        text.to_string()
    }
}

pub fn render_interaction(it: &Interaction) -> String {
    format!(
        "[#{} {} {}] {}",
        it.id,
        it.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
        it.role,
        one_line(&it.text)
    )
}

pub fn render_entry(entry: &RetrievedEntry) -> String {
    let tag = match entry.kind {
        EntryKind::Fact => "fact",
        EntryKind::Attribute => "attr",
    };
    format!("[{tag}] {}", one_line(&entry.text))
}

/// Embeddings of every logged turn, for the raw-history baseline.
#[derive(Debug, Clone, Default)]
pub struct RawIndex {
    vectors: Vec<(InteractionId, Embedding)>,
}

impl RawIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn add(&mut self, it: &Interaction, embedder: &dyn EmbeddingProvider) -> Result<()> {
        self.vectors.push((it.id, embedder.embed(&it.text)?));
        Ok(())
    }

    pub fn vectors(&self) -> &[(InteractionId, Embedding)] {
        &self.vectors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedOp {
    pub kind: EntryKind,
    pub item: String,
    pub op: MemoryOp,
    /// The entry added or updated; `None` for Ignore.
    pub entry: Option<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodeOutcome {
    pub interaction: Interaction,
    /// `None` for assistant turns.
    pub annotation: Option<Annotation>,
    pub ops: Vec<AppliedOp>,
    pub compaction: Option<CompactionReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    #[serde(with = "millis")]
    pub retrieval: Duration,
    #[serde(with = "millis")]
    pub respond: Duration,
}

mod millis {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub response: String,
    pub bundle: RetrievalBundle,
    pub timing: Timing,
}

/// A failed answer. The bundle is present when retrieval succeeded and
/// only the responder failed.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct AnswerError {
    #[source]
    pub error: Error,
    pub bundle: Option<Box<RetrievalBundle>>,
}

impl From<Error> for AnswerError {
    fn from(error: Error) -> Self {
        AnswerError { error, bundle: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatTurn {
    pub answer: Answer,
    pub query_turn: EncodeOutcome,
    pub reply_turn: EncodeOutcome,
}

pub struct Engine {
    config: EngineConfig,
    analyzer: Arc<dyn Analyzer>,
    embedder: Arc<dyn EmbeddingProvider>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("analyzer", &self.analyzer.id())
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

enum Item<'a> {
    Entry(&'a RetrievedEntry),
    Turn(Channel, &'a Interaction),
    Raw(&'a Interaction),
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        analyzer: Arc<dyn Analyzer>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Engine { config, analyzer, embedder })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn analyzer(&self) -> &dyn Analyzer {
        &*self.analyzer
    }

    pub fn embedder(&self) -> &dyn EmbeddingProvider {
        &*self.embedder
    }

    pub fn default_budget(&self) -> BudgetPolicy {
        BudgetPolicy::from_config(&self.config)
    }

    /// Appends a turn and indexes it.
    ///
    /// User turns are annotated; the topic goes to working memory, the words
    /// to episodic memory, and each extracted fact and attribute is curated
    /// into the persona. A malformed annotation degrades to the fallback
    /// topic with the persona untouched. Provider errors before the append
    /// leave `mem` unchanged.
    pub fn encode_interaction(
        &self,
        mem: &mut UserMemory,
        role: Role,
        text: &str,
        timestamp: DateTime<Utc>,
        session_id: Option<String>,
    ) -> Result<EncodeOutcome> {
        if text.trim().is_empty() {
            return Err(Error::invalid("interaction text is blank"));
        }
        if role == Role::Assistant {
            return self.encode_assistant(mem, text, timestamp, session_id);
        }
        let mut warnings = Vec::new();
        let (annotation, parsed) = match self.analyzer.annotate(text) {
            Ok(a) => (a, true),
            Err(Error::Parse(msg)) => {
                tracing::warn!(%msg, "annotation failed; indexing with fallback topic");
                warnings.push(format!("annotation failed: {msg}"));
                (Annotation::fallback(), false)
            }
            Err(e) => return Err(e),
        };
        let topic_vector = mem.topic_index.prepare_vector(&annotation.topic, &*self.embedder)?;
        let stored = self.stored_text(text, &annotation);
        let interaction = mem.append_interaction(role, &stored, timestamp, session_id)?;
        let id = interaction.id;
        mem.topic_index.insert(annotation.topic.clone(), id, topic_vector)?;
        mem.clue_index.index_clues(id, &tokenize(text));

        let mut ops = Vec::new();
        if parsed {
            let items = annotation
                .facts
                .iter()
                .map(|f| (EntryKind::Fact, f))
                .chain(annotation.attributes.iter().map(|a| (EntryKind::Attribute, a)));
            for (kind, item) in items {
                if item.trim().is_empty() {
                    continue;
                }
                match self.integrate(mem, kind, item, id, timestamp) {
                    Ok(op) => ops.push(op),
                    Err(e) => {
                        tracing::warn!(error = %e, ?kind, "persona update skipped");
                        warnings.push(format!("persona update skipped for {item:?}: {e}"));
                    }
                }
            }
        }
        let compaction = self.maybe_compact(mem, timestamp, &mut warnings);
        Ok(EncodeOutcome {
            interaction,
            annotation: Some(annotation),
            ops,
            compaction,
            warnings,
        })
    }

    fn stored_text(&self, text: &str, annotation: &Annotation) -> String {
        if self.config.retain_raw_log {
            text.to_string()
        } else if annotation.summary.trim().is_empty() {
            "[redacted]".to_string()
        } else {
            annotation.summary.clone()
        }
    }

    fn encode_assistant(
        &self,
        mem: &mut UserMemory,
        text: &str,
        timestamp: DateTime<Utc>,
        session_id: Option<String>,
    ) -> Result<EncodeOutcome> {
        let topic = if self.config.index_assistant_turns {
            last_user_topic(mem)
        } else {
            None
        };
        let stored = if self.config.retain_raw_log { text } else { "[redacted]" };
        let interaction = mem.append_interaction(Role::Assistant, stored, timestamp, session_id)?;
        if self.config.index_assistant_turns {
            if let Some(topic) = topic {
                mem.topic_index.insert(topic, interaction.id, None)?;
            }
            mem.clue_index.index_clues(interaction.id, &tokenize(text));
        }
        Ok(EncodeOutcome {
            interaction,
            annotation: None,
            ops: Vec::new(),
            compaction: None,
            warnings: Vec::new(),
        })
    }

    /// Runs one extracted item through decide + apply. The analyzer sees the
    /// `op_candidates` most similar existing entries, in id order.
    fn integrate(
        &self,
        mem: &mut UserMemory,
        kind: EntryKind,
        item: &str,
        source: InteractionId,
        at: DateTime<Utc>,
    ) -> Result<AppliedOp> {
        let entries = mem.persona.entries(kind);
        let existing: Vec<(EntryId, &str)> = if entries.len() <= self.config.op_candidates {
            entries.iter().map(|e| (e.id, e.text.as_str())).collect()
        } else {
            let q = self.embedder.embed(item)?;
            let mut ids: Vec<EntryId> =
                top_k(entries.iter().map(|e| (e.id, &e.vector)), &q, self.config.op_candidates)?
                    .into_iter()
                    .map(|s| s.key)
                    .collect();
            ids.sort_unstable();
            ids.iter()
                .map(|id| {
                    let pos = entries.binary_search_by_key(id, |e| e.id).expect("id from list");
                    (*id, entries[pos].text.as_str())
                })
                .collect()
        };
        let op = match kind {
            EntryKind::Fact => self.analyzer.decide_fact_op(item, &existing)?,
            EntryKind::Attribute => self.analyzer.decide_attribute_op(item, &existing)?,
        };
        let (op, outcome) = match mem.persona.apply_op(kind, &op, source, at, &*self.embedder) {
            Err(Error::OpTargetMissing(target)) => {
                tracing::warn!(target, "update target missing; adding instead");
                let add = MemoryOp::add(op.payload);
                let outcome = mem.persona.apply_op(kind, &add, source, at, &*self.embedder)?;
                (add, outcome)
            }
            other => (op, other?),
        };
        let entry = match outcome {
            ApplyOutcome::Added(id) | ApplyOutcome::Updated(id) => Some(id),
            ApplyOutcome::Ignored => None,
        };
        Ok(AppliedOp { kind, item: item.to_string(), op, entry })
    }

    fn maybe_compact(
        &self,
        mem: &mut UserMemory,
        at: DateTime<Utc>,
        warnings: &mut Vec<String>,
    ) -> Option<CompactionReport> {
        let threshold = self.config.compaction_threshold;
        if threshold == 0 || mem.attributes_since_compaction() < threshold {
            return None;
        }
        match self.compact(mem, at) {
            Ok(report) => Some(report),
            Err(e) => {
                tracing::warn!(error = %e, "compaction failed");
                warnings.push(format!("compaction failed: {e}"));
                None
            }
        }
    }

    /// Clusters and merges the attribute list.
    pub fn compact(&self, mem: &mut UserMemory, at: DateTime<Utc>) -> Result<CompactionReport> {
        mem.persona.compact_attributes(
            &*self.analyzer,
            &*self.embedder,
            self.config.cluster_min_similarity,
            at,
        )
    }

    /// Queries the enabled channels and renders their results into one
    /// budget-trimmed context. Read-only.
    pub fn retrieve(
        &self,
        mem: &UserMemory,
        query: &str,
        channels: ChannelSet,
        budget: &BudgetPolicy,
    ) -> Result<RetrievalBundle> {
        if query.trim().is_empty() {
            return Err(Error::invalid("query is empty"));
        }
        let mut bundle = RetrievalBundle::empty(query, channels, budget);
        if channels.is_empty() {
            return Ok(bundle);
        }
        let vector = if channels.contains(Channel::Working) || channels.contains(Channel::Persona) {
            Some(self.embedder.embed(query)?)
        } else {
            None
        };
        let working = || -> Result<WorkingResult> {
            match (&vector, channels.contains(Channel::Working)) {
                (Some(v), true) => {
                    mem.topic_index.retrieve(v, self.config.k_topics, self.config.min_similarity)
                }
                _ => Ok(WorkingResult::default()),
            }
        };
        let persona = || -> Result<Vec<RetrievedEntry>> {
            match (&vector, channels.contains(Channel::Persona)) {
                (Some(v), true) => mem.persona.retrieve(v, self.config.k_facts, self.config.k_attributes),
                _ => Ok(Vec::new()),
            }
        };
        let episodic = || -> EpisodicResult {
            if channels.contains(Channel::Episodic) {
                mem.clue_index.retrieve_top(&tokenize(query), self.config.clue_count)
            } else {
                EpisodicResult::default()
            }
        };
        let (w, e, p) = if self.config.parallel_retrieval && channels.iter().count() > 1 {
            std::thread::scope(|s| {
                let w = s.spawn(working);
                let p = s.spawn(persona);
                let e = episodic();
                (
                    w.join().expect("working retrieval panicked"),
                    e,
                    p.join().expect("persona retrieval panicked"),
                )
            })
        } else {
            (working(), episodic(), persona())
        };
        let w = w?;
        let p = p?;
        bundle.working_topics = w.topics;
        bundle.working_ids = w.ids;
        bundle.episodic_clue = e.clue().map(str::to_string);
        bundle.episodic_clues = e.clues;
        bundle.episodic_ids = e.ids;
        bundle.persona_entries = p;

        let mut seen = BTreeSet::new();
        let mut items: Vec<Item<'_>> = Vec::new();
        for channel in budget.blocks() {
            if !channels.contains(channel) {
                continue;
            }
            match channel {
                Channel::Persona => items.extend(bundle.persona_entries.iter().map(Item::Entry)),
                Channel::Working | Channel::Episodic => {
                    let ids = if channel == Channel::Working {
                        &bundle.working_ids
                    } else {
                        &bundle.episodic_ids
                    };
                    for id in ids {
                        if seen.insert(*id) {
                            if let Some(it) = mem.interaction(*id) {
                                items.push(Item::Turn(channel, it));
                            }
                        }
                    }
                }
            }
        }
        let rendered = assemble(items, budget.max_tokens);
        apply_rendering(&mut bundle, rendered);
        Ok(bundle)
    }

    /// The baseline: top-`raw_k` logged turns by embedding similarity to the
    /// query, assistant turns included, rendered best first.
    pub fn retrieve_raw(
        &self,
        mem: &UserMemory,
        raw: &RawIndex,
        query: &str,
        budget: &BudgetPolicy,
    ) -> Result<RetrievalBundle> {
        if query.trim().is_empty() {
            return Err(Error::invalid("query is empty"));
        }
        let mut bundle = RetrievalBundle::empty(query, ChannelSet::none(), budget);
        if raw.is_empty() {
            return Ok(bundle);
        }
        let q = self.embedder.embed(query)?;
        bundle.raw_hits = top_k(raw.vectors.iter().map(|(id, v)| (*id, v)), &q, self.config.raw_k)?;
        let items = bundle
            .raw_hits
            .iter()
            .filter_map(|s| mem.interaction(s.key))
            .map(Item::Raw)
            .collect();
        let rendered = assemble(items, budget.max_tokens);
        apply_rendering(&mut bundle, rendered);
        Ok(bundle)
    }

    /// Retrieve, then respond. Nothing is written to memory.
    pub fn answer(
        &self,
        mem: &UserMemory,
        query: &str,
        channels: ChannelSet,
        budget: &BudgetPolicy,
    ) -> Result<Answer, AnswerError> {
        let start = Instant::now();
        let bundle = self.retrieve(mem, query, channels, budget)?;
        self.respond_to(bundle, start.elapsed())
    }

    /// Baseline counterpart of [`answer`](Self::answer).
    pub fn answer_raw(
        &self,
        mem: &UserMemory,
        raw: &RawIndex,
        query: &str,
        budget: &BudgetPolicy,
    ) -> Result<Answer, AnswerError> {
        let start = Instant::now();
        let bundle = self.retrieve_raw(mem, raw, query, budget)?;
        self.respond_to(bundle, start.elapsed())
    }

    fn respond_to(&self, bundle: RetrievalBundle, retrieval: Duration) -> Result<Answer, AnswerError> {
        let start = Instant::now();
        match self.analyzer.respond(&bundle.merged_context, &bundle.query) {
            Ok(response) => Ok(Answer {
                response,
                bundle,
                timing: Timing { retrieval, respond: start.elapsed() },
            }),
            Err(error) => Err(AnswerError { error, bundle: Some(Box::new(bundle)) }),
        }
    }

    /// A conversational turn: answer from memory as it stood before the
    /// query, then record the query and the reply.
    pub fn chat(
        &self,
        mem: &mut UserMemory,
        query: &str,
        channels: ChannelSet,
        budget: &BudgetPolicy,
        timestamp: DateTime<Utc>,
        session_id: Option<String>,
    ) -> Result<ChatTurn, AnswerError> {
        let answer = self.answer(mem, query, channels, budget)?;
        let query_turn =
            self.encode_interaction(mem, Role::User, query, timestamp, session_id.clone())?;
        let reply_turn =
            self.encode_interaction(mem, Role::Assistant, &answer.response, timestamp, session_id)?;
        Ok(ChatTurn { answer, query_turn, reply_turn })
    }
}

/// Topic of the most recent user turn, found through the topic index.
fn last_user_topic(mem: &UserMemory) -> Option<String> {
    let last_user = mem.interactions().iter().rev().find(|it| it.role == Role::User)?.id;
    mem.topic_index
        .topics()
        .find(|t| mem.topic_index.interactions(t).is_some_and(|ids| ids.contains(&last_user)))
        .map(str::to_string)
}

struct Rendered {
    lines: Vec<String>,
    breakdown: ChannelBreakdown,
    token_count: usize,
    dropped: usize,
    ids: Vec<InteractionId>,
}

/// Keeps the longest prefix of `items` fitting the budget. Since items are
/// grouped by channel in priority order, this drops whole items from the end
/// of the lowest-priority channel first.
fn assemble(items: Vec<Item<'_>>, max_tokens: Option<usize>) -> Rendered {
    let mut out = Rendered {
        lines: Vec::new(),
        breakdown: ChannelBreakdown::default(),
        token_count: 0,
        dropped: 0,
        ids: Vec::new(),
    };
    let total = items.len();
    for (i, item) in items.into_iter().enumerate() {
        let line = match &item {
            Item::Entry(e) => render_entry(e),
            Item::Turn(_, it) | Item::Raw(it) => render_interaction(it),
        };
        let tokens = count_tokens(&line);
        if max_tokens.is_some_and(|max| out.token_count + tokens > max) {
            out.dropped = total - i;
            break;
        }
        out.token_count += tokens;
        match item {
            Item::Entry(_) => out.breakdown.persona += tokens,
            Item::Turn(Channel::Working, it) => {
                out.breakdown.working += tokens;
                out.ids.push(it.id);
            }
            Item::Turn(_, it) => {
                out.breakdown.episodic += tokens;
                out.ids.push(it.id);
            }
            Item::Raw(it) => {
                out.breakdown.raw += tokens;
                out.ids.push(it.id);
            }
        }
        out.lines.push(line);
    }
    out
}

fn apply_rendering(bundle: &mut RetrievalBundle, r: Rendered) {
    bundle.merged_context = r.lines.join("\n");
    bundle.token_count = r.token_count;
    bundle.channel_breakdown = r.breakdown;
    bundle.dropped_items = r.dropped;
    bundle.rendered_ids = r.ids;
    debug_assert_eq!(count_tokens(&bundle.merged_context), bundle.token_count);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{ModelAnalyzer, RuleBasedAnalyzer, ScriptedModel, SplitAnalyzer, EMPTY_CONTEXT};
    use crate::embedding::HashedBowEmbedder;
    use crate::memory::OpKind;
    use proptest::prelude::*;

    fn ts(i: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(1_683_540_000 + i * 3600, 0).unwrap()
    }

    fn rule_engine(config: EngineConfig) -> Engine {
        Engine::new(
            config,
            Arc::new(RuleBasedAnalyzer::new()),
            Arc::new(HashedBowEmbedder::default()),
        )
        .unwrap()
    }

    const JAZZ: &str = "Last week's jazz workshop helped me overcome performance anxiety since the tutors are so patients.";
    const JAZZ_REPLY: &str = r#"{"text": "x", "tags": {"topic": ["music workshop"], "attitude": ["Positive"], "reason": ["The tutors can teach the use patiently."], "facts": ["join jazz workshop last week"], "attributes": ["user worrys about jazz performance"]}, "summary": "Jazz workshop helped the user overcome performance anxiety.", "rationale": "r"}"#;

    fn scripted_engine(model: ScriptedModel) -> Engine {
        let annot = Arc::new(ModelAnalyzer::new(model));
        let rules = Arc::new(RuleBasedAnalyzer::new());
        Engine::new(
            EngineConfig::default(),
            Arc::new(SplitAnalyzer::new(annot.clone(), rules, annot)),
            Arc::new(HashedBowEmbedder::default()),
        )
        .unwrap()
    }

    #[test]
    fn count_tokens_examples() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("the cat sat"), 3);
        assert_eq!(count_tokens("don't stop"), 2);
        assert_eq!(count_tokens("(hello),"), 4);
        assert_eq!(count_tokens("..."), 3);
        assert_eq!(count_tokens(EMPTY_CONTEXT), 5);
        assert_eq!(count_tokens("[#1 2023-05-08T10:00:00Z user] Hi."), 8);
    }

    #[test]
    fn channel_set_parsing() {
        let s: ChannelSet = "wm,em".parse().unwrap();
        assert_eq!(s.names(), vec!["working", "episodic"]);
        assert_eq!("persona,working".parse::<ChannelSet>().unwrap().to_string(), "working,persona");
        assert!("".parse::<ChannelSet>().is_err());
        assert!("wm,xx".parse::<ChannelSet>().is_err());
        assert_eq!(serde_json::to_string(&ChannelSet::all()).unwrap(), r#"["working","episodic","persona"]"#);
    }

    #[test]
    fn budget_minimum() {
        assert!(BudgetPolicy::new(99, ChannelOrder::PersonaFirst).is_err());
        assert!(BudgetPolicy::new(100, ChannelOrder::PersonaFirst).is_ok());
    }

    #[test]
    fn jazz_encoding_updates_every_store() {
        let engine = scripted_engine(ScriptedModel::new().on_annotate(JAZZ, JAZZ_REPLY));
        let mut mem = UserMemory::new("alice").unwrap();
        let out = engine.encode_interaction(&mut mem, Role::User, JAZZ, ts(0), None).unwrap();
        assert_eq!(out.interaction.id, 1);
        assert_eq!(mem.topic_index().interactions("music workshop").unwrap(), &BTreeSet::from([1]));
        for w in ["jazz", "workshop", "helped", "overcome", "performance", "anxiety"] {
            assert_eq!(mem.clue_index().postings(w).unwrap(), &BTreeSet::from([1]), "{w}");
        }
        assert_eq!(mem.persona().facts()[0].text, "join jazz workshop last week");
        assert_eq!(mem.persona().attributes()[0].text, "user worrys about jazz performance");
        assert_eq!(mem.attributes_since_compaction(), 1);
        mem.check_integrity().unwrap();
    }

    #[test]
    fn duplicate_ingestion_only_adds_an_id() {
        let engine = rule_engine(EngineConfig::default());
        let mut mem = UserMemory::new("alice").unwrap();
        let text = "I joined a jazz workshop. I love vintage decor.";
        engine.encode_interaction(&mut mem, Role::User, text, ts(0), None).unwrap();
        let before = mem.clone();
        let out = engine.encode_interaction(&mut mem, Role::User, text, ts(1), None).unwrap();
        assert!(out.ops.iter().all(|o| o.op.kind == OpKind::Ignore));
        assert_eq!(mem.persona().facts(), before.persona().facts());
        assert_eq!(mem.persona().attributes(), before.persona().attributes());
        assert_eq!(mem.topic_index().len(), before.topic_index().len());
        assert_eq!(mem.clue_index().len(), before.clue_index().len());
        for w in mem.clue_index().words() {
            let ids: Vec<_> = mem.clue_index().postings(w).unwrap().iter().copied().collect();
            assert_eq!(ids, vec![1, 2]);
        }
    }

    #[test]
    fn malformed_annotation_degrades() {
        let engine = scripted_engine(ScriptedModel::new().on_annotate("I adopted a puppy", "garbage"));
        let mut mem = UserMemory::new("alice").unwrap();
        let out = engine.encode_interaction(&mut mem, Role::User, "I adopted a puppy", ts(0), None).unwrap();
        assert_eq!(out.annotation.unwrap().topic, "general");
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(mem.topic_index().topics().collect::<Vec<_>>(), vec!["general"]);
        assert!(mem.clue_index().postings("puppy").is_some());
        assert!(mem.persona().facts().is_empty() && mem.persona().attributes().is_empty());
    }

    #[test]
    fn unscripted_annotation_is_fatal_and_atomic() {
        let engine = scripted_engine(ScriptedModel::new());
        let mut mem = UserMemory::new("alice").unwrap();
        assert!(engine.encode_interaction(&mut mem, Role::User, "hello there", ts(0), None).is_err());
        assert_eq!(mem, UserMemory::new("alice").unwrap());
    }

    #[test]
    fn assistant_turns_are_logged_not_indexed_by_default() {
        let engine = rule_engine(EngineConfig::default());
        let mut mem = UserMemory::new("alice").unwrap();
        engine.encode_interaction(&mut mem, Role::User, "I play chess on weekends", ts(0), None).unwrap();
        engine.encode_interaction(&mut mem, Role::Assistant, "Chess is a wonderful hobby", ts(1), None).unwrap();
        assert_eq!(mem.interactions().len(), 2);
        assert!(mem.clue_index().postings("wonderful").is_none());

        let engine = rule_engine(EngineConfig { index_assistant_turns: true, ..Default::default() });
        let mut mem = UserMemory::new("alice").unwrap();
        engine.encode_interaction(&mut mem, Role::User, "I play chess on weekends", ts(0), None).unwrap();
        engine.encode_interaction(&mut mem, Role::Assistant, "Chess is a wonderful hobby", ts(1), None).unwrap();
        assert_eq!(mem.clue_index().postings("wonderful").unwrap(), &BTreeSet::from([2]));
        let topic = mem.topic_index().topics().next().unwrap().to_string();
        assert_eq!(mem.topic_index().interactions(&topic).unwrap(), &BTreeSet::from([1, 2]));
        mem.check_integrity().unwrap();
    }

    #[test]
    fn raw_log_retention_off_keeps_summary() {
        let engine = rule_engine(EngineConfig { retain_raw_log: false, ..Default::default() });
        let mut mem = UserMemory::new("alice").unwrap();
        engine
            .encode_interaction(&mut mem, Role::User, "I moved to Lisbon. My secret is 1234.", ts(0), None)
            .unwrap();
        assert_eq!(mem.interactions()[0].text, "I moved to Lisbon.");
        assert!(mem.clue_index().postings("1234").is_some());
    }

    #[test]
    fn empty_memory_gives_empty_bundle_and_marked_context() {
        let model = ScriptedModel::new().on_respond("", "what do I like?", "No idea yet.");
        let engine = scripted_engine(model);
        let mem = UserMemory::new("alice").unwrap();
        let budget = engine.default_budget();
        let bundle = engine.retrieve(&mem, "what do I like?", ChannelSet::all(), &budget).unwrap();
        assert_eq!(bundle.merged_context, "");
        assert_eq!(bundle.token_count, 0);
        let answer = engine.answer(&mem, "what do I like?", ChannelSet::all(), &budget).unwrap();
        assert_eq!(answer.response, "No idea yet.");
    }

    #[test]
    fn respond_failure_keeps_bundle() {
        let engine = scripted_engine(ScriptedModel::new());
        let mem = UserMemory::new("alice").unwrap();
        let err = engine
            .answer(&mem, "anything?", ChannelSet::all(), &engine.default_budget())
            .unwrap_err();
        assert!(matches!(err.error, Error::Unscripted { .. }));
        assert_eq!(err.bundle.unwrap().query, "anything?");
    }

    fn sample_memory(engine: &Engine) -> UserMemory {
        let mut mem = UserMemory::new("alice").unwrap();
        let turns = [
            "I joined a jazz workshop last week.",
            "Jazz practice is going well, I love the saxophone.",
            "My dog is a beagle named Max.",
            "I adopted Max from a shelter in Oakland.",
            "I stopped playing basketball because of stress.",
            "Jazz workshop tutors are very patient.",
        ];
        for (i, t) in turns.iter().enumerate() {
            engine.encode_interaction(&mut mem, Role::User, t, ts(i as i64), None).unwrap();
        }
        mem
    }

    #[test]
    fn rendering_order_and_dedup() {
        let engine = rule_engine(EngineConfig::default());
        let mem = sample_memory(&engine);
        let budget = BudgetPolicy::unlimited(ChannelOrder::PersonaFirst);
        let b = engine.retrieve(&mem, "how is my jazz practice going", ChannelSet::all(), &budget).unwrap();
        let lines: Vec<&str> = b.merged_context.lines().collect();
        let first_turn = lines.iter().position(|l| l.starts_with("[#")).unwrap();
        assert!(lines[..first_turn].iter().all(|l| l.starts_with("[fact]") || l.starts_with("[attr]")));
        assert!(lines[first_turn..].iter().all(|l| l.starts_with("[#")));
        let mut ids = b.rendered_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), b.rendered_ids.len());
        let union: BTreeSet<_> = b.working_ids.union(&b.episodic_ids).copied().collect();
        assert_eq!(ids, union.into_iter().collect::<Vec<_>>());

        let working_first = BudgetPolicy::unlimited(ChannelOrder::WorkingFirst);
        let p = engine.retrieve(&mem, "how is my jazz practice going", ChannelSet::all(), &working_first).unwrap();
        assert!(p.merged_context.starts_with("[#"));
        assert_eq!(p.token_count, b.token_count);
    }

    #[test]
    fn parallel_equals_sequential() {
        let par = rule_engine(EngineConfig::default());
        let seq = rule_engine(EngineConfig { parallel_retrieval: false, ..Default::default() });
        let mem = sample_memory(&par);
        for q in ["jazz saxophone", "tell me about Max", "basketball stress", "nothing matches zzz"] {
            let budget = par.default_budget();
            assert_eq!(
                par.retrieve(&mem, q, ChannelSet::all(), &budget).unwrap(),
                seq.retrieve(&mem, q, ChannelSet::all(), &budget).unwrap()
            );
        }
    }

    #[test]
    fn channel_union_composes() {
        let engine = rule_engine(EngineConfig::default());
        let mem = sample_memory(&engine);
        let budget = BudgetPolicy::unlimited(ChannelOrder::PersonaFirst);
        let q = "jazz workshop tutors";
        let w = engine.retrieve(&mem, q, ChannelSet::only(&[Channel::Working]), &budget).unwrap();
        let e = engine.retrieve(&mem, q, ChannelSet::only(&[Channel::Episodic]), &budget).unwrap();
        let we = engine
            .retrieve(&mem, q, ChannelSet::only(&[Channel::Working, Channel::Episodic]), &budget)
            .unwrap();
        assert_eq!(we.working_ids, w.working_ids);
        assert_eq!(we.episodic_ids, e.episodic_ids);
        let rendered: BTreeSet<_> = we.rendered_ids.iter().copied().collect();
        let expected: BTreeSet<_> = w.working_ids.union(&e.episodic_ids).copied().collect();
        assert_eq!(rendered, expected);
    }

    #[test]
    fn trimming_drops_from_the_end() {
        let engine = rule_engine(EngineConfig::default());
        let mem = sample_memory(&engine);
        let q = "how is my jazz practice going";
        let full = engine
            .retrieve(&mem, q, ChannelSet::all(), &BudgetPolicy::unlimited(ChannelOrder::PersonaFirst))
            .unwrap();
        let cap = full.token_count - 1;
        let cut = engine
            .retrieve(&mem, q, ChannelSet::all(), &BudgetPolicy::exact(cap, ChannelOrder::PersonaFirst))
            .unwrap();
        assert!(cut.token_count <= cap);
        assert!(full.merged_context.starts_with(&cut.merged_context));
        assert!(cut.dropped_items >= 1);
    }

    #[test]
    fn chat_retrieves_before_indexing() {
        let engine = rule_engine(EngineConfig::default());
        let mut mem = sample_memory(&engine);
        let q = "Should I buy a new saxophone reed?";
        let turn = engine
            .chat(&mut mem, q, ChannelSet::all(), &engine.default_budget(), ts(10), None)
            .unwrap();
        let own = turn.query_turn.interaction.id;
        assert!(!turn.answer.bundle.rendered_ids.contains(&own));
        assert!(!turn.answer.bundle.episodic_ids.contains(&own));
        assert!(mem.clue_index().postings("reed").unwrap().contains(&own));
        assert_eq!(turn.answer.bundle.episodic_clue.as_deref(), Some("saxophone"));
        assert_eq!(mem.interactions().last().unwrap().role, Role::Assistant);
    }

    #[test]
    fn raw_retrieval_matches_brute_force() {
        let engine = rule_engine(EngineConfig { raw_k: 3, ..Default::default() });
        let mem = sample_memory(&engine);
        let mut raw = RawIndex::default();
        for it in mem.interactions() {
            raw.add(it, engine.embedder()).unwrap();
        }
        let q = "jazz workshop";
        let b = engine
            .retrieve_raw(&mem, &raw, q, &BudgetPolicy::unlimited(ChannelOrder::PersonaFirst))
            .unwrap();
        let qv = engine.embedder().embed(q).unwrap();
        let mut oracle: Vec<(f64, u64)> = mem
            .interactions()
            .iter()
            .map(|it| {
                let v = engine.embedder().embed(&it.text).unwrap();
                (crate::embedding::cosine_similarity(&qv, &v).unwrap(), it.id)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<u64> = oracle.iter().take(3).map(|x| x.1).collect();
        assert_eq!(b.raw_hits.iter().map(|s| s.key).collect::<Vec<_>>(), want);
        assert_eq!(b.rendered_ids, want);
    }

    #[test]
    fn compaction_triggers_at_threshold() {
        let engine = rule_engine(EngineConfig { compaction_threshold: 3, ..Default::default() });
        let mut mem = UserMemory::new("alice").unwrap();
        let mut reports = 0;
        for (i, t) in ["I love jazz music.", "I love jazz music a lot.", "I am a nurse."].iter().enumerate() {
            let out = engine.encode_interaction(&mut mem, Role::User, t, ts(i as i64), None).unwrap();
            reports += out.compaction.is_some() as usize;
        }
        assert_eq!(reports, 1);
        assert_eq!(mem.attributes_since_compaction(), 0);
        mem.check_integrity().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn budget_is_never_exceeded(
            turns in proptest::collection::vec("[a-z]{2,7}( [a-z]{2,7}){1,12}", 1..25),
            query in "[a-z]{2,7}( [a-z]{2,7}){0,5}",
            budget in 100usize..4000,
        ) {
            let engine = rule_engine(EngineConfig::default());
            let mut mem = UserMemory::new("u").unwrap();
            for (i, t) in turns.iter().enumerate() {
                engine.encode_interaction(&mut mem, Role::User, &format!("I {t}"), ts(i as i64), None).unwrap();
            }
            let policy = BudgetPolicy::new(budget, ChannelOrder::PersonaFirst).unwrap();
            let b = engine.retrieve(&mem, &query, ChannelSet::all(), &policy).unwrap();
            prop_assert!(b.token_count <= budget);
            prop_assert_eq!(b.token_count, count_tokens(&b.merged_context));
            let again = engine.retrieve(&mem, &query, ChannelSet::all(), &policy).unwrap();
            prop_assert_eq!(b, again);
        }
    }
}
