//! The language-model side of the engine: interaction annotation, persona op
//! decisions, attribute merging and response generation.
//!
//! Three tiers implement [`Analyzer`]:
//! - [`RuleBasedAnalyzer`]: deterministic heuristics, never calls a model.
//! - [`ModelAnalyzer`] over [`ScriptedModel`]: canned replies for golden tests.
//! - [`ModelAnalyzer`] over [`RemoteChatModel`]: an HTTP chat-completion API.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::memory::{Annotation, Attitude, MemoryOp, OpKind};
use crate::persona::EntryId;
use crate::remote::{HttpClient, RemoteConfig};
use crate::text;

pub const UNDERSTAND_PROMPT: &str = include_str!("../prompts/understand_user_experience.txt");
pub const DECIDE_PROMPT: &str = include_str!("../prompts/decide_operation.txt");
pub const MERGE_PROMPT: &str = include_str!("../prompts/merge_cluster.txt");
pub const RESPOND_PROMPT: &str = include_str!("../prompts/respond.txt");

/// Judge prompts for report-personalization studies. Shipped for reference;
/// the engine never executes them.
pub mod judge_prompts {
    pub const GOAL_ALIGNMENT_CRITERIA: &str =
        include_str!("../prompts/judge/goal_alignment_criteria.txt");
    pub const CONTENT_ALIGNMENT_CRITERIA: &str =
        include_str!("../prompts/judge/content_alignment_criteria.txt");
    pub const PERSONALIZATION_SCORING: &str =
        include_str!("../prompts/judge/personalization_scoring.txt");
    pub const PERSONA_ALIGN_SCORE: &str = include_str!("../prompts/judge/persona_align_score.txt");
}

/// Context marker handed to the responder when retrieval found nothing.
pub const EMPTY_CONTEXT: &str = "(no memory retrieved)";

/// Number of extra attempts after a malformed annotation.
pub const ANNOTATE_REPROMPTS: u32 = 2;

pub trait Analyzer: Send + Sync {
    fn id(&self) -> &str;

    fn annotate(&self, text: &str) -> Result<Annotation>;

    fn decide_fact_op(&self, event: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp>;

    fn decide_attribute_op(&self, attribute: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp>;

    fn merge_cluster(&self, members: &[&str]) -> Result<String>;

    fn respond(&self, context: &str, query: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Annotate,
    DecideOpFact,
    DecideOpAttribute,
    MergeCluster,
    Respond,
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestKind::Annotate => "annotate",
            RequestKind::DecideOpFact => "decide_op_fact",
            RequestKind::DecideOpAttribute => "decide_op_attribute",
            RequestKind::MergeCluster => "merge_cluster",
            RequestKind::Respond => "respond",
        })
    }
}

/// One call to the language model. `payload` is a canonical text rendering
/// of the inputs and doubles as the lookup key for scripted replies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzerRequest {
    pub kind: RequestKind,
    pub payload: String,
    /// 0 for the first try, then 1, 2, ... on re-prompts.
    pub attempt: u32,
    vars: Vec<(&'static str, String)>,
}

impl AnalyzerRequest {
    pub fn annotate(text: &str) -> Self {
        AnalyzerRequest {
            kind: RequestKind::Annotate,
            payload: text.to_string(),
            attempt: 0,
            vars: vec![("message", text.to_string())],
        }
    }

    pub fn decide(kind: RequestKind, item: &str, existing: &[(EntryId, &str)]) -> Self {
        let listing = if existing.is_empty() {
            "(none)".to_string()
        } else {
            existing
                .iter()
                .map(|(id, t)| format!("[{id}] {t}"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let (list_name, item_name) = match kind {
            RequestKind::DecideOpFact => ("fact events", "fact event"),
            _ => ("attributes", "attribute"),
        };
        AnalyzerRequest {
            kind,
            payload: format!("item: {item}\nexisting:\n{listing}"),
            attempt: 0,
            vars: vec![
                ("list_name", list_name.into()),
                ("item_name", item_name.into()),
                ("item", item.into()),
                ("existing", listing),
            ],
        }
    }

    pub fn merge(members: &[&str]) -> Self {
        let joined = members.join("\n");
        AnalyzerRequest {
            kind: RequestKind::MergeCluster,
            payload: joined.clone(),
            attempt: 0,
            vars: vec![(
                "members",
                members.iter().map(|m| format!("- {m}")).collect::<Vec<_>>().join("\n"),
            )],
        }
    }

    pub fn respond(context: &str, query: &str) -> Self {
        let context = if context.trim().is_empty() {
            EMPTY_CONTEXT
        } else {
            context
        };
        AnalyzerRequest {
            kind: RequestKind::Respond,
            payload: format!("context:\n{context}\n\nquery: {query}"),
            attempt: 0,
            vars: vec![("context", context.into()), ("query", query.into())],
        }
    }

    fn retry(&self) -> Self {
        AnalyzerRequest {
            attempt: self.attempt + 1,
            ..self.clone()
        }
    }

    /// Fills the prompt template for this request kind.
    pub fn render_prompt(&self) -> String {
        let template = match self.kind {
            RequestKind::Annotate => UNDERSTAND_PROMPT,
            RequestKind::DecideOpFact | RequestKind::DecideOpAttribute => DECIDE_PROMPT,
            RequestKind::MergeCluster => MERGE_PROMPT,
            RequestKind::Respond => RESPOND_PROMPT,
        };
        fill_template(template, &self.vars)
    }
}

/// Python `str.format`-style substitution: `{name}` is replaced, `{{` and
/// `}}` become literal braces, any other brace is kept as is.
pub fn fill_template(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                if let Some((_, value)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(value);
                    rest = &tail[end + 1..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// Raw text-in, text-out model backend.
pub trait LanguageModel: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &AnalyzerRequest) -> Result<String>;
}

/// Test double answering from a fixed table. Unknown requests are errors.
#[derive(Debug, Default)]
pub struct ScriptedModel {
    replies: HashMap<(RequestKind, String), String>,
    any_context: HashMap<String, String>,
    calls: AtomicUsize,
}

impl ScriptedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, kind: RequestKind, payload: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert((kind, payload.into()), reply.into());
    }

    pub fn on_annotate(mut self, text: &str, reply: impl Into<String>) -> Self {
        self.insert(RequestKind::Annotate, text, reply);
        self
    }

    pub fn on_decide(
        mut self,
        kind: RequestKind,
        item: &str,
        existing: &[(EntryId, &str)],
        reply: impl Into<String>,
    ) -> Self {
        let req = AnalyzerRequest::decide(kind, item, existing);
        self.insert(kind, req.payload, reply);
        self
    }

    pub fn on_merge(mut self, members: &[&str], reply: impl Into<String>) -> Self {
        self.insert(RequestKind::MergeCluster, members.join("\n"), reply);
        self
    }

    /// Reply to `query` only when the context matches exactly.
    pub fn on_respond(mut self, context: &str, query: &str, reply: impl Into<String>) -> Self {
        let req = AnalyzerRequest::respond(context, query);
        self.insert(RequestKind::Respond, req.payload, reply);
        self
    }

    /// Reply to `query` whatever the context.
    pub fn on_respond_any(mut self, query: &str, reply: impl Into<String>) -> Self {
        self.any_context.insert(query.to_string(), reply.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LanguageModel for ScriptedModel {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &AnalyzerRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(reply) = self.replies.get(&(request.kind, request.payload.clone())) {
            return Ok(reply.clone());
        }
        if request.kind == RequestKind::Respond {
            let query = request.vars.iter().find(|(k, _)| *k == "query").map(|(_, v)| v);
            if let Some(reply) = query.and_then(|q| self.any_context.get(q)) {
                return Ok(reply.clone());
            }
        }
        Err(Error::Unscripted {
            kind: request.kind.to_string(),
            payload: request.payload.clone(),
        })
    }
}

/// OpenAI-style chat-completion endpoint: `{"model", "messages", "temperature"}`
/// → `choices[0].message.content`.
pub struct RemoteChatModel {
    id: String,
    client: HttpClient,
    temperature: f64,
}

impl RemoteChatModel {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        Ok(RemoteChatModel {
            id: format!("remote:{}", config.model),
            client: HttpClient::new(config)?,
            temperature: 0.0,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// The JSON body sent for `request`.
    pub fn request_body(&self, request: &AnalyzerRequest) -> Value {
        let mut messages = vec![serde_json::json!({
            "role": "user",
            "content": request.render_prompt(),
        })];
        if request.attempt > 0 {
            messages.push(serde_json::json!({
                "role": "user",
                "content": "Your previous reply could not be parsed. Reply with the JSON object only, exactly in the requested format.",
            }));
        }
        serde_json::json!({
            "model": self.client.config().model,
            "messages": messages,
            "temperature": self.temperature,
        })
    }
}

impl LanguageModel for RemoteChatModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &AnalyzerRequest) -> Result<String> {
        let value = self.client.post_json(&self.request_body(request))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse("chat response has no choices[0].message.content".into()))
    }
}

/// Analyzer backed by a [`LanguageModel`], parsing its replies.
pub struct ModelAnalyzer<M> {
    model: M,
}

impl<M: LanguageModel> ModelAnalyzer<M> {
    pub fn new(model: M) -> Self {
        ModelAnalyzer { model }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    fn decide(&self, kind: RequestKind, item: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        if item.trim().is_empty() {
            return Err(Error::invalid("item to integrate is empty"));
        }
        let reply = self.model.complete(&AnalyzerRequest::decide(kind, item, existing))?;
        let op = parse_operation(&reply, item)?;
        if op.kind == OpKind::Update {
            let target = op.target_id.expect("parsed update has a target");
            if !existing.iter().any(|(id, _)| *id == target) {
                tracing::warn!(target, "model chose update of unknown entry; adding instead");
                return Ok(MemoryOp::add(op.payload));
            }
        }
        Ok(op)
    }
}

impl<M: LanguageModel> Analyzer for ModelAnalyzer<M> {
    fn id(&self) -> &str {
        self.model.id()
    }

    fn annotate(&self, text: &str) -> Result<Annotation> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot annotate empty text"));
        }
        let mut request = AnalyzerRequest::annotate(text);
        loop {
            let reply = self.model.complete(&request)?;
            match parse_annotation(&reply) {
                Ok(a) => return Ok(a),
                Err(e) if request.attempt < ANNOTATE_REPROMPTS => {
                    tracing::warn!(attempt = request.attempt, error = %e, "malformed annotation; re-prompting");
                    request = request.retry();
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn decide_fact_op(&self, event: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        self.decide(RequestKind::DecideOpFact, event, existing)
    }

    fn decide_attribute_op(&self, attribute: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        self.decide(RequestKind::DecideOpAttribute, attribute, existing)
    }

    /// Provider failures and unusable replies fall back to the longest member.
    fn merge_cluster(&self, members: &[&str]) -> Result<String> {
        if members.is_empty() {
            return Err(Error::invalid("cannot merge an empty cluster"));
        }
        if members.len() == 1 {
            return Ok(members[0].to_string());
        }
        let reply = match self.model.complete(&AnalyzerRequest::merge(members)) {
            Ok(r) => parse_merge(&r),
            Err(e @ (Error::Provider { .. } | Error::Parse(_))) => Err(e),
            Err(e) => return Err(e),
        };
        match reply {
            Ok(text) => Ok(text),
            Err(e) => {
                tracing::warn!(error = %e, "merge failed; keeping longest member");
                Ok(longest(members).to_string())
            }
        }
    }

    fn respond(&self, context: &str, query: &str) -> Result<String> {
        if query.trim().is_empty() {
            return Err(Error::invalid("query is empty"));
        }
        let reply = self.model.complete(&AnalyzerRequest::respond(context, query))?;
        let reply = reply.trim();
        if reply.is_empty() {
            return Err(Error::Parse("empty response".into()));
        }
        Ok(reply.to_string())
    }
}

fn longest<'a>(members: &[&'a str]) -> &'a str {
    members
        .iter()
        .copied()
        .fold("", |best, m| if m.chars().count() > best.chars().count() { m } else { best })
}

/// The outermost `{ ... }` span of a reply, tolerating prose or code fences
/// around it.
fn json_object(reply: &str) -> Result<Value> {
    let start = reply.find('{');
    let end = reply.rfind('}');
    let (Some(start), Some(end)) = (start, end) else {
        return Err(Error::Parse("no JSON object in reply".into()));
    };
    if end < start {
        return Err(Error::Parse("no JSON object in reply".into()));
    }
    serde_json::from_str(&reply[start..=end]).map_err(|e| Error::Parse(e.to_string()))
}

/// A tag value given either as a string or a list of strings.
fn string_list(v: &Value, field: &str) -> Result<Vec<String>> {
    match v {
        Value::String(s) => Ok(if s.trim().is_empty() { vec![] } else { vec![s.trim().to_string()] }),
        Value::Array(items) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .map(|s| s.trim().to_string())
                    .ok_or_else(|| Error::Parse(format!("{field} must hold strings")))
            })
            .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
            .collect(),
        Value::Null => Ok(vec![]),
        _ => Err(Error::Parse(format!("{field} must be a string or list"))),
    }
}

fn required<'a>(obj: &'a Value, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Parse(format!("missing key {key:?}")))
}

/// Parses the extraction prompt's JSON reply:
/// `{text, tags: {topic, attitude, reason, facts, attributes}, summary, rationale}`.
pub fn parse_annotation(reply: &str) -> Result<Annotation> {
    let v = json_object(reply)?;
    required(&v, "text")?;
    let tags = required(&v, "tags")?;
    if !tags.is_object() {
        return Err(Error::Parse("tags must be an object".into()));
    }
    let topic = string_list(required(tags, "topic")?, "topic")?
        .into_iter()
        .next()
        .unwrap_or_else(|| Annotation::FALLBACK_TOPIC.to_string());
    let attitude = string_list(required(tags, "attitude")?, "attitude")?
        .first()
        .map_or(Attitude::None, |a| Attitude::parse_loose(a));
    let reason = string_list(required(tags, "reason")?, "reason")?.join(" ");
    let facts = string_list(required(tags, "facts")?, "facts")?;
    let attributes = string_list(required(tags, "attributes")?, "attributes")?;
    let text_field = |key: &str| -> Result<String> {
        Ok(string_list(required(&v, key)?, key)?.join(" "))
    };
    Ok(Annotation {
        topic,
        attitude,
        reason,
        facts,
        attributes,
        summary: text_field("summary")?,
        rationale: text_field("rationale")?,
    })
}

/// Parses `{"operation": add|ignore|update, "target_id": n, "text": ...}`.
pub fn parse_operation(reply: &str, item: &str) -> Result<MemoryOp> {
    let v = json_object(reply)?;
    let op = v
        .get("operation")
        .or_else(|| v.get("op"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse("missing operation".into()))?;
    let text = v
        .get("text")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .unwrap_or(item)
        .to_string();
    match op.trim().to_ascii_lowercase().as_str() {
        "add" => Ok(MemoryOp::add(text)),
        "ignore" => Ok(MemoryOp::ignore()),
        "update" => {
            let target = v
                .get("target_id")
                .and_then(|t| t.as_u64().or_else(|| t.as_str().and_then(|s| s.trim().parse().ok())))
                .ok_or_else(|| Error::Parse("update without a numeric target_id".into()))?;
            Ok(MemoryOp::update(target, text))
        }
        other => Err(Error::Parse(format!("unknown operation {other:?}"))),
    }
}

fn parse_merge(reply: &str) -> Result<String> {
    let text = match json_object(reply) {
        Ok(v) => v
            .get("attribute")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse("missing attribute".into()))?,
        Err(_) => reply.trim().trim_matches('"').to_string(),
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Parse("empty merged attribute".into()));
    }
    Ok(text.to_string())
}

const PREFERENCE_VERBS: [(&str, &str); 8] = [
    ("like", "likes"),
    ("love", "loves"),
    ("enjoy", "enjoys"),
    ("hate", "hates"),
    ("dislike", "dislikes"),
    ("prefer", "prefers"),
    ("adore", "adores"),
    ("detest", "detests"),
];

const POSITIVE_WORDS: [&str; 20] = [
    "love", "loved", "like", "liked", "enjoy", "enjoyed", "great", "happy", "glad", "excited",
    "amazing", "wonderful", "helped", "fun", "good", "awesome", "proud", "nice", "patient", "best",
];

const NEGATIVE_WORDS: [&str; 20] = [
    "hate", "hated", "dislike", "stress", "stressed", "sad", "angry", "terrible", "awful", "bad",
    "worried", "anxious", "anxiety", "tired", "annoyed", "upset", "worst", "afraid", "lonely",
    "frustrated",
];

/// Words skipped when picking a topic: time expressions and vague verbs.
const TOPIC_FILLER: [&str; 24] = [
    "last", "week", "weeks", "yesterday", "today", "tomorrow", "weekend", "month", "year", "day",
    "ago", "recently", "really", "also", "went", "go", "got", "get", "think", "feel", "felt",
    "thing", "things", "lot",
];

/// Contradicting word pairs; either side may appear in either text.
const ANTONYMS: [(&str, &str); 16] = [
    ("stop", "start"),
    ("stop", "resume"),
    ("stop", "return"),
    ("stop", "continue"),
    ("quit", "start"),
    ("quit", "return"),
    ("quit", "join"),
    ("leave", "join"),
    ("left", "joined"),
    ("like", "dislike"),
    ("like", "hate"),
    ("love", "hate"),
    ("enjoy", "hate"),
    ("enjoy", "dislike"),
    ("single", "married"),
    ("lose", "win"),
];

/// Deterministic analyzer used offline and in tests.
///
/// Normalization is lowercase, stopword removal (plus the word "user") and
/// Snowball stemming. Duplicates under normalization are ignored, antonym
/// contradictions on a shared subject become updates, everything else is
/// added.
pub struct RuleBasedAnalyzer {
    stemmer: Stemmer,
    antonyms: Vec<(String, String)>,
}

impl Default for RuleBasedAnalyzer {
    fn default() -> Self {
        Self::new()
    }
}

impl RuleBasedAnalyzer {
    pub fn new() -> Self {
        let stemmer = Stemmer::create(Algorithm::English);
        let antonyms = ANTONYMS
            .iter()
            .map(|(a, b)| (stemmer.stem(a).into_owned(), stemmer.stem(b).into_owned()))
            .collect();
        RuleBasedAnalyzer { stemmer, antonyms }
    }

    /// Normalized stem sequence of `text`.
    pub fn normalize(&self, text: &str) -> Vec<String> {
        text::content_words(text)
            .filter(|w| w != "user" && w != "users")
            .map(|w| self.stemmer.stem(&w).into_owned())
            .collect()
    }

    fn contradicts(&self, new: &BTreeSet<String>, old: &BTreeSet<String>) -> Option<usize> {
        let mut antonym_words = BTreeSet::new();
        let mut hit = false;
        for (a, b) in &self.antonyms {
            if (new.contains(a) && old.contains(b)) || (new.contains(b) && old.contains(a)) {
                hit = true;
                antonym_words.insert(a);
                antonym_words.insert(b);
            }
        }
        if !hit {
            return None;
        }
        let shared = new
            .intersection(old)
            .filter(|w| !antonym_words.contains(w))
            .count();
        (shared > 0).then_some(shared)
    }

    fn decide(&self, item: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        if item.trim().is_empty() {
            return Err(Error::invalid("item to integrate is empty"));
        }
        let norm = self.normalize(item);
        if existing.iter().any(|(_, t)| self.normalize(t) == norm) {
            return Ok(MemoryOp::ignore());
        }
        let new_set: BTreeSet<String> = norm.into_iter().collect();
        let mut best: Option<(usize, EntryId)> = None;
        for (id, t) in existing {
            let old: BTreeSet<String> = self.normalize(t).into_iter().collect();
            if let Some(shared) = self.contradicts(&new_set, &old) {
                let better = match best {
                    None => true,
                    Some((s, bid)) => shared > s || (shared == s && *id < bid),
                };
                if better {
                    best = Some((shared, *id));
                }
            }
        }
        Ok(match best {
            Some((_, id)) => MemoryOp::update(id, item.trim()),
            None => MemoryOp::add(item.trim()),
        })
    }

    fn topic(content: &[String]) -> String {
        let picked: Vec<&str> = content
            .iter()
            .map(String::as_str)
            .filter(|w| !TOPIC_FILLER.contains(w) && !w.chars().all(|c| c.is_ascii_digit()))
            .take(2)
            .collect();
        if picked.len() < 2 {
            Annotation::FALLBACK_TOPIC.to_string()
        } else {
            picked.join(" ")
        }
    }

    fn attitude(words: &[String]) -> Attitude {
        let pos = words.iter().any(|w| POSITIVE_WORDS.contains(&w.as_str()));
        let neg = words.iter().any(|w| NEGATIVE_WORDS.contains(&w.as_str()));
        match (pos, neg) {
            (true, true) => Attitude::Mixed,
            (true, false) => Attitude::Positive,
            (false, true) => Attitude::Negative,
            (false, false) => Attitude::None,
        }
    }

    /// First-person statements become facts ("I joined X" → "joined x") or
    /// attributes ("I love X" → "user loves x", "I am X" → "user is x",
    /// "my X is Y" → "user's x is y").
    fn extract(sentence: &str, facts: &mut Vec<String>, attributes: &mut Vec<String>) {
        let words: Vec<String> = text::words(sentence).collect();
        if let Some(p) = words.iter().position(|w| w == "my") {
            if let Some(q) = words[p + 1..].iter().position(|w| w == "is" || w == "are") {
                let subject = &words[p + 1..p + 1 + q];
                let rest = &words[p + 2 + q..];
                if !subject.is_empty() && !rest.is_empty() {
                    attributes.push(format!("user's {} is {}", subject.join(" "), rest.join(" ")));
                    return;
                }
            }
        }
        let Some(p) = words.iter().position(|w| w == "i") else {
            return;
        };
        let rest = &words[p + 1..];
        let Some(first) = rest.first() else {
            return;
        };
        if let Some((_, third)) = PREFERENCE_VERBS.iter().find(|(v, _)| v == first) {
            if rest.len() > 1 {
                attributes.push(format!("user {third} {}", rest[1..].join(" ")));
            }
        } else if first == "am" || first == "m" {
            if rest.len() > 1 {
                attributes.push(format!("user is {}", rest[1..].join(" ")));
            }
        } else if rest.len() > 1 {
            facts.push(rest.join(" "));
        }
    }
}

impl Analyzer for RuleBasedAnalyzer {
    fn id(&self) -> &str {
        "rule-based"
    }

    fn annotate(&self, text: &str) -> Result<Annotation> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot annotate empty text"));
        }
        let content: Vec<String> = text::content_words(text).collect();
        let summary = text
            .split_inclusive(['.', '!', '?'])
            .next()
            .unwrap_or(text)
            .trim()
            .to_string();
        let mut annotation = Annotation {
            summary,
            rationale: "rule-based annotation".to_string(),
            ..Annotation::fallback()
        };
        annotation.topic = Self::topic(&content);
        let all_words: Vec<String> = text::words(text).collect();
        annotation.attitude = Self::attitude(&all_words);
        for sentence in text.split(['.', '!', '?', ';', '\n']) {
            Self::extract(sentence, &mut annotation.facts, &mut annotation.attributes);
        }
        Ok(annotation)
    }

    fn decide_fact_op(&self, event: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        self.decide(event, existing)
    }

    fn decide_attribute_op(&self, attribute: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        self.decide(attribute, existing)
    }

    fn merge_cluster(&self, members: &[&str]) -> Result<String> {
        if members.is_empty() {
            return Err(Error::invalid("cannot merge an empty cluster"));
        }
        Ok(longest(members).to_string())
    }

    /// Extractive answer: the context line sharing the most stems with the
    /// query (earliest wins ties), without its bracketed prefix.
    fn respond(&self, context: &str, query: &str) -> Result<String> {
        if query.trim().is_empty() {
            return Err(Error::invalid("query is empty"));
        }
        let wanted: BTreeSet<String> = self.normalize(query).into_iter().collect();
        let mut best: Option<(usize, &str)> = None;
        for line in context.lines() {
            let body = strip_line_prefix(line);
            if body.is_empty() || body == EMPTY_CONTEXT {
                continue;
            }
            let have: BTreeSet<String> = self.normalize(body).into_iter().collect();
            let overlap = wanted.intersection(&have).count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, body));
            }
        }
        Ok(best.map_or_else(|| "I don't know.".to_string(), |(_, b)| b.to_string()))
    }
}

/// Routes each analyzer duty to its own backend: annotation, persona
/// curation (op decisions and merges) and response generation.
pub struct SplitAnalyzer {
    id: String,
    annotator: Arc<dyn Analyzer>,
    curator: Arc<dyn Analyzer>,
    responder: Arc<dyn Analyzer>,
}

impl SplitAnalyzer {
    pub fn new(annotator: Arc<dyn Analyzer>, curator: Arc<dyn Analyzer>, responder: Arc<dyn Analyzer>) -> Self {
        let id = format!("split({},{},{})", annotator.id(), curator.id(), responder.id());
        SplitAnalyzer { id, annotator, curator, responder }
    }
}

impl Analyzer for SplitAnalyzer {
    fn id(&self) -> &str {
        &self.id
    }

    fn annotate(&self, text: &str) -> Result<Annotation> {
        self.annotator.annotate(text)
    }

    fn decide_fact_op(&self, event: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        self.curator.decide_fact_op(event, existing)
    }

    fn decide_attribute_op(&self, attribute: &str, existing: &[(EntryId, &str)]) -> Result<MemoryOp> {
        self.curator.decide_attribute_op(attribute, existing)
    }

    fn merge_cluster(&self, members: &[&str]) -> Result<String> {
        self.curator.merge_cluster(members)
    }

    fn respond(&self, context: &str, query: &str) -> Result<String> {
        self.responder.respond(context, query)
    }
}

/// Drops a leading `[...]` tag from a rendered context line.
pub fn strip_line_prefix(line: &str) -> &str {
    let line = line.trim();
    if line.starts_with('[') {
        if let Some(end) = line.find(']') {
            return line[end + 1..].trim();
        }
    }
    line
}
