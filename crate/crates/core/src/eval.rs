//! QA evaluation over long conversations: corpus loading, answer metrics,
//! and the ingest-then-ask driver.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDateTime, TimeDelta, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::config::ChannelOrder;
use crate::error::{Error, Result};
use crate::memory::{Role, UserMemory};
use crate::orchestrator::{AnswerError, BudgetPolicy, ChannelSet, Engine, RawIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    MultiHop,
    Temporal,
    OpenDomain,
    SingleHop,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::MultiHop, Category::Temporal, Category::OpenDomain, Category::SingleHop];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::MultiHop => "multi-hop",
            Category::Temporal => "temporal",
            Category::OpenDomain => "open-domain",
            Category::SingleHop => "single-hop",
        }
    }

    /// 1 multi-hop, 2 temporal, 3 open-domain, 4 single-hop.
    pub fn from_number(n: u64) -> Option<Category> {
        match n {
            1 => Some(Category::MultiHop),
            2 => Some(Category::Temporal),
            3 => Some(Category::OpenDomain),
            4 => Some(Category::SingleHop),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "multihop" => Ok(Category::MultiHop),
            "temporal" | "temporalreasoning" => Ok(Category::Temporal),
            "opendomain" | "opendomainknowledge" => Ok(Category::OpenDomain),
            "singlehop" => Ok(Category::SingleHop),
            _ => match key.parse::<u64>().ok().and_then(Category::from_number) {
                Some(c) => Ok(c),
                None => Err(Error::Parse(format!("unknown question category {s:?}"))),
            },
        }
    }
}

/// Accepts a category name or its number.
impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match Value::deserialize(d)? {
            Value::String(s) => s.parse().map_err(D::Error::custom),
            Value::Number(n) => n
                .as_u64()
                .and_then(Category::from_number)
                .ok_or_else(|| D::Error::custom(format!("unknown question category {n}"))),
            other => Err(D::Error::custom(format!("bad category {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    /// Defaults to assistant for speakers named assistant, agent or bot,
    /// user otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

impl Turn {
    pub fn role(&self) -> Role {
        self.role.unwrap_or_else(|| {
            match self.speaker.trim().to_ascii_lowercase().as_str() {
                "assistant" | "agent" | "bot" => Role::Assistant,
                _ => Role::User,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    #[serde(deserialize_with = "string_or_number")]
    pub answer: String,
    pub category: Category,
    #[serde(default)]
    pub evidence_turn_refs: Vec<String>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    Ok(scalar_text(&Value::deserialize(d)?))
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub sessions: Vec<Session>,
    pub qa_items: Vec<QaItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub conversations: Vec<Conversation>,
}

impl EvalCorpus {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.conversations {
            if c.conversation_id.trim().is_empty() {
                return Err(Error::invalid("conversation id is empty"));
            }
            if !ids.insert(c.conversation_id.as_str()) {
                return Err(Error::invalid(format!("duplicate conversation id {:?}", c.conversation_id)));
            }
            for s in &c.sessions {
                if let Some(pos) = s.turns.iter().position(|t| t.text.trim().is_empty()) {
                    return Err(Error::invalid(format!(
                        "conversation {:?} session {:?} turn {pos} is blank",
                        c.conversation_id, s.session_id
                    )));
                }
            }
            if c.qa_items.iter().any(|q| q.question.trim().is_empty()) {
                return Err(Error::invalid(format!("conversation {:?} has a blank question", c.conversation_id)));
            }
        }
        Ok(())
    }

    pub fn question_count(&self) -> usize {
        self.conversations.iter().map(|c| c.qa_items.len()).sum()
    }

    /// Reads either the native shape (`{"conversations": [...]}`) or the
    /// public LoCoMo release (a list of samples).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("corpus: {e}")))?;
        let corpus = if value.get("conversations").is_some() {
            serde_json::from_value(value).map_err(|e| Error::Parse(format!("corpus: {e}")))?
        } else if value.is_array() {
            from_locomo(&value)?
        } else {
            return Err(Error::Parse("corpus is neither a conversation list nor LoCoMo samples".into()));
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// LoCoMo session timestamps look like "1:56 pm on 8 May, 2023".
fn parse_locomo_time(s: &str) -> Option<DateTime<Utc>> {
    let cleaned = s.trim().to_uppercase();
    ["%I:%M %p ON %d %B, %Y", "%I:%M %p ON %d %b, %Y"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(&cleaned, f).ok())
        .map(|n| n.and_utc())
}

fn from_locomo(samples: &Value) -> Result<EvalCorpus> {
    let mut conversations = Vec::new();
    for (n, sample) in samples.as_array().into_iter().flatten().enumerate() {
        let id = sample
            .get("sample_id")
            .map(scalar_text)
            .unwrap_or_else(|| format!("conv-{n}"));
        let conv = sample
            .get("conversation")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Parse(format!("sample {id}: missing conversation")))?;
        let mut numbered: Vec<(u64, &Vec<Value>)> = conv
            .iter()
            .filter_map(|(k, v)| {
                let num = k.strip_prefix("session_")?.parse().ok()?;
                Some((num, v.as_array()?))
            })
            .collect();
        numbered.sort_by_key(|(num, _)| *num);
        let mut sessions = Vec::new();
        for (num, turns) in numbered {
            let start = conv
                .get(&format!("session_{num}_date_time"))
                .and_then(Value::as_str)
                .and_then(parse_locomo_time);
            let turns = turns
                .iter()
                .enumerate()
                .filter_map(|(i, t)| {
                    let mut text = t.get("text").map(scalar_text).unwrap_or_default();
                    if let Some(caption) = t.get("blip_caption").and_then(Value::as_str) {
                        text = format!("{} [shares a photo of {caption}]", text.trim());
                    }
                    if text.trim().is_empty() {
                        return None;
                    }
                    Some(Turn {
                        speaker: t.get("speaker").map(scalar_text).unwrap_or_default(),
                        text: text.trim().to_string(),
                        timestamp: start.map(|s| (s + TimeDelta::minutes(i as i64)).to_rfc3339()),
                        role: Some(Role::User),
                    })
                })
                .collect();
            sessions.push(Session { session_id: format!("session_{num}"), turns });
        }
        let mut qa_items = Vec::new();
        for qa in sample.get("qa").and_then(Value::as_array).into_iter().flatten() {
            let category = match qa.get("category") {
                Some(Value::String(s)) => s.parse().ok(),
                Some(Value::Number(x)) => x.as_u64().and_then(Category::from_number),
                _ => None,
            };
            // Category 5 (adversarial) has no gold answer.
            let (Some(category), Some(answer)) = (category, qa.get("answer")) else {
                continue;
            };
            qa_items.push(QaItem {
                question: qa.get("question").map(scalar_text).unwrap_or_default(),
                answer: scalar_text(answer),
                category,
                evidence_turn_refs: qa
                    .get("evidence")
                    .and_then(Value::as_array)
                    .map(|e| e.iter().map(scalar_text).collect())
                    .unwrap_or_default(),
            });
        }
        conversations.push(Conversation { conversation_id: id, sessions, qa_items });
    }
    Ok(EvalCorpus { conversations })
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, split on
/// whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let cb = counts(b);
    counts(a).iter().map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0))).sum()
}

/// Token-level F1 over normalized answers. Both empty scores 1, exactly one
/// empty scores 0.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = overlap(&p, &r);
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Single-reference BLEU-1: clipped unigram precision times the brevity
/// penalty, no smoothing.
pub fn bleu1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    if p.is_empty() {
        return 0.0;
    }
    let precision = overlap(&p, &r) as f64 / p.len() as f64;
    let (c, rl) = (p.len() as f64, r.len() as f64);
    let bp = if c < rl { (1.0 - rl / c).exp() } else { 1.0 };
    precision * bp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Three-store memory.
    Omem,
    /// Embedding retrieval over the raw turn log.
    DirectRag,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "omem" | "memory" => Ok(EvalMode::Omem),
            "direct_rag" | "rag" => Ok(EvalMode::DirectRag),
            other => Err(Error::invalid(format!("unknown eval mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub channels: ChannelSet,
    pub budget: BudgetPolicy,
    /// Prefix each turn with `speaker: `.
    pub speaker_prefix: bool,
}

impl EvalOptions {
    pub fn new(mode: EvalMode, channels: ChannelSet, budget: BudgetPolicy) -> Self {
        EvalOptions { mode, channels, budget, speaker_prefix: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub mode: EvalMode,
    pub channels: Vec<String>,
    pub max_tokens: Option<usize>,
    pub channel_order: ChannelOrder,
    pub analyzer: String,
    pub embedder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreLine {
    pub questions: usize,
    /// Percent, two decimals.
    pub f1: f64,
    pub bleu1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryScore {
    pub category: Category,
    #[serde(flatten)]
    pub score: ScoreLine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemResult {
    pub conversation_id: String,
    pub question: String,
    pub category: Category,
    pub reference: String,
    pub prediction: String,
    pub f1: f64,
    pub bleu1: f64,
    pub token_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenStats {
    pub total: usize,
    pub mean_per_answer: f64,
}

/// Wall-clock figures; excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimingStats {
    pub mean_latency_ms: f64,
    pub mean_retrieval_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub overall: ScoreLine,
    pub categories: Vec<CategoryScore>,
    pub tokens: TokenStats,
    pub failures: usize,
    pub ingest_failures: usize,
    pub items: Vec<ItemResult>,
    pub timing: TimingStats,
}

fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

fn score_line<'a>(items: impl Iterator<Item = &'a ItemResult>) -> ScoreLine {
    let (mut n, mut f1, mut b1) = (0usize, 0.0, 0.0);
    for it in items {
        n += 1;
        f1 += it.f1;
        b1 += it.bleu1;
    }
    let mean = |s: f64| if n == 0 { 0.0 } else { percent(s / n as f64) };
    ScoreLine { questions: n, f1: mean(f1), bleu1: mean(b1) }
}

impl EvalReport {
    /// The report with wall-clock timing zeroed: identical across runs with
    /// deterministic providers.
    pub fn deterministic(&self) -> EvalReport {
        EvalReport { timing: TimingStats::default(), ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode {:?}  channels {}  budget {}",
            self.config.mode,
            self.config.channels.join(","),
            self.config.max_tokens.map_or("none".to_string(), |m| m.to_string())
        );
        let _ = writeln!(out, "{:<12} {:>9} {:>8} {:>8}", "category", "questions", "F1", "BLEU-1");
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{:<12} {:>9} {:>8.2} {:>8.2}",
                c.category.as_str(),
                c.score.questions,
                c.score.f1,
                c.score.bleu1
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>8.2} {:>8.2}",
            "overall", self.overall.questions, self.overall.f1, self.overall.bleu1
        );
        let _ = writeln!(
            out,
            "tokens: {} total, {:.2} per answer; failures: {}; mean latency {:.2} ms",
            self.tokens.total, self.tokens.mean_per_answer, self.failures, self.timing.mean_latency_ms
        );
        out
    }
}

struct ConversationRun {
    items: Vec<ItemResult>,
    ingest_failures: usize,
    latency: Vec<Duration>,
    retrieval: Vec<Duration>,
}

fn synthetic_time(index: usize) -> DateTime<Utc> {
    DateTime::from_timestamp(1_672_531_200, 0).expect("valid epoch") + TimeDelta::minutes(index as i64)
}

fn run_conversation(conv: &Conversation, engine: &Engine, options: &EvalOptions) -> Result<ConversationRun> {
    let mut mem = UserMemory::new(&conv.conversation_id)?;
    let mut raw = RawIndex::default();
    let mut ingest_failures = 0;
    let mut index = 0;
    for session in &conv.sessions {
        for turn in &session.turns {
            let ts = turn
                .timestamp
                .as_deref()
                .and_then(|t| DateTime::parse_from_rfc3339(t).ok())
                .map_or_else(|| synthetic_time(index), |t| t.with_timezone(&Utc));
            index += 1;
            let text = if options.speaker_prefix {
                format!("{}: {}", turn.speaker, turn.text)
            } else {
                turn.text.clone()
            };
            let session_id = Some(session.session_id.clone());
            let result = match options.mode {
                EvalMode::Omem => engine
                    .encode_interaction(&mut mem, turn.role(), &text, ts, session_id)
                    .map(|_| ()),
                EvalMode::DirectRag => mem
                    .append_interaction(turn.role(), &text, ts, session_id)
                    .and_then(|it| raw.add(&it, engine.embedder())),
            };
            if let Err(e) = result {
                tracing::warn!(conversation = %conv.conversation_id, error = %e, "turn not ingested");
                ingest_failures += 1;
            }
        }
    }

    let mut run = ConversationRun { items: Vec::new(), ingest_failures, latency: Vec::new(), retrieval: Vec::new() };
    for qa in &conv.qa_items {
        let start = Instant::now();
        let outcome = match options.mode {
            EvalMode::Omem => engine.answer(&mem, &qa.question, options.channels, &options.budget),
            EvalMode::DirectRag => engine.answer_raw(&mem, &raw, &qa.question, &options.budget),
        };
        run.latency.push(start.elapsed());
        let item = match outcome {
            Ok(answer) => {
                run.retrieval.push(answer.timing.retrieval);
                ItemResult {
                    conversation_id: conv.conversation_id.clone(),
                    question: qa.question.clone(),
                    category: qa.category,
                    reference: qa.answer.clone(),
                    f1: token_f1(&answer.response, &qa.answer),
                    bleu1: bleu1(&answer.response, &qa.answer),
                    prediction: answer.response,
                    token_count: answer.bundle.token_count,
                    error: None,
                }
            }
            Err(AnswerError { error, bundle }) => {
                tracing::warn!(question = %qa.question, %error, "question failed");
                ItemResult {
                    conversation_id: conv.conversation_id.clone(),
                    question: qa.question.clone(),
                    category: qa.category,
                    reference: qa.answer.clone(),
                    prediction: String::new(),
                    f1: 0.0,
                    bleu1: 0.0,
                    token_count: bundle.map_or(0, |b| b.token_count),
                    error: Some(error.to_string()),
                }
            }
        };
        run.items.push(item);
    }
    Ok(run)
}

/// Ingests every conversation into a fresh memory, asks its questions
/// without writing them back, and aggregates the scores. Conversations run
/// in parallel; the report lists items in corpus order.
pub fn run_eval(corpus: &EvalCorpus, engine: &Engine, options: &EvalOptions) -> Result<EvalReport> {
    corpus.validate()?;
    if options.mode == EvalMode::DirectRag && !engine.config().retain_raw_log {
        return Err(Error::invalid("raw-history mode needs retain_raw_log"));
    }
    let started = Instant::now();
    let runs: Vec<ConversationRun> = corpus
        .conversations
        .par_iter()
        .map(|c| run_conversation(c, engine, options))
        .collect::<Result<_>>()?;

    let items: Vec<ItemResult> = runs.iter().flat_map(|r| r.items.iter().cloned()).collect();
    let mut by_category: BTreeMap<Category, Vec<&ItemResult>> = BTreeMap::new();
    for it in &items {
        by_category.entry(it.category).or_default().push(it);
    }
    let categories = by_category
        .into_iter()
        .map(|(category, list)| CategoryScore { category, score: score_line(list.into_iter()) })
        .collect();
    let total_tokens: usize = items.iter().map(|i| i.token_count).sum();
    let ms = |d: &[Duration]| {
        if d.is_empty() {
            0.0
        } else {
            d.iter().map(Duration::as_secs_f64).sum::<f64>() * 1e3 / d.len() as f64
        }
    };
    let latency: Vec<Duration> = runs.iter().flat_map(|r| r.latency.iter().copied()).collect();
    let retrieval: Vec<Duration> = runs.iter().flat_map(|r| r.retrieval.iter().copied()).collect();
    let channels = match options.mode {
        EvalMode::Omem => options.channels.names().into_iter().map(str::to_string).collect(),
        EvalMode::DirectRag => vec!["raw".to_string()],
    };
    Ok(EvalReport {
        config: ReportConfig {
            mode: options.mode,
            channels,
            max_tokens: options.budget.max_tokens,
            channel_order: options.budget.channel_order,
            analyzer: engine.analyzer().id().to_string(),
            embedder: engine.embedder().id().to_string(),
        },
        overall: score_line(items.iter()),
        categories,
        tokens: TokenStats {
            total: total_tokens,
            mean_per_answer: if items.is_empty() { 0.0 } else { total_tokens as f64 / items.len() as f64 },
        },
        failures: items.iter().filter(|i| i.error.is_some()).count(),
        ingest_failures: runs.iter().map(|r| r.ingest_failures).sum(),
        items,
        timing: TimingStats {
            mean_latency_ms: ms(&latency),
            mean_retrieval_ms: ms(&retrieval),
            total_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    })
}
