//! The ten-interaction scripted fixture shared by the golden, eval and
//! acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};
use mnemo_core::analyzer::SplitAnalyzer;
use mnemo_core::embedding::Embedding;
use mnemo_core::orchestrator::{EncodeOutcome, RetrievalBundle};
use mnemo_core::{
    Analyzer, Annotation, BudgetPolicy, ChannelSet, Engine, EngineConfig, EmbeddingProvider, EntryId,
    Error, HashedBowEmbedder, MemoryOp, ModelAnalyzer, Role, RuleBasedAnalyzer, ScriptedModel, UserMemory,
};

/// Hashed bag of words after mapping a few words onto shared concept words,
/// so that "jazz practice" lands near "music workshop". Deterministic.
pub struct ConceptEmbedder {
    inner: HashedBowEmbedder,
}

const LEXICON: [(&str, &str); 14] = [
    ("jazz", "music"),
    ("saxophone", "music"),
    ("practice", "music"),
    ("practicing", "music"),
    ("workshop", "music"),
    ("improvisation", "music"),
    ("tutor", "music"),
    ("basketball", "sport"),
    ("playing", "sport"),
    ("weekends", "sport"),
    ("dog", "pet"),
    ("biscuit", "pet"),
    ("stressful", "stress"),
    ("launch", "work"),
];

impl ConceptEmbedder {
    pub fn new() -> Self {
        ConceptEmbedder { inner: HashedBowEmbedder::default() }
    }

    fn rewrite(text: &str) -> String {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let lower = w.to_lowercase();
                LEXICON
                    .iter()
                    .find(|(from, _)| *from == lower)
                    .map_or(lower.clone(), |(_, to)| to.to_string())
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl EmbeddingProvider for ConceptEmbedder {
    fn id(&self) -> &str {
        "concept-bow"
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> mnemo_core::Result<Vec<Embedding>> {
        let rewritten: Vec<String> = texts.iter().map(|t| Self::rewrite(t)).collect();
        let refs: Vec<&str> = rewritten.iter().map(String::as_str).collect();
        self.inner.embed_batch(&refs)
    }
}

pub struct Turn {
    pub text: &'static str,
    pub topic: &'static str,
    pub attitude: &'static str,
    pub facts: &'static [&'static str],
    pub attributes: &'static [&'static str],
    pub summary: &'static str,
}

pub const TURNS: [Turn; 10] = [
    Turn {
        text: "Last week's jazz workshop helped me overcome performance anxiety since the tutors are so patients.",
        topic: "music workshop",
        attitude: "Positive",
        facts: &["join jazz workshop last week"],
        attributes: &["user worrys about jazz performance"],
        summary: "Jazz workshop helped the user overcome performance anxiety.",
    },
    Turn {
        text: "I stop playing basketball for this semester due to too much stress.",
        topic: "playing basketball",
        attitude: "negative",
        facts: &["stop playing basketball"],
        attributes: &["user hate stress"],
        summary: "The user stop playing baskerball due to too much stress.",
    },
    Turn {
        text: "I practice saxophone every evening before dinner.",
        topic: "saxophone practice",
        attitude: "Positive",
        facts: &["practices saxophone every evening"],
        attributes: &["user is disciplined about music"],
        summary: "The user practices saxophone every evening.",
    },
    Turn {
        text: "My sister Emma is a nurse in Boston.",
        topic: "family",
        attitude: "None",
        facts: &["sister Emma is a nurse in Boston"],
        attributes: &[],
        summary: "The user's sister Emma is a nurse in Boston.",
    },
    Turn {
        text: "I adopted a rescue dog named Biscuit.",
        topic: "new companion",
        attitude: "Positive",
        facts: &["adopted rescue dog named Biscuit"],
        attributes: &["user loves animals"],
        summary: "The user adopted a rescue dog named Biscuit.",
    },
    Turn {
        text: "The jazz tutor said my improvisation is getting better.",
        topic: "music workshop",
        attitude: "Positive",
        facts: &["jazz improvisation improving"],
        attributes: &["user enjoys jazz music"],
        summary: "The user's jazz improvisation is improving.",
    },
    Turn {
        text: "I started playing basketball again on weekends.",
        topic: "playing basketball",
        attitude: "Positive",
        facts: &["start playing basketball again"],
        attributes: &[],
        summary: "The user started playing basketball again.",
    },
    Turn {
        text: "Work has been stressful lately with the product launch.",
        topic: "work stress",
        attitude: "negative",
        facts: &["product launch at work"],
        attributes: &["user feels stressed at work"],
        summary: "Work is stressful because of a product launch.",
    },
    Turn {
        text: "Remember that I joined the jazz workshop last week.",
        topic: "music workshop",
        attitude: "None",
        facts: &["joined the jazz workshop last week"],
        attributes: &[],
        summary: "The user joined the jazz workshop last week.",
    },
    Turn {
        text: "I am thinking about performing at the open mic in June.",
        topic: "open mic",
        attitude: "Mixed",
        facts: &["plans to perform at open mic in June"],
        attributes: &["user worrys about jazz performance"],
        summary: "The user may perform at an open mic in June.",
    },
];

pub const USER: &str = "alice";

pub fn timestamp(i: usize) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 5, 1, 10, 0, 0).unwrap() + Duration::days(i as i64)
}

pub fn annotation_reply(turn: &Turn) -> String {
    serde_json::json!({
        "text": turn.text,
        "tags": {
            "topic": [turn.topic],
            "attitude": [turn.attitude],
            "reason": [""],
            "facts": turn.facts,
            "attributes": turn.attributes,
        },
        "summary": turn.summary,
        "rationale": "scripted",
    })
    .to_string()
}

/// Queries answered by the golden run, with their scripted replies.
pub const QUERIES: [(&str, &str); 5] = [
    ("how is my jazz practice going", "Your jazz practice is going well; your improvisation is improving."),
    ("what does my sister do", "Your sister Emma is a nurse in Boston."),
    ("am I still playing basketball", "Yes, you started playing basketball again on weekends."),
    ("what is my dog called", "Your dog is called Biscuit."),
    ("why is work stressful", "Because of the product launch."),
];

/// Annotation comes from the scripted model, falling back to rules for text
/// the script does not cover.
pub struct ScriptedThenRules {
    scripted: ModelAnalyzer<ScriptedModel>,
    rules: RuleBasedAnalyzer,
}

impl Analyzer for ScriptedThenRules {
    fn id(&self) -> &str {
        "scripted+rules"
    }

    fn annotate(&self, text: &str) -> mnemo_core::Result<Annotation> {
        match self.scripted.annotate(text) {
            Err(Error::Unscripted { .. }) => self.rules.annotate(text),
            other => other,
        }
    }

    fn decide_fact_op(&self, event: &str, existing: &[(EntryId, &str)]) -> mnemo_core::Result<MemoryOp> {
        self.rules.decide_fact_op(event, existing)
    }

    fn decide_attribute_op(&self, attribute: &str, existing: &[(EntryId, &str)]) -> mnemo_core::Result<MemoryOp> {
        self.rules.decide_attribute_op(attribute, existing)
    }

    fn merge_cluster(&self, members: &[&str]) -> mnemo_core::Result<String> {
        self.rules.merge_cluster(members)
    }

    fn respond(&self, context: &str, query: &str) -> mnemo_core::Result<String> {
        match self.scripted.respond(context, query) {
            Err(Error::Unscripted { .. }) => self.rules.respond(context, query),
            other => other,
        }
    }
}

fn scripted_model() -> ScriptedModel {
    let mut model = ScriptedModel::new();
    for turn in &TURNS {
        model = model.on_annotate(turn.text, annotation_reply(turn));
    }
    model
}

/// Scripted annotation and replies, rule-based persona curation.
pub fn analyzer() -> Arc<dyn Analyzer> {
    let mut model = scripted_model();
    for (q, reply) in QUERIES {
        model = model.on_respond_any(q, reply);
    }
    let scripted: Arc<dyn Analyzer> = Arc::new(ModelAnalyzer::new(model));
    Arc::new(SplitAnalyzer::new(scripted.clone(), Arc::new(RuleBasedAnalyzer::new()), scripted))
}

/// Scripted annotation where available, rules for everything else,
/// including extractive answers.
pub fn eval_analyzer() -> Arc<dyn Analyzer> {
    Arc::new(ScriptedThenRules { scripted: ModelAnalyzer::new(scripted_model()), rules: RuleBasedAnalyzer::new() })
}

pub fn engine_with(config: EngineConfig, analyzer: Arc<dyn Analyzer>) -> Engine {
    Engine::new(config, analyzer, Arc::new(ConceptEmbedder::new())).expect("valid config")
}

pub fn engine() -> Engine {
    engine_with(EngineConfig::default(), analyzer())
}

pub fn eval_engine() -> Engine {
    engine_with(EngineConfig::default(), eval_analyzer())
}

pub fn encode_all(engine: &Engine) -> (UserMemory, Vec<EncodeOutcome>) {
    let mut mem = UserMemory::new(USER).unwrap();
    let outcomes = TURNS
        .iter()
        .enumerate()
        .map(|(i, t)| engine.encode_interaction(&mut mem, Role::User, t.text, timestamp(i), Some("s1".into())).unwrap())
        .collect();
    (mem, outcomes)
}

pub fn memory(engine: &Engine) -> UserMemory {
    encode_all(engine).0
}

pub fn budget(max: usize) -> BudgetPolicy {
    BudgetPolicy::new(max, Default::default()).unwrap()
}

/// Encode, retrieve and answer everything; the JSON document compared
/// against the committed golden file.
pub fn golden_document() -> String {
    let engine = engine();
    let (mem, outcomes) = encode_all(&engine);
    let full = budget(1500);
    let bundles: Vec<RetrievalBundle> = QUERIES
        .iter()
        .map(|(q, _)| engine.retrieve(&mem, q, ChannelSet::all(), &full).unwrap())
        .collect();
    let answers: Vec<serde_json::Value> = QUERIES
        .iter()
        .map(|(q, _)| {
            let a = engine.answer(&mem, q, ChannelSet::all(), &full).unwrap();
            serde_json::json!({ "query": q, "response": a.response, "context": a.bundle.merged_context })
        })
        .collect();
    let tight = engine.retrieve(&mem, QUERIES[0].0, ChannelSet::all(), &BudgetPolicy::exact(50, Default::default())).unwrap();
    let doc = serde_json::json!({
        "encode": outcomes,
        "retrieve": bundles,
        "answer": answers,
        "retrieve_budget_50": tight,
    });
    let mut text = serde_json::to_string_pretty(&doc).unwrap();
    text.push('\n');
    text
}

/// Two conversations with QA items; the first replays the fixture turns.
pub fn eval_corpus_json() -> String {
    let turns: Vec<_> = TURNS
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({ "speaker": "Alice", "text": t.text, "timestamp": timestamp(i) }))
        .collect();
    serde_json::json!({
        "conversations": [
            {
                "conversation_id": "alice",
                "sessions": [{ "session_id": "s1", "turns": turns }],
                "qa_items": [
                    { "question": "What does my sister do?", "answer": "nurse in Boston", "category": "single-hop" },
                    { "question": "What is the name of my dog?", "answer": "Biscuit", "category": "single-hop" },
                    { "question": "How do I feel about stress?", "answer": "user hate stress", "category": "multi-hop" },
                    { "question": "When do I practice the saxophone?", "answer": "every evening", "category": "temporal" },
                    { "question": "How is my jazz practice going?", "answer": "jazz improvisation improving", "category": "open-domain" }
                ]
            },
            {
                "conversation_id": "bob",
                "sessions": [
                    { "session_id": "s1", "turns": [
                        { "speaker": "Bob", "text": "I moved to Denver in March for a new job.", "timestamp": "2023-03-02T09:00:00Z" },
                        { "speaker": "Bob", "text": "I love hiking in the mountains near Boulder.", "timestamp": "2023-03-09T09:00:00Z" }
                    ]},
                    { "session_id": "s2", "turns": [
                        { "speaker": "Bob", "text": "My brother Tom is a chef in Chicago.", "timestamp": "2023-04-01T09:00:00Z" },
                        { "speaker": "Bob", "text": "I quit coffee because it hurt my sleep.", "timestamp": "2023-04-05T09:00:00Z" }
                    ]}
                ],
                "qa_items": [
                    { "question": "Where does my brother work?", "answer": "Chicago", "category": "single-hop" },
                    { "question": "What do I enjoy near Boulder?", "answer": "hiking in the mountains", "category": "open-domain" },
                    { "question": "Why did I give up coffee?", "answer": "it hurt my sleep", "category": "multi-hop" }
                ]
            }
        ]
    })
    .to_string()
}
