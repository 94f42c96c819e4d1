//! Domain types shared by every store, and the per-user memory container.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::episodic::ClueIndex;
use crate::error::{Error, Result};
use crate::persona::{EntryId, PersonaStore};
use crate::working::TopicIndex;

/// Per-user interaction id. Ids start at 1 and grow by one per append.
pub type InteractionId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" => Ok(Role::User),
            "assistant" | "agent" => Ok(Role::Assistant),
            other => Err(Error::invalid(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub id: InteractionId,
    pub user_id: String,
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attitude {
    Positive,
    Negative,
    Mixed,
    #[default]
    None,
}

impl Attitude {
    /// Lenient parse of a model-reported attitude ("Postive" included, since
    /// the extraction prompt itself carries that spelling).
    pub fn parse_loose(s: &str) -> Attitude {
        let s = s.trim().to_ascii_lowercase();
        if s.starts_with("pos") {
            Attitude::Positive
        } else if s.starts_with("neg") {
            Attitude::Negative
        } else if s.starts_with("mix") {
            Attitude::Mixed
        } else {
            Attitude::None
        }
    }
}

/// Structured reading of one interaction produced by the analyzer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub topic: String,
    pub attitude: Attitude,
    pub reason: String,
    pub facts: Vec<String>,
    pub attributes: Vec<String>,
    pub summary: String,
    pub rationale: String,
}

impl Annotation {
    pub const FALLBACK_TOPIC: &'static str = "general";

    /// Annotation used when analysis is impossible or failed: a topic and
    /// nothing else.
    pub fn fallback() -> Self {
        Annotation {
            topic: Self::FALLBACK_TOPIC.to_string(),
            attitude: Attitude::None,
            reason: String::new(),
            facts: Vec::new(),
            attributes: Vec::new(),
            summary: String::new(),
            rationale: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Ignore,
    Update,
}

/// A persona-list edit decided by the analyzer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryOp {
    pub kind: OpKind,
    pub target_id: Option<EntryId>,
    pub payload: String,
}

impl MemoryOp {
    pub fn add(payload: impl Into<String>) -> Self {
        MemoryOp {
            kind: OpKind::Add,
            target_id: None,
            payload: payload.into(),
        }
    }

    pub fn ignore() -> Self {
        MemoryOp {
            kind: OpKind::Ignore,
            target_id: None,
            payload: String::new(),
        }
    }

    pub fn update(target: EntryId, payload: impl Into<String>) -> Self {
        MemoryOp {
            kind: OpKind::Update,
            target_id: Some(target),
            payload: payload.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.target_id) {
            (OpKind::Update, None) => Err(Error::invalid("update op without target id")),
            (OpKind::Add | OpKind::Update, _) if self.payload.trim().is_empty() => {
                Err(Error::invalid("op payload is empty"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub ingested: u64,
}

/// Everything remembered about one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMemory {
    user_id: String,
    pub(crate) topic_index: TopicIndex,
    pub(crate) clue_index: ClueIndex,
    pub(crate) persona: PersonaStore,
    interactions: Vec<Interaction>,
    pub(crate) counters: Counters,
}

impl UserMemory {
    pub fn new(user_id: &str) -> Result<Self> {
        if user_id.trim().is_empty() {
            return Err(Error::invalid("user id must not be empty"));
        }
        Ok(UserMemory {
            user_id: user_id.to_string(),
            topic_index: TopicIndex::default(),
            clue_index: ClueIndex::default(),
            persona: PersonaStore::default(),
            interactions: Vec::new(),
            counters: Counters::default(),
        })
    }

    /// Rebuilds a memory from its parts, checking that every id referenced by
    /// an index exists in the log. Used by snapshot loading.
    pub fn from_parts(
        user_id: String,
        interactions: Vec<Interaction>,
        topic_index: TopicIndex,
        clue_index: ClueIndex,
        persona: PersonaStore,
        counters: Counters,
    ) -> Result<Self> {
        let mem = UserMemory {
            user_id,
            topic_index,
            clue_index,
            persona,
            interactions,
            counters,
        };
        mem.check_integrity()?;
        Ok(mem)
    }

    pub fn check_integrity(&self) -> Result<()> {
        if self.user_id.trim().is_empty() {
            return Err(Error::invalid("user id must not be empty"));
        }
        for (pos, it) in self.interactions.iter().enumerate() {
            if it.id != pos as u64 + 1 {
                return Err(Error::invalid(format!(
                    "interaction ids must be contiguous from 1, found {} at position {pos}",
                    it.id
                )));
            }
        }
        let n = self.interactions.len() as u64;
        let in_log = |id: InteractionId| id >= 1 && id <= n;
        let dangling = self
            .topic_index
            .all_ids()
            .chain(self.clue_index.all_ids())
            .chain(self.persona.source_ids())
            .find(|id| !in_log(*id));
        if let Some(id) = dangling {
            return Err(Error::invalid(format!("index references unknown interaction {id}")));
        }
        self.topic_index.check_integrity()?;
        self.clue_index.check_integrity()?;
        self.persona.check_integrity()
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn interaction(&self, id: InteractionId) -> Option<&Interaction> {
        let idx = usize::try_from(id).ok()?.checked_sub(1)?;
        self.interactions.get(idx)
    }

    pub fn topic_index(&self) -> &TopicIndex {
        &self.topic_index
    }

    pub fn clue_index(&self) -> &ClueIndex {
        &self.clue_index
    }

    pub fn persona(&self) -> &PersonaStore {
        &self.persona
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Attribute additions and updates since the last compaction.
    pub fn attributes_since_compaction(&self) -> u64 {
        self.persona.pending_attribute_count()
    }

    pub fn last_id(&self) -> InteractionId {
        self.interactions.len() as InteractionId
    }

    /// Appends one turn to the log. The new id is the previous maximum plus one.
    pub fn append_interaction(
        &mut self,
        role: Role,
        text: &str,
        timestamp: DateTime<Utc>,
        session_id: Option<String>,
    ) -> Result<Interaction> {
        if text.trim().is_empty() {
            return Err(Error::invalid("interaction text is blank"));
        }
        let it = Interaction {
            id: self.last_id() + 1,
            user_id: self.user_id.clone(),
            role,
            text: text.to_string(),
            timestamp,
            session_id,
        };
        self.interactions.push(it.clone());
        self.counters.ingested += 1;
        Ok(it)
    }
}
