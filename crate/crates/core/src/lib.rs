//! Long-term memory for conversational agents.
//!
//! Every user turn is encoded into three stores: a topic index (working
//! memory), a clue-word inverted index (episodic memory) and a curated
//! persona of facts and attributes. Queries are answered by retrieving from
//! all three, concatenating the results under a token budget and handing
//! them to a language model.

pub mod analyzer;
pub mod config;
pub mod embedding;
pub mod episodic;
pub mod error;
pub mod eval;
pub mod memory;
pub mod orchestrator;
pub mod persona;
pub mod remote;
pub mod text;
pub mod working;

pub use analyzer::{Analyzer, ModelAnalyzer, RemoteChatModel, RuleBasedAnalyzer, ScriptedModel};
pub use config::EngineConfig;
pub use embedding::{CachedEmbedder, Embedding, EmbeddingProvider, HashedBowEmbedder};
pub use error::{Error, Result};
pub use memory::{Annotation, Attitude, Interaction, InteractionId, MemoryOp, OpKind, Role, UserMemory};
pub use orchestrator::{BudgetPolicy, Channel, ChannelSet, Engine, RetrievalBundle};
pub use persona::{EntryId, EntryKind, PersonaEntry, PersonaStore};
