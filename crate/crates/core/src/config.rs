use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest budget accepted; below this even one persona line rarely fits.
pub const MIN_BUDGET: usize = 100;

/// Order in which channel blocks are rendered. Trimming drops items from the
/// end, so the last channel is the first to lose items.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    /// persona, working, episodic
    #[default]
    #[serde(alias = "persona")]
    PersonaFirst,
    /// working, episodic, persona
    WorkingFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k_topics: usize,
    pub min_similarity: f64,
    /// Number of clue words used by episodic retrieval.
    pub clue_count: usize,
    pub k_facts: usize,
    pub k_attributes: usize,
    /// How many of the most similar persona entries are shown to the analyzer
    /// when it decides an op.
    pub op_candidates: usize,
    pub max_tokens: usize,
    pub channel_order: ChannelOrder,
    /// Pending attribute edits that trigger compaction; 0 disables the trigger.
    pub compaction_threshold: u64,
    /// Nearest-neighbor links weaker than this are not drawn during
    /// compaction. `None` links every attribute to its nearest neighbor.
    pub cluster_min_similarity: Option<f64>,
    pub index_assistant_turns: bool,
    /// When false, the log keeps the annotation summary instead of raw text.
    pub retain_raw_log: bool,
    pub parallel_retrieval: bool,
    /// Top-k for raw-history retrieval in the baseline mode.
    pub raw_k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k_topics: 3,
            min_similarity: 0.30,
            clue_count: 1,
            k_facts: 10,
            k_attributes: 10,
            op_candidates: 10,
            max_tokens: 1500,
            channel_order: ChannelOrder::PersonaFirst,
            compaction_threshold: 20,
            cluster_min_similarity: Some(0.5),
            index_assistant_turns: false,
            retain_raw_log: true,
            parallel_retrieval: true,
            raw_k: 10,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_topics", self.k_topics),
            ("clue_count", self.clue_count),
            ("k_facts", self.k_facts),
            ("k_attributes", self.k_attributes),
            ("op_candidates", self.op_candidates),
            ("raw_k", self.raw_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.max_tokens < MIN_BUDGET {
            return Err(Error::invalid(format!(
                "max_tokens must be at least {MIN_BUDGET}, got {}",
                self.max_tokens
            )));
        }
        if !(-1.0..=1.0).contains(&self.min_similarity) {
            return Err(Error::invalid("min_similarity must lie in [-1, 1]"));
        }
        if let Some(f) = self.cluster_min_similarity {
            if !(-1.0..=1.0).contains(&f) {
                return Err(Error::invalid("cluster_min_similarity must lie in [-1, 1]"));
            }
        }
        Ok(())
    }
}
