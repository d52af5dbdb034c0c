//! Engine configuration: search limits, scoring weights, and channel setup.

use serde::{Deserialize, Serialize};

use crate::anonymize::PrivacyPolicy;

/// Search widths, depths, budgets and score weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Limits {
    /// Maximum exploration depth.
    pub d_max: usize,
    /// Fuzzy-selection width (also the intra-search beam).
    pub w1: usize,
    /// Final candidate width after pruning.
    pub w_max: usize,
    /// Experience retrieval width.
    pub w_exp: usize,
    /// Hard cap on Brain-channel calls per run.
    pub max_brain_calls: usize,
    /// Memory-gate confidence threshold.
    pub gate_threshold: f64,
    /// Indicator weight in the pruning score (memory weight is 1 - alpha).
    pub alpha: f64,
    /// Question-embedding weight in the hybrid experience score.
    pub lambda_q: f64,
    /// Indicator-embedding weight in the hybrid experience score.
    pub lambda_i: f64,
    /// Similarity weight in the buffer score.
    pub lambda_sim: f64,
    /// Hit-frequency weight in the buffer score.
    pub lambda_hit: f64,
    /// High-frequency buffer capacity.
    pub buffer_capacity: usize,
    /// Experience pool cap before low-value pruning.
    pub pool_capacity: usize,
    /// Candidate entities considered per mention during alignment.
    pub align_top_k: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            d_max: 3,
            w1: 80,
            w_max: 3,
            w_exp: 5,
            max_brain_calls: 12,
            gate_threshold: 0.85,
            alpha: 0.6,
            lambda_q: 0.5,
            lambda_i: 0.5,
            lambda_sim: 0.7,
            lambda_hit: 0.3,
            buffer_capacity: 1000,
            pool_capacity: 10_000,
            align_top_k: 5,
        }
    }
}

/// Full engine configuration (the CLI layers file and flag overrides on
/// top of these defaults).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub privacy: PrivacyPolicy,
    /// Consult the Hand model (analysis-delegation schema) before routing
    /// question analysis remotely. Off by default: the memory gate alone
    /// decides.
    #[serde(default)]
    pub llm_gate: bool,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub brain: ChannelConfig,
    #[serde(default)]
    pub hand: ChannelConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub backend: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: "hash3gram".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Directory of the persistent experience store.
    pub store: String,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            store: ".privgemo/memory".to_string(),
        }
    }
}
