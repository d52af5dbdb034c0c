//! Privacy-aware experience memory.
//!
//! Verified reasoning artifacts are stored session-independently (role
//! placeholders, never session tokens), retrieved by a hybrid question +
//! indicator embedding score with a hit-frequency buffer on top, and used
//! to gate Brain calls, initialize exploration, and steer mode/depth
//! transitions. Payloads are encrypted at rest with a local key;
//! embeddings stay plaintext for search.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use base64::Engine as _;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonymize::PolicyTag;
use crate::boundary::RawDictionary;
use crate::config::Limits;
use crate::gateway::{Embedder, EmbeddingVector};
use crate::retrieval::{ExplorationMode, Indicator};

/// Environment variable naming the key file for the memory store.
pub const MEMORY_KEY_ENV: &str = "PRIVGEMO_MEMORY_KEY";

/// Minimum hybrid score before a retrieved record may steer control
/// decisions (initial action, transition replay, warning prunes). Weak
/// generic matches stay available as templates but do not drive policy.
pub const CONTROL_HINT_FLOOR: f64 = 0.6;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("raw label {0:?} found in a template; write refused")]
    LeakageGuard(String),
    #[error("memory key file missing or unreadable: {0}")]
    MissingKey(String),
    #[error("store io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store corrupt: {0}")]
    Corrupt(String),
}

/// A recorded failure pattern, kept as a warning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub mode: ExplorationMode,
    pub depth: usize,
    pub note: String,
}

/// Outcome summary of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub sufficient: bool,
    #[serde(default)]
    pub failure_notes: Vec<FailureNote>,
}

/// One stored experience. Working fields are plaintext in memory; at rest
/// everything except the embeddings and scalars lives in the sealed blob.
#[derive(Debug)]
pub struct ExperienceRecord {
    pub id: u64,
    /// Indicator template with TOPIC_i/X/ANS placeholders.
    pub anon_indicator: String,
    pub d_predict: usize,
    pub trajectory: Vec<(ExplorationMode, usize)>,
    pub path_templates: Vec<String>,
    pub outcome: Outcome,
    pub q_embedding: EmbeddingVector,
    pub i_embedding: EmbeddingVector,
    /// `None` marks built-in exemplars, compatible with every policy.
    pub policy_tag: Option<PolicyTag>,
    hit_count: AtomicU32,
}

impl ExperienceRecord {
    pub fn hits(&self) -> u32 {
        self.hit_count.load(Ordering::Relaxed)
    }

    pub fn bump_hits(&self) {
        self.hit_count.fetch_add(1, Ordering::Relaxed);
    }

    fn compatible_with(&self, tag: &PolicyTag) -> bool {
        match &self.policy_tag {
            Some(own) => own.compatible(tag),
            None => true,
        }
    }
}

/// Sealed portion of a persisted record.
#[derive(Serialize, Deserialize)]
struct SealedPayload {
    anon_indicator: String,
    trajectory: Vec<(ExplorationMode, usize)>,
    path_templates: Vec<String>,
    outcome: Outcome,
}

/// One line of the on-disk record log. Embeddings live in the sidecar.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    d_predict: usize,
    policy_tag: Option<PolicyTag>,
    hit_count: u32,
    payload: String,
}

/// The experience pool: exact nearest-neighbor search over stored vectors.
#[derive(Default)]
pub struct ExperiencePool {
    records: Vec<Arc<ExperienceRecord>>,
    next_id: u64,
}

impl ExperiencePool {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Arc<ExperienceRecord>] {
        &self.records
    }
}

/// Recency + hit statistics for one buffered record.
#[derive(Debug, Clone, Copy, Default)]
struct BufStat {
    hits: u32,
    last_seq: u64,
    last_score: f64,
}

/// High-frequency buffer over the pool: caps tracked exemplars and evicts
/// the lowest buffer score.
pub struct HighFreqBuffer {
    capacity: usize,
    entries: HashMap<u64, BufStat>,
    seq: u64,
}

impl HighFreqBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: HashMap::new(),
            seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn touch(&mut self, id: u64, score: f64, limits: &Limits) {
        self.seq += 1;
        let entry = self.entries.entry(id).or_default();
        entry.hits += 1;
        entry.last_seq = self.seq;
        entry.last_score = score;
        if self.entries.len() > self.capacity {
            let evict = self
                .entries
                .iter()
                .min_by(|a, b| {
                    let score = |s: &BufStat| {
                        limits.lambda_sim * s.last_score
                            + limits.lambda_hit * normalized_count(s.hits)
                    };
                    score(a.1)
                        .partial_cmp(&score(b.1))
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.1.last_seq.cmp(&b.1.last_seq))
                })
                .map(|(&id, _)| id);
            if let Some(id) = evict {
                self.entries.remove(&id);
            }
        }
    }
}

/// Bounded hit-count term: count/(count+1) keeps the buffer score finite
/// and strictly increasing in hits.
pub fn normalized_count(hits: u32) -> f64 {
    hits as f64 / (hits as f64 + 1.0)
}

/// A retrieval result with its scores.
#[derive(Clone)]
pub struct RetrievedExperience {
    pub record: Arc<ExperienceRecord>,
    /// Hybrid question/indicator similarity.
    pub score: f64,
    /// Similarity blended with hit frequency.
    pub buffer_score: f64,
}

/// Control hints derived from retrieved experience.
#[derive(Debug, Clone)]
pub struct ControlHints {
    pub skip_brain: bool,
    pub best_score: f64,
    pub init_mode: ExplorationMode,
    pub init_depth: usize,
    pub warnings: Vec<FailureNote>,
}

/// Dual-key retrieval: hybrid score `lq*cos(Q) + li*cos(I)` blended with
/// hit frequency, top `w_exp`, policy-incompatible records filtered out.
/// Hit counts of the returned records are incremented. When no indicator
/// exists yet (the pre-analysis gate), the question similarity stands in
/// for both keys.
pub fn get_exp(
    pool: &ExperiencePool,
    buffer: &mut HighFreqBuffer,
    question_text: &str,
    indicator: Option<&Indicator>,
    policy_tag: &PolicyTag,
    limits: &Limits,
    embedder: &dyn Embedder,
) -> (Vec<RetrievedExperience>, ControlHints) {
    let d_max = limits.d_max;
    let d_predict = indicator.map(|i| i.d_predict).unwrap_or(d_max);
    let default_hints = |retrieved: &[RetrievedExperience]| {
        let (init_mode, init_depth) = init_policy(retrieved, d_predict, d_max);
        let best = retrieved.first();
        ControlHints {
            skip_brain: best
                .map(|r| r.score >= limits.gate_threshold && r.record.outcome.sufficient)
                .unwrap_or(false),
            best_score: best.map(|r| r.score).unwrap_or(0.0),
            init_mode,
            init_depth,
            warnings: retrieved
                .iter()
                .flat_map(|r| r.record.outcome.failure_notes.clone())
                .collect(),
        }
    };
    let Ok(e_q) = embedder.embed(question_text) else {
        return (Vec::new(), default_hints(&[]));
    };
    let e_i = indicator.and_then(|i| embedder.embed(&i.chain_string()).ok());
    let mut retrieved: Vec<RetrievedExperience> = pool
        .records
        .iter()
        .filter(|r| r.compatible_with(policy_tag))
        .map(|record| {
            let cos_q = e_q.cosine(&record.q_embedding);
            let cos_i = match &e_i {
                Some(e_i) => e_i.cosine(&record.i_embedding),
                None => cos_q,
            };
            let score = limits.lambda_q * cos_q + limits.lambda_i * cos_i;
            let buffer_score =
                limits.lambda_sim * score + limits.lambda_hit * normalized_count(record.hits());
            RetrievedExperience {
                record: record.clone(),
                score,
                buffer_score,
            }
        })
        .collect();
    retrieved.sort_by(|a, b| {
        b.buffer_score
            .partial_cmp(&a.buffer_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.record.id.cmp(&b.record.id))
    });
    retrieved.truncate(limits.w_exp);
    for r in &retrieved {
        r.record.bump_hits();
        buffer.touch(r.record.id, r.score, limits);
    }
    let hints = default_hints(&retrieved);
    (retrieved, hints)
}

/// Experience-guided initial action: `(Topic, min(D_predict, D_max))`
/// unless the best sufficient record recorded a first action.
pub fn init_policy(
    retrieved: &[RetrievedExperience],
    d_predict: usize,
    d_max: usize,
) -> (ExplorationMode, usize) {
    let default = (ExplorationMode::Topic, d_predict.min(d_max).max(1));
    retrieved
        .iter()
        .find(|r| {
            r.score >= CONTROL_HINT_FLOOR
                && r.record.outcome.sufficient
                && !r.record.trajectory.is_empty()
        })
        .map(|r| {
            let (mode, depth) = r.record.trajectory[0];
            (mode, depth.min(d_max).max(1))
        })
        .unwrap_or(default)
}

/// Current node position for transition suggestions.
#[derive(Debug, Clone, Copy)]
pub struct NodeSnapshot {
    pub mode: ExplorationMode,
    pub depth: usize,
    pub d_predict: usize,
    pub d_max: usize,
}

/// A suggested transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSuggestion {
    pub mode: ExplorationMode,
    pub depth: usize,
    pub prune: bool,
}

/// Transition after a failed verification: replay a matching success
/// trajectory, honor warning patterns (suggesting a prune), otherwise the
/// default ladder deepens toward min(D_predict, D_max) before switching
/// from Topic to Refine to Predict.
pub fn next_step(retrieved: &[RetrievedExperience], state: NodeSnapshot) -> StepSuggestion {
    for r in retrieved {
        if r.score < CONTROL_HINT_FLOOR || !r.record.outcome.sufficient {
            continue;
        }
        let traj = &r.record.trajectory;
        if let Some(pos) = traj
            .iter()
            .position(|&(m, d)| m == state.mode && d == state.depth)
        {
            if pos + 1 < traj.len() {
                let (mode, depth) = traj[pos + 1];
                return StepSuggestion {
                    mode,
                    depth: depth.min(state.d_max),
                    prune: false,
                };
            }
        }
    }
    let warned = retrieved.iter().filter(|r| r.score >= CONTROL_HINT_FLOOR).any(|r| {
        r.record
            .outcome
            .failure_notes
            .iter()
            .any(|n| n.mode == state.mode && n.depth == state.depth)
    });
    if warned {
        let mode = state.mode.next().unwrap_or(state.mode);
        return StepSuggestion {
            mode,
            depth: state.depth,
            prune: true,
        };
    }
    if state.depth < state.d_predict.min(state.d_max) {
        StepSuggestion {
            mode: state.mode,
            depth: state.depth + 1,
            prune: false,
        }
    } else if let Some(next) = state.mode.next() {
        StepSuggestion {
            mode: next,
            depth: state.depth,
            prune: false,
        }
    } else {
        StepSuggestion {
            mode: state.mode,
            depth: state.depth,
            prune: false,
        }
    }
}

/// Verified artifacts of a finished run, ready for write-back.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub anon_indicator_template: String,
    pub d_predict: usize,
    pub trajectory: Vec<(ExplorationMode, usize)>,
    pub path_templates: Vec<String>,
    pub outcome: Outcome,
}

/// Result of a write-back attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteOutcome {
    /// Outcome was not sufficient; the pool is untouched.
    Skipped,
    /// Duplicate templates merged into an existing record.
    Merged(u64),
    Appended(u64),
}

fn normalize_template(t: &str) -> String {
    t.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Persistent store wrapping the pool, the buffer, and the encryption key.
pub struct MemoryStore {
    pub pool: ExperiencePool,
    pub buffer: HighFreqBuffer,
    dir: Option<PathBuf>,
    key: [u8; 32],
    fresh: bool,
}

impl MemoryStore {
    /// Volatile store (tests and one-shot runs).
    pub fn in_memory(key: [u8; 32], limits: &Limits) -> Self {
        Self {
            pool: ExperiencePool::default(),
            buffer: HighFreqBuffer::new(limits.buffer_capacity),
            dir: None,
            key,
            fresh: true,
        }
    }

    /// Opens (or creates) the store directory, loading the record log and
    /// the vector sidecar.
    pub fn open(dir: &Path, key: [u8; 32], limits: &Limits) -> Result<Self, MemoryError> {
        let mut store = Self::in_memory(key, limits);
        store.dir = Some(dir.to_path_buf());
        if dir.join("records.jsonl").exists() {
            store.fresh = false;
            store.load()?;
        } else {
            std::fs::create_dir_all(dir)?;
        }
        Ok(store)
    }

    /// Reads the 32-byte (hex or raw) key from the file named by
    /// `PRIVGEMO_MEMORY_KEY`.
    pub fn key_from_env() -> Result<[u8; 32], MemoryError> {
        let path = std::env::var(MEMORY_KEY_ENV)
            .map_err(|_| MemoryError::MissingKey(format!("{MEMORY_KEY_ENV} not set")))?;
        let bytes = std::fs::read(&path).map_err(|e| MemoryError::MissingKey(format!("{path}: {e}")))?;
        key_from_bytes(&bytes).ok_or_else(|| MemoryError::MissingKey(format!("{path}: not a 32-byte key")))
    }

    pub fn record_count(&self) -> usize {
        self.pool.len()
    }

    /// True until the store has been written once. A cleared store is not
    /// fresh: its exemplars come back on the next run, not on inspect.
    pub fn is_fresh(&self) -> bool {
        self.fresh
    }

    /// Seeds the five built-in exemplars when the pool is empty (cold
    /// start). Returns how many were added.
    pub fn seed_cold_start(&mut self, embedder: &dyn Embedder) -> usize {
        if !self.pool.is_empty() {
            return 0;
        }
        let exemplars = [
            (
                "which attribute does the entity related to the topic have",
                "TOPIC_1 -- r1 -- X -- r2 -- ANS",
                2,
                vec![(ExplorationMode::Topic, 2)],
            ),
            (
                "what entity links the two topics",
                "TOPIC_1 -- r1 -- ANS -- r2 -- TOPIC_2",
                1,
                vec![(ExplorationMode::Topic, 1)],
            ),
            (
                "what entity is directly related to the topic",
                "TOPIC_1 -- r1 -- ANS",
                1,
                vec![(ExplorationMode::Topic, 1)],
            ),
            (
                "which entity connects to both topics over two hops",
                "TOPIC_1 -- r1 -- X -- r2 -- ANS -- r3 -- TOPIC_2",
                2,
                vec![(ExplorationMode::Topic, 2), (ExplorationMode::Refine, 3)],
            ),
            (
                "who matches both the role and the place constraints",
                "TOPIC_1 -- r1 -- TOPIC_2 -- r2 -- ANS -- r3 -- TOPIC_3",
                2,
                vec![(ExplorationMode::Topic, 2), (ExplorationMode::Predict, 3)],
            ),
        ];
        let mut added = 0;
        for (question, template, d_predict, trajectory) in exemplars {
            let Ok(q_embedding) = embedder.embed(question) else { continue };
            let Ok(i_embedding) = embedder.embed(template) else { continue };
            let id = self.pool.next_id;
            self.pool.next_id += 1;
            self.pool.records.push(Arc::new(ExperienceRecord {
                id,
                anon_indicator: template.to_string(),
                d_predict,
                trajectory,
                path_templates: vec![template.to_string()],
                outcome: Outcome {
                    sufficient: true,
                    failure_notes: Vec::new(),
                },
                q_embedding,
                i_embedding,
                policy_tag: None,
                hit_count: AtomicU32::new(0),
            }));
            added += 1;
        }
        if added > 0 {
            self.fresh = false;
            let _ = self.persist_all();
        }
        added
    }

    /// Write-back of verified experience. No-op unless the outcome is
    /// sufficient; every template must pass the raw-dictionary scan first.
    pub fn write_back_if_success(
        &mut self,
        question_text: &str,
        artifacts: RunArtifacts,
        policy_tag: PolicyTag,
        dict: &RawDictionary,
        limits: &Limits,
        embedder: &dyn Embedder,
    ) -> Result<WriteOutcome, MemoryError> {
        if !artifacts.outcome.sufficient {
            return Ok(WriteOutcome::Skipped);
        }
        let templates: Vec<String> = artifacts
            .path_templates
            .iter()
            .map(|t| normalize_template(t))
            .collect();
        for text in templates.iter().chain([&artifacts.anon_indicator_template]) {
            if let Some(label) = dict.scan(text) {
                return Err(MemoryError::LeakageGuard(label.to_string()));
            }
        }
        // MergeTemplates: identical normalized artifacts fold into the
        // existing record instead of duplicating it.
        for record in &self.pool.records {
            if record.anon_indicator == artifacts.anon_indicator_template
                && record.path_templates == templates
                && record.policy_tag.is_some()
            {
                record.bump_hits();
                let id = record.id;
                self.persist_all()?;
                return Ok(WriteOutcome::Merged(id));
            }
        }
        let q_embedding = embedder
            .embed(question_text)
            .map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        let i_embedding = embedder
            .embed(&artifacts.anon_indicator_template)
            .map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        let id = self.pool.next_id;
        self.pool.next_id += 1;
        let record = Arc::new(ExperienceRecord {
            id,
            anon_indicator: artifacts.anon_indicator_template,
            d_predict: artifacts.d_predict,
            trajectory: artifacts.trajectory,
            path_templates: templates,
            outcome: artifacts.outcome,
            q_embedding,
            i_embedding,
            policy_tag: Some(policy_tag),
            hit_count: AtomicU32::new(0),
        });
        self.pool.records.push(record.clone());
        self.buffer.touch(id, 1.0, limits);
        // PruneLowValue: beyond the cap, lowest (hits, recency) goes first.
        while self.pool.len() > limits.pool_capacity {
            let evict = self
                .pool
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.policy_tag.is_some())
                .min_by_key(|(_, r)| (r.hits(), r.id))
                .map(|(i, _)| i);
            match evict {
                Some(i) => {
                    let gone = self.pool.records.remove(i);
                    self.buffer.entries.remove(&gone.id);
                }
                None => break,
            }
        }
        if let Some(dir) = self.dir.clone() {
            self.append_record(&dir, self.pool.records.last().expect("just pushed"))?;
        }
        Ok(WriteOutcome::Appended(id))
    }

    fn seal(&self, record: &ExperienceRecord) -> Result<RecordLine, MemoryError> {
        let payload = SealedPayload {
            anon_indicator: record.anon_indicator.clone(),
            trajectory: record.trajectory.clone(),
            path_templates: record.path_templates.clone(),
            outcome: record.outcome.clone(),
        };
        let plaintext =
            serde_json::to_vec(&payload).map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        let cipher = ChaCha20Poly1305::new((&self.key).into());
        let mut nonce = [0u8; 12];
        rand::thread_rng().fill_bytes(&mut nonce);
        let mut sealed = cipher
            .encrypt(Nonce::from_slice(&nonce), plaintext.as_slice())
            .map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        let mut blob = nonce.to_vec();
        blob.append(&mut sealed);
        Ok(RecordLine {
            id: record.id,
            d_predict: record.d_predict,
            policy_tag: record.policy_tag,
            hit_count: record.hits(),
            payload: base64::engine::general_purpose::STANDARD.encode(blob),
        })
    }

    fn unseal(&self, line: &RecordLine, q: EmbeddingVector, i: EmbeddingVector) -> Result<ExperienceRecord, MemoryError> {
        let blob = base64::engine::general_purpose::STANDARD
            .decode(&line.payload)
            .map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        if blob.len() < 12 {
            return Err(MemoryError::Corrupt("payload too short".into()));
        }
        let cipher = ChaCha20Poly1305::new((&self.key).into());
        let plaintext = cipher
            .decrypt(Nonce::from_slice(&blob[..12]), &blob[12..])
            .map_err(|_| MemoryError::Corrupt("payload decryption failed (wrong key?)".into()))?;
        let payload: SealedPayload =
            serde_json::from_slice(&plaintext).map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        Ok(ExperienceRecord {
            id: line.id,
            anon_indicator: payload.anon_indicator,
            d_predict: line.d_predict,
            trajectory: payload.trajectory,
            path_templates: payload.path_templates,
            outcome: payload.outcome,
            q_embedding: q,
            i_embedding: i,
            policy_tag: line.policy_tag,
            hit_count: AtomicU32::new(line.hit_count),
        })
    }

    fn append_record(&self, dir: &Path, record: &Arc<ExperienceRecord>) -> Result<(), MemoryError> {
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        let line = self.seal(record)?;
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("records.jsonl"))?;
        writeln!(
            log,
            "{}",
            serde_json::to_string(&line).map_err(|e| MemoryError::Corrupt(e.to_string()))?
        )?;
        let mut vectors = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("vectors.bin"))?;
        for v in record.q_embedding.values().iter().chain(record.i_embedding.values()) {
            vectors.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Rewrites both files from the in-memory pool (used after merges,
    /// pruning, imports, and clears).
    pub fn persist_all(&self) -> Result<(), MemoryError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        let mut log = Vec::new();
        let mut vectors = Vec::new();
        for record in &self.pool.records {
            let line = self.seal(record)?;
            log.extend_from_slice(
                serde_json::to_string(&line)
                    .map_err(|e| MemoryError::Corrupt(e.to_string()))?
                    .as_bytes(),
            );
            log.push(b'\n');
            for v in record.q_embedding.values().iter().chain(record.i_embedding.values()) {
                vectors.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(dir.join("records.jsonl"))?.write_all(&log)?;
        std::fs::File::create(dir.join("vectors.bin"))?.write_all(&vectors)?;
        Ok(())
    }

    fn load(&mut self) -> Result<(), MemoryError> {
        let dir = self.dir.clone().expect("load requires a directory");
        let log = std::fs::read_to_string(dir.join("records.jsonl"))?;
        let vectors = std::fs::read(dir.join("vectors.bin")).unwrap_or_default();
        let mut offset = 0;
        let mut take_vector = |dim_bytes: usize| -> Option<EmbeddingVector> {
            let end = offset + dim_bytes;
            if end > vectors.len() {
                return None;
            }
            let values: Vec<f64> = vectors[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            EmbeddingVector::new(values).ok()
        };
        for line in log.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: RecordLine =
                serde_json::from_str(line).map_err(|e| MemoryError::Corrupt(e.to_string()))?;
            let dim_bytes = crate::gateway::DEFAULT_EMBED_DIM * 8;
            let q = take_vector(dim_bytes)
                .ok_or_else(|| MemoryError::Corrupt("vector sidecar truncated".into()))?;
            let i = take_vector(dim_bytes)
                .ok_or_else(|| MemoryError::Corrupt("vector sidecar truncated".into()))?;
            let record = self.unseal(&parsed, q, i)?;
            self.pool.next_id = self.pool.next_id.max(record.id + 1);
            self.pool.records.push(Arc::new(record));
        }
        Ok(())
    }

    /// Exports the whole store (sealed payloads and vectors) to one JSON
    /// file that `import` round-trips.
    pub fn export(&self, path: &Path) -> Result<(), MemoryError> {
        #[derive(Serialize)]
        struct Export {
            records: Vec<serde_json::Value>,
        }
        let mut records = Vec::new();
        for record in &self.pool.records {
            let line = self.seal(record)?;
            records.push(serde_json::json!({
                "line": line,
                "q": record.q_embedding.values(),
                "i": record.i_embedding.values(),
            }));
        }
        std::fs::write(
            path,
            serde_json::to_string_pretty(&Export { records })
                .map_err(|e| MemoryError::Corrupt(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn import(&mut self, path: &Path) -> Result<usize, MemoryError> {
        let text = std::fs::read_to_string(path)?;
        let parsed: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        let records = parsed["records"]
            .as_array()
            .ok_or_else(|| MemoryError::Corrupt("missing records array".into()))?;
        let mut count = 0;
        for entry in records {
            let line: RecordLine = serde_json::from_value(entry["line"].clone())
                .map_err(|e| MemoryError::Corrupt(e.to_string()))?;
            let vec_of = |v: &serde_json::Value| -> Result<EmbeddingVector, MemoryError> {
                let values: Vec<f64> = serde_json::from_value(v.clone())
                    .map_err(|e| MemoryError::Corrupt(e.to_string()))?;
                EmbeddingVector::new(values).map_err(|e| MemoryError::Corrupt(e.to_string()))
            };
            let record = self.unseal(&line, vec_of(&entry["q"])?, vec_of(&entry["i"])?)?;
            self.pool.next_id = self.pool.next_id.max(record.id + 1);
            self.pool.records.push(Arc::new(record));
            count += 1;
        }
        self.persist_all()?;
        Ok(count)
    }

    /// Drops every record (cold-start exemplars reseed on the next run).
    pub fn clear(&mut self) -> Result<(), MemoryError> {
        self.pool.records.clear();
        self.pool.next_id = 0;
        self.buffer.entries.clear();
        self.fresh = false;
        self.persist_all()
    }
}

fn key_from_bytes(bytes: &[u8]) -> Option<[u8; 32]> {
    if bytes.len() == 32 {
        return bytes.try_into().ok();
    }
    let text = std::str::from_utf8(bytes).ok()?.trim();
    let decoded = hex::decode(text).ok()?;
    decoded.try_into().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonymize::RelationMode;
    use crate::gateway::HashEmbedder;
    use crate::retrieval::IndicatorSource;

    fn limits() -> Limits {
        Limits::default()
    }

    fn tag() -> PolicyTag {
        PolicyTag {
            relation_mode: RelationMode::Utility,
            ratio: 1.0,
        }
    }

    fn artifacts(indicator: &str, tpl: &str) -> RunArtifacts {
        RunArtifacts {
            anon_indicator_template: indicator.to_string(),
            d_predict: 2,
            trajectory: vec![(ExplorationMode::Topic, 2)],
            path_templates: vec![tpl.to_string()],
            outcome: Outcome {
                sufficient: true,
                failure_notes: Vec::new(),
            },
        }
    }

    #[test]
    fn cold_start_seeds_five_exemplars() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        assert_eq!(store.seed_cold_start(&embedder), 5);
        assert_eq!(store.record_count(), 5);
        assert_eq!(store.seed_cold_start(&embedder), 0, "seeding is idempotent");
    }

    #[test]
    fn empty_pool_gives_default_hints() {
        let embedder = HashEmbedder::default();
        let store = MemoryStore::in_memory([7; 32], &limits());
        let mut buffer = HighFreqBuffer::new(10);
        let (records, hints) = get_exp(
            &store.pool,
            &mut buffer,
            "any question",
            None,
            &tag(),
            &limits(),
            &embedder,
        );
        assert!(records.is_empty());
        assert!(!hints.skip_brain);
        assert_eq!(hints.init_mode, ExplorationMode::Topic);
        assert_eq!(hints.init_depth, 3, "min(D_predict, D_max) with no indicator");
    }

    #[test]
    fn identical_record_scores_one_and_gates() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let question = "Lou Seal is the mascot for the team that last won the World Series when?";
        store
            .write_back_if_success(
                question,
                artifacts("TOPIC_1 -- mascot_team -- X -- won -- ANS", "TOPIC_1 -- r -- ANS"),
                tag(),
                &RawDictionary::default(),
                &limits(),
                &embedder,
            )
            .unwrap();
        let mut buffer = HighFreqBuffer::new(10);
        let (records, hints) = get_exp(
            &store.pool,
            &mut buffer,
            question,
            None,
            &tag(),
            &limits(),
            &embedder,
        );
        assert!((records[0].score - 1.0).abs() < 1e-9);
        assert!(hints.skip_brain);
        assert_eq!(records[0].record.hits(), 1, "retrieval bumps the counter");
    }

    #[test]
    fn hybrid_score_orders_records() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        store
            .write_back_if_success(
                "who directed the film about the sea",
                artifacts("TOPIC_1 -- directed -- ANS", "TOPIC_1 -- directed -- ANS"),
                tag(),
                &RawDictionary::default(),
                &limits(),
                &embedder,
            )
            .unwrap();
        store
            .write_back_if_success(
                "completely different text about mountains and rivers",
                artifacts("TOPIC_1 -- r9 -- X -- r8 -- ANS", "TOPIC_1 -- r9 -- ANS"),
                tag(),
                &RawDictionary::default(),
                &limits(),
                &embedder,
            )
            .unwrap();
        let mut buffer = HighFreqBuffer::new(10);
        let ind = Indicator::parse_chain("tok -- directed -- ?ans", &["tok".into()], IndicatorSource::Hand).unwrap();
        let (records, _) = get_exp(
            &store.pool,
            &mut buffer,
            "who directed the film about the sea",
            Some(&ind),
            &tag(),
            &limits(),
            &embedder,
        );
        assert_eq!(records[0].record.id, 0, "matching question+indicator ranks first");
        assert!(records[0].score > records[1].score);
    }

    #[test]
    fn policy_incompatible_records_filtered() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        store
            .write_back_if_success(
                "question one",
                artifacts("TOPIC_1 -- a -- ANS", "TOPIC_1 -- a -- ANS"),
                PolicyTag {
                    relation_mode: RelationMode::Privacy,
                    ratio: 1.0,
                },
                &RawDictionary::default(),
                &limits(),
                &embedder,
            )
            .unwrap();
        let mut buffer = HighFreqBuffer::new(10);
        let (records, _) = get_exp(
            &store.pool,
            &mut buffer,
            "question one",
            None,
            &tag(), // utility mode: incompatible with the stored record
            &limits(),
            &embedder,
        );
        assert!(records.is_empty());
        let (records, _) = get_exp(
            &store.pool,
            &mut buffer,
            "question one",
            None,
            &PolicyTag {
                relation_mode: RelationMode::Privacy,
                ratio: 0.9,
            },
            &limits(),
            &embedder,
        );
        assert_eq!(records.len(), 1, "ratio within 0.2 is compatible");
    }

    #[test]
    fn leakage_guard_refuses_raw_labels() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let dict = RawDictionary::new(["San Francisco Giants".to_string()]);
        let err = store
            .write_back_if_success(
                "q",
                artifacts(
                    "TOPIC_1 -- r -- ANS",
                    "TOPIC_1 -- mascot.team -- San Francisco Giants -- championships -- ANS",
                ),
                tag(),
                &dict,
                &limits(),
                &embedder,
            )
            .unwrap_err();
        assert!(matches!(err, MemoryError::LeakageGuard(_)));
        assert_eq!(store.record_count(), 0);
    }

    #[test]
    fn insufficient_outcome_is_a_no_op() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let mut a = artifacts("TOPIC_1 -- r -- ANS", "TOPIC_1 -- r -- ANS");
        a.outcome.sufficient = false;
        let outcome = store
            .write_back_if_success("q", a, tag(), &RawDictionary::default(), &limits(), &embedder)
            .unwrap();
        assert_eq!(outcome, WriteOutcome::Skipped);
        assert_eq!(store.record_count(), 0);
    }

    #[test]
    fn duplicate_write_back_merges() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let a = artifacts("TOPIC_1 -- r -- ANS", "TOPIC_1   --  r --  ANS");
        let first = store
            .write_back_if_success("q", a.clone(), tag(), &RawDictionary::default(), &limits(), &embedder)
            .unwrap();
        let WriteOutcome::Appended(id) = first else { panic!("expected append") };
        let second = store
            .write_back_if_success("q", a, tag(), &RawDictionary::default(), &limits(), &embedder)
            .unwrap();
        assert_eq!(second, WriteOutcome::Merged(id));
        assert_eq!(store.record_count(), 1);
    }

    #[test]
    fn next_step_ladder_and_replay() {
        // Default ladder: deepen first while below the predicted depth.
        let step = next_step(
            &[],
            NodeSnapshot {
                mode: ExplorationMode::Topic,
                depth: 1,
                d_predict: 2,
                d_max: 3,
            },
        );
        assert_eq!(step, StepSuggestion { mode: ExplorationMode::Topic, depth: 2, prune: false });
        // At the cap, move to the next mode.
        let step = next_step(
            &[],
            NodeSnapshot {
                mode: ExplorationMode::Topic,
                depth: 2,
                d_predict: 2,
                d_max: 3,
            },
        );
        assert_eq!(step.mode, ExplorationMode::Refine);
        assert!(!step.prune);

        // Trajectory replay: a stored success at (Topic,2) -> (Refine,3).
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let mut a = artifacts("TOPIC_1 -- r -- ANS", "TOPIC_1 -- r -- ANS");
        a.trajectory = vec![(ExplorationMode::Topic, 2), (ExplorationMode::Refine, 3)];
        store
            .write_back_if_success("q", a, tag(), &RawDictionary::default(), &limits(), &embedder)
            .unwrap();
        let mut buffer = HighFreqBuffer::new(10);
        let (records, _) = get_exp(&store.pool, &mut buffer, "q", None, &tag(), &limits(), &embedder);
        let step = next_step(
            &records,
            NodeSnapshot {
                mode: ExplorationMode::Topic,
                depth: 2,
                d_predict: 2,
                d_max: 3,
            },
        );
        assert_eq!(step, StepSuggestion { mode: ExplorationMode::Refine, depth: 3, prune: false });
    }

    #[test]
    fn warning_match_suggests_prune() {
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let mut a = artifacts("TOPIC_1 -- r -- ANS", "TOPIC_1 -- r -- ANS");
        a.outcome.failure_notes = vec![FailureNote {
            mode: ExplorationMode::Refine,
            depth: 3,
            note: "never verified".to_string(),
        }];
        store
            .write_back_if_success("q", a, tag(), &RawDictionary::default(), &limits(), &embedder)
            .unwrap();
        let mut buffer = HighFreqBuffer::new(10);
        let (records, hints) =
            get_exp(&store.pool, &mut buffer, "q", None, &tag(), &limits(), &embedder);
        assert_eq!(hints.warnings.len(), 1);
        let step = next_step(
            &records,
            NodeSnapshot {
                mode: ExplorationMode::Refine,
                depth: 3,
                d_predict: 3,
                d_max: 3,
            },
        );
        assert!(step.prune);
    }

    #[test]
    fn init_policy_examples() {
        assert_eq!(init_policy(&[], 2, 3), (ExplorationMode::Topic, 2));
        let embedder = HashEmbedder::default();
        let mut store = MemoryStore::in_memory([7; 32], &limits());
        let mut a = artifacts("TOPIC_1 -- r -- ANS", "TOPIC_1 -- r -- ANS");
        a.trajectory = vec![(ExplorationMode::Refine, 5)];
        store
            .write_back_if_success("q", a, tag(), &RawDictionary::default(), &limits(), &embedder)
            .unwrap();
        let mut buffer = HighFreqBuffer::new(10);
        let (records, _) = get_exp(&store.pool, &mut buffer, "q", None, &tag(), &limits(), &embedder);
        assert_eq!(init_policy(&records, 2, 3), (ExplorationMode::Refine, 3), "depth clamps to d_max");
    }

    #[test]
    fn hit_promotion_never_lowers_buffer_score() {
        let l = limits();
        let score = 0.4;
        let mut prev = f64::MIN;
        for hits in 0..100 {
            let buf = l.lambda_sim * score + l.lambda_hit * normalized_count(hits);
            assert!(buf >= prev);
            prev = buf;
        }
    }

    #[test]
    fn persistence_round_trips_and_payload_is_sealed() {
        let embedder = HashEmbedder::default();
        let dir = tempfile::tempdir().unwrap();
        let l = limits();
        let mut store = MemoryStore::open(dir.path(), [9; 32], &l).unwrap();
        store
            .write_back_if_success(
                "the persisted question",
                artifacts("TOPIC_1 -- secret_rel -- ANS", "TOPIC_1 -- secret_rel -- ANS"),
                tag(),
                &RawDictionary::default(),
                &l,
                &embedder,
            )
            .unwrap();
        let raw = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
        assert!(!raw.contains("secret_rel"), "template must be sealed at rest");
        let reopened = MemoryStore::open(dir.path(), [9; 32], &l).unwrap();
        assert_eq!(reopened.record_count(), 1);
        assert_eq!(reopened.pool.records()[0].path_templates[0], "TOPIC_1 -- secret_rel -- ANS");
        // Wrong key refuses to decrypt.
        assert!(MemoryStore::open(dir.path(), [1; 32], &l).is_err());
        // Export/import round-trip into a fresh store.
        let export_path = dir.path().join("export.json");
        reopened.export(&export_path).unwrap();
        let mut fresh = MemoryStore::in_memory([9; 32], &l);
        assert_eq!(fresh.import(&export_path).unwrap(), 1);
        assert_eq!(fresh.record_count(), 1);
    }

    #[test]
    fn pool_cap_prunes_lowest_value() {
        let embedder = HashEmbedder::default();
        let l = Limits {
            pool_capacity: 2,
            ..limits()
        };
        let mut store = MemoryStore::in_memory([7; 32], &l);
        for i in 0..3 {
            store
                .write_back_if_success(
                    &format!("question number {i}"),
                    artifacts(
                        &format!("TOPIC_1 -- r{i} -- ANS"),
                        &format!("TOPIC_1 -- r{i} -- ANS"),
                    ),
                    tag(),
                    &RawDictionary::default(),
                    &l,
                    &embedder,
                )
                .unwrap();
        }
        assert_eq!(store.record_count(), 2);
        // The first (never retrieved) record is the pruned one.
        assert!(store.pool.records().iter().all(|r| r.id != 0));
    }
}
