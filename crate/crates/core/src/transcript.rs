//! Append-only run transcript: exposure ledger plus channel event log.
//!
//! Every KG expansion and every model exchange lands here with a payload
//! digest and a running exposure tally, which is what the boundary and
//! accounting tests interrogate. Brain-channel payloads are retained in
//! full (they are anonymized by construction) so transcripts can be scanned
//! for leaks after the fact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Exposure channel of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExposureKind {
    KgExpansion,
    BrainCall,
}

/// A single counted exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub kind: ExposureKind,
    /// Token count for channel messages, triple count for expansions.
    pub payload_size: usize,
    /// Reasoning-tree node the event belongs to, when applicable.
    pub node_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    KgExpansion,
    BrainSend,
    HandSend,
    Fallback,
    Warning,
    Note,
}

/// One transcript line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: usize,
    pub kind: EventKind,
    pub unix_ms: u128,
    pub label: String,
    pub payload_digest: String,
    pub payload_tokens: usize,
    pub node_id: Option<usize>,
    /// Running exposure tally after this event.
    pub kg_expansions: usize,
    pub brain_calls: usize,
}

/// Aggregate exposure totals for a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureTotals {
    pub kg_expansions: usize,
    pub brain_calls: usize,
    pub hand_calls: usize,
    pub brain_prompt_tokens: usize,
    pub brain_reply_tokens: usize,
    pub hand_prompt_tokens: usize,
    pub hand_reply_tokens: usize,
    pub hallucinated_tokens_dropped: usize,
}

/// Append-only event log for one run.
#[derive(Debug, Default)]
pub struct Transcript {
    events: Vec<TranscriptEvent>,
    brain_payloads: Vec<String>,
    totals: ExposureTotals,
    current_node: Option<usize>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn totals(&self) -> &ExposureTotals {
        &self.totals
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    /// Full text of everything sent on the Brain channel, in order.
    pub fn brain_payloads(&self) -> &[String] {
        &self.brain_payloads
    }

    pub fn set_current_node(&mut self, node: Option<usize>) {
        self.current_node = node;
    }

    pub fn exposure_events(&self) -> Vec<ExposureEvent> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::KgExpansion => Some(ExposureEvent {
                    kind: ExposureKind::KgExpansion,
                    payload_size: e.payload_tokens,
                    node_id: e.node_id,
                }),
                EventKind::BrainSend => Some(ExposureEvent {
                    kind: ExposureKind::BrainCall,
                    payload_size: e.payload_tokens,
                    node_id: e.node_id,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn record_kg_expansion(&mut self, label: &str, triple_count: usize) {
        self.totals.kg_expansions += 1;
        self.push(EventKind::KgExpansion, label, &triple_count.to_string(), triple_count);
    }

    pub fn record_brain_send(&mut self, label: &str, prompt: &str, reply: &str) {
        self.totals.brain_calls += 1;
        self.totals.brain_prompt_tokens += approx_tokens(prompt);
        self.totals.brain_reply_tokens += approx_tokens(reply);
        self.brain_payloads.push(prompt.to_string());
        let tokens = approx_tokens(prompt);
        self.push(EventKind::BrainSend, label, prompt, tokens);
    }

    pub fn record_hand_send(&mut self, label: &str, prompt: &str, reply: &str) {
        self.totals.hand_calls += 1;
        self.totals.hand_prompt_tokens += approx_tokens(prompt);
        self.totals.hand_reply_tokens += approx_tokens(reply);
        let tokens = approx_tokens(prompt);
        self.push(EventKind::HandSend, label, prompt, tokens);
    }

    pub fn record_fallback(&mut self, label: &str, detail: &str) {
        self.push(EventKind::Fallback, label, detail, 0);
    }

    pub fn record_warning(&mut self, label: &str, detail: &str) {
        self.push(EventKind::Warning, label, detail, 0);
    }

    pub fn record_note(&mut self, label: &str, detail: &str) {
        self.push(EventKind::Note, label, detail, 0);
    }

    pub fn count_hallucinated_tokens(&mut self, n: usize) {
        self.totals.hallucinated_tokens_dropped += n;
    }

    fn push(&mut self, kind: EventKind, label: &str, payload: &str, payload_tokens: usize) {
        self.events.push(TranscriptEvent {
            seq: self.events.len(),
            kind,
            unix_ms: now_ms(),
            label: label.to_string(),
            payload_digest: digest_hex(payload),
            payload_tokens,
            node_id: self.current_node,
            kg_expansions: self.totals.kg_expansions,
            brain_calls: self.totals.brain_calls,
        });
    }

    /// Serializes the event log as newline-delimited JSON records.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("transcript event serializes"));
            out.push('\n');
        }
        out
    }
}

/// Whitespace token count; the stand-in tokenizer for accounting.
pub fn approx_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn digest_hex(payload: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}
