//! Model backends and the privacy boundary they sit behind.
//!
//! A run talks to two chat channels: the remote Brain, which only ever
//! receives anonymized content (enforced mechanically here, not by
//! convention), and the local Hand, which may see raw facts. Scripted mock
//! backends make full pipelines deterministic for fixtures and tests; an
//! HTTP backend speaks a minimal chat-completion protocol for real models.

pub mod embed;
pub mod http;
pub mod mock;
mod templates;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::boundary::RawDictionary;
use crate::transcript::Transcript;

pub use embed::{Embedder, EmbeddingVector, HashEmbedder, DEFAULT_EMBED_DIM};
pub use templates::render;

/// Channel a template belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Brain,
    Hand,
}

/// Registered message schemas, one per prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    EntityExtraction,
    AnalysisDelegation,
    QuestionAnalysisBrain,
    QuestionAnalysisHand,
    FollowUp,
    Predict,
    PathSelect,
    PathRefine,
    Sufficiency,
    FinalAnswer,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::EntityExtraction => "entity_extraction",
            TemplateId::AnalysisDelegation => "analysis_delegation",
            TemplateId::QuestionAnalysisBrain => "question_analysis_brain",
            TemplateId::QuestionAnalysisHand => "question_analysis_hand",
            TemplateId::FollowUp => "follow_up",
            TemplateId::Predict => "predict",
            TemplateId::PathSelect => "path_select",
            TemplateId::PathRefine => "path_refine",
            TemplateId::Sufficiency => "sufficiency",
            TemplateId::FinalAnswer => "final_answer",
        }
    }

    /// Answer-producing templates decode greedily; exploration stays warm.
    pub fn temperature(self) -> f32 {
        match self {
            TemplateId::Sufficiency | TemplateId::FinalAnswer => 0.0,
            _ => 0.4,
        }
    }
}

/// Ordered field map rendered into a prompt.
pub type TemplateFields = BTreeMap<&'static str, String>;

/// A fully rendered outbound message.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub fields: TemplateFields,
    pub prompt: String,
    pub temperature: f32,
    pub max_tokens: usize,
}

/// A chat completion backend. Implementations must be deterministic for
/// scripted mocks; network backends are internally synchronized clients.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    fn name(&self) -> &str {
        "backend"
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    /// A raw label reached the Brain channel. This is an engine bug and
    /// aborts the send before anything leaves.
    #[error("privacy boundary violation: raw label {label:?} in outbound {template} message")]
    BoundaryViolation { template: String, label: String },
    #[error("malformed model output for {template}: {detail}")]
    MalformedOutput { template: String, detail: String },
    #[error("gateway transport error: {0}")]
    Network(String),
    #[error("no backend configured for {0} channel")]
    Disabled(&'static str),
    #[error("brain call budget exhausted after {0} calls")]
    BudgetExhausted(usize),
    #[error("cannot embed empty text")]
    EmptyEmbedInput,
}

impl GatewayError {
    pub fn is_malformed(&self) -> bool {
        matches!(self, GatewayError::MalformedOutput { .. })
    }
}

/// The three model handles a run needs.
#[derive(Clone)]
pub struct GatewayHandles {
    pub brain: Option<Arc<dyn ChatBackend>>,
    pub hand: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn Embedder>,
}

impl GatewayHandles {
    /// Scripted mock pair sharing one scenario, with the default embedder.
    pub fn scripted(scenario: mock::Scenario) -> Self {
        let backend = Arc::new(mock::ScriptedBackend::new(scenario));
        Self {
            brain: Some(backend.clone()),
            hand: backend,
            embedder: Arc::new(HashEmbedder::default()),
        }
    }
}

/// Maximum generation length forwarded to backends.
pub const MAX_GENERATION_TOKENS: usize = 256;

fn build_request(template: TemplateId, fields: TemplateFields) -> ChatRequest {
    let prompt = templates::render(template, &fields);
    ChatRequest {
        temperature: template.temperature(),
        max_tokens: MAX_GENERATION_TOKENS,
        template,
        fields,
        prompt,
    }
}

/// Sends an anonymized message on the Brain channel. Every outbound prompt
/// must pass the raw-dictionary scan; the per-run call budget is enforced
/// before the send.
pub fn brain_call(
    backend: Option<&Arc<dyn ChatBackend>>,
    template: TemplateId,
    fields: TemplateFields,
    dict: &RawDictionary,
    max_calls: usize,
    transcript: &mut Transcript,
) -> Result<String, GatewayError> {
    let backend = backend.ok_or(GatewayError::Disabled("brain"))?;
    let request = build_request(template, fields);
    if let Some(label) = dict.scan(&request.prompt) {
        return Err(GatewayError::BoundaryViolation {
            template: template.as_str().to_string(),
            label: label.to_string(),
        });
    }
    if transcript.totals().brain_calls >= max_calls {
        return Err(GatewayError::BudgetExhausted(max_calls));
    }
    let reply = backend.complete(&request)?;
    transcript.record_brain_send(template.as_str(), &request.prompt, &reply);
    Ok(reply)
}

/// Sends a message on the local Hand channel (raw content allowed).
pub fn hand_call(
    backend: &Arc<dyn ChatBackend>,
    template: TemplateId,
    fields: TemplateFields,
    transcript: &mut Transcript,
) -> Result<String, GatewayError> {
    let request = build_request(template, fields);
    let reply = backend.complete(&request)?;
    transcript.record_hand_send(template.as_str(), &request.prompt, &reply);
    Ok(reply)
}

/// Calls a channel and parses the reply, retrying once on a malformed
/// reply before surfacing the error for the caller's fallback.
#[allow(clippy::too_many_arguments)]
pub fn call_parsed<T>(
    role: Role,
    brain: Option<&Arc<dyn ChatBackend>>,
    hand: &Arc<dyn ChatBackend>,
    template: TemplateId,
    fields: TemplateFields,
    dict: &RawDictionary,
    max_brain_calls: usize,
    transcript: &mut Transcript,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, GatewayError> {
    for attempt in 0..2 {
        let reply = match role {
            Role::Brain => brain_call(
                brain,
                template,
                fields.clone(),
                dict,
                max_brain_calls,
                transcript,
            )?,
            Role::Hand => hand_call(hand, template, fields.clone(), transcript)?,
        };
        match parse(&reply).or_else(|_| {
            extract_json_block(&reply)
                .ok_or_else(|| "no parsable block".to_string())
                .and_then(&parse)
        }) {
            Ok(value) => return Ok(value),
            Err(detail) if attempt == 0 => {
                transcript.record_fallback(template.as_str(), &format!("retry: {detail}"));
            }
            Err(detail) => {
                return Err(GatewayError::MalformedOutput {
                    template: template.as_str().to_string(),
                    detail,
                })
            }
        }
    }
    unreachable!("loop returns on every branch")
}

/// Lenient recovery: the outermost `{...}` span of a reply, if any.
pub fn extract_json_block(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    (end > start).then(|| &reply[start..=end])
}

/// Parses a strict-JSON reply into `T` for use with [`call_parsed`].
pub fn parse_json<T: serde::de::DeserializeOwned>(reply: &str) -> Result<T, String> {
    serde_json::from_str(reply.trim()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(&'static str);
    impl ChatBackend for Fixed {
        fn complete(&self, _request: &ChatRequest) -> Result<String, GatewayError> {
            Ok(self.0.to_string())
        }
    }

    fn fields(q: &str) -> TemplateFields {
        BTreeMap::from([("question", q.to_string()), ("candidates", q.to_string())])
    }

    #[test]
    fn boundary_violation_blocks_send() {
        let backend: Arc<dyn ChatBackend> = Arc::new(Fixed("{}"));
        let dict = RawDictionary::new(["Lou Seal".to_string()]);
        let mut t = Transcript::new();
        let err = brain_call(
            Some(&backend),
            TemplateId::PathSelect,
            fields("rank paths near Lou Seal"),
            &dict,
            12,
            &mut t,
        )
        .unwrap_err();
        assert!(matches!(err, GatewayError::BoundaryViolation { .. }));
        assert_eq!(t.totals().brain_calls, 0, "nothing must leave the channel");
    }

    #[test]
    fn budget_exhaustion_fails_before_send() {
        let backend: Arc<dyn ChatBackend> = Arc::new(Fixed("{}"));
        let dict = RawDictionary::default();
        let mut t = Transcript::new();
        brain_call(Some(&backend), TemplateId::PathSelect, fields("a"), &dict, 1, &mut t).unwrap();
        let err =
            brain_call(Some(&backend), TemplateId::PathSelect, fields("b"), &dict, 1, &mut t)
                .unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExhausted(1)));
        assert_eq!(t.totals().brain_calls, 1);
    }

    #[test]
    fn malformed_reply_retries_once_then_errors() {
        let backend: Arc<dyn ChatBackend> = Arc::new(Fixed("not json at all"));
        let dict = RawDictionary::default();
        let mut t = Transcript::new();
        let res: Result<serde_json::Value, _> = call_parsed(
            Role::Hand,
            None,
            &backend,
            TemplateId::Sufficiency,
            fields("q"),
            &dict,
            12,
            &mut t,
            parse_json,
        );
        assert!(res.unwrap_err().is_malformed());
        assert_eq!(t.totals().hand_calls, 2);
    }

    #[test]
    fn lenient_parse_strips_surrounding_prose() {
        let backend: Arc<dyn ChatBackend> =
            Arc::new(Fixed("Sure! Here you go: {\"mentions\": [\"Lou Seal\"]} Hope it helps."));
        let dict = RawDictionary::default();
        let mut t = Transcript::new();
        let v: serde_json::Value = call_parsed(
            Role::Hand,
            None,
            &backend,
            TemplateId::EntityExtraction,
            fields("q"),
            &dict,
            12,
            &mut t,
            parse_json,
        )
        .unwrap();
        assert_eq!(v["mentions"][0], "Lou Seal");
        assert_eq!(t.totals().hand_calls, 1);
    }
}
