//! Dual-LLM hierarchical reasoning controller.
//!
//! One run grounds the question, builds the anonymized view, gates Brain
//! usage on retrieved experience, analyzes the question on whichever
//! channel the gate picked, and drives the verification-first loop at the
//! root of the reasoning tree: explore in the anonymized space, prune,
//! de-anonymize the survivors, refine and verify locally, and either stop
//! or transition mode/depth. Split-question children verify against the
//! accumulated evidence; the root owns exploration since it carries the
//! full anchor set. Every KG expansion and Brain exchange lands in the
//! exposure ledger.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::anonymize::{self, AnonymizedView, AnonymizeError, PrivacyPolicy, SessionMapping};
use crate::boundary::RawDictionary;
use crate::config::EngineConfig;
use crate::gateway::{
    self, GatewayError, GatewayHandles, TemplateFields, TemplateId,
};
use crate::grounding::{self, GroundingError, Question, RawSubgraph, TopicEntitySet};
use crate::kg::{KnowledgeGraph, TailRef, TripleId};
use crate::memory::{
    self, FailureNote, MemoryError, MemoryStore, NodeSnapshot, Outcome, RetrievedExperience,
    RunArtifacts,
};
use crate::retrieval::{
    self, CandidatePool, ExplorationCtx, ExplorationMode, Indicator, IndicatorSource,
};
use crate::transcript::{ExposureTotals, Transcript};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no topic entities recognized in the question")]
    NoTopicEntities,
    #[error(transparent)]
    Grounding(GroundingError),
    #[error(transparent)]
    Anonymize(#[from] AnonymizeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

impl From<GroundingError> for EngineError {
    fn from(err: GroundingError) -> Self {
        match err {
            GroundingError::NoAlignment | GroundingError::EmptyQuestion => {
                EngineError::NoTopicEntities
            }
            other => EngineError::Grounding(other),
        }
    }
}

/// Node lifecycle in the reasoning tree.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum NodeStatus {
    Active,
    Verified,
    Pruned,
}

/// A locally verified raw fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedFact {
    pub triple: TripleId,
    pub rendered: String,
}

/// Mutable state of one reasoning-tree node.
#[derive(Debug)]
pub struct NodeState {
    pub mode: ExplorationMode,
    pub depth: usize,
    pub candidates: CandidatePool,
    pub evidence: Vec<VerifiedFact>,
    pub answers: Vec<String>,
    pub status: NodeStatus,
    pub iterations: usize,
    pub trajectory: Vec<(ExplorationMode, usize)>,
    consecutive_max_failures: usize,
    modes_failed_at_max: BTreeSet<ExplorationMode>,
}

impl NodeState {
    fn new(mode: ExplorationMode, depth: usize) -> Self {
        Self {
            mode,
            depth,
            candidates: CandidatePool::default(),
            evidence: Vec::new(),
            answers: Vec::new(),
            status: NodeStatus::Active,
            iterations: 0,
            trajectory: Vec::new(),
            consecutive_max_failures: 0,
            modes_failed_at_max: BTreeSet::new(),
        }
    }
}

/// The reasoning tree: the root carries the full-question indicator, the
/// children one split question each, in analysis output order.
pub struct ReasoningTree {
    pub root_indicator: Indicator,
    pub splits: Vec<String>,
    pub root: NodeState,
    pub split_status: Vec<NodeStatus>,
}

/// Answer-source taxonomy of a sufficient run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AnswerSource {
    /// The verified KG path reaches every answer entity.
    KgOnly,
    /// A prediction-phase token sat on the verified path.
    LlmInspiredKg,
    /// Sufficiency was approved with a partial path; the model bridged it.
    KgInspiredLlm,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunResult {
    pub question_id: String,
    pub answers: Vec<String>,
    pub sufficient: bool,
    pub evidence: Vec<String>,
    pub answer_source: Option<AnswerSource>,
    pub exposure: ExposureTotals,
    pub brain_analysis_calls: usize,
    pub entities_before: usize,
    pub entities_after: usize,
    pub root_status: NodeStatus,
    pub root_iterations: usize,
    pub transcript: Transcript,
}

impl RunResult {
    pub fn node_reduction_ratio(&self) -> f64 {
        if self.entities_before == 0 {
            0.0
        } else {
            1.0 - self.entities_after as f64 / self.entities_before as f64
        }
    }
}

/// How question analysis is routed.
#[derive(Debug, Clone)]
pub enum GateDecision {
    CallBrain,
    ReuseMemory(Arc<memory::ExperienceRecord>),
}

/// Memory-gated Brain usage: reuse stored analysis when the best hybrid
/// score clears the confidence threshold and that record succeeded.
pub fn gate_brain_usage(records: &[RetrievedExperience], threshold: f64) -> GateDecision {
    match records.first() {
        Some(best) if best.score >= threshold && best.record.outcome.sufficient => {
            GateDecision::ReuseMemory(best.record.clone())
        }
        _ => GateDecision::CallBrain,
    }
}

#[derive(Debug, Deserialize)]
struct AnalysisReply {
    indicator: String,
    #[serde(default)]
    split_questions: Vec<String>,
    #[serde(default, rename = "D_predict")]
    d_predict: usize,
    #[serde(default)]
    #[allow(dead_code)]
    warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RefineReply {
    #[serde(default)]
    verified_facts: Vec<String>,
    #[serde(default)]
    split_answer: Vec<String>,
    #[serde(default)]
    is_sufficient: bool,
    #[serde(default)]
    #[allow(dead_code)]
    missing: String,
    #[serde(default)]
    #[allow(dead_code)]
    anon_feedback: String,
}

#[derive(Debug, Deserialize)]
struct SufficiencyReply {
    #[serde(default)]
    sufficient_split: bool,
    #[serde(default)]
    split_answer: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    evidence: Vec<String>,
    #[serde(default)]
    sufficient_main: bool,
    #[serde(default)]
    main_answer: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    anon_feedback: String,
}

#[derive(Debug, Deserialize)]
struct FinalAnswerReply {
    #[serde(default)]
    answer: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    reason: String,
}

/// The engine: one immutable graph, one configuration, shared gateways.
pub struct Engine {
    pub graph: Arc<KnowledgeGraph>,
    pub config: EngineConfig,
    pub gateways: GatewayHandles,
}

/// Session-scoped borrow bundle used across the run's phases.
struct Session<'a> {
    graph: &'a KnowledgeGraph,
    sub: &'a RawSubgraph,
    view: &'a AnonymizedView,
    mapping: &'a SessionMapping,
    dict: &'a RawDictionary,
    policy: &'a PrivacyPolicy,
}

impl Engine {
    pub fn new(graph: Arc<KnowledgeGraph>, config: EngineConfig, gateways: GatewayHandles) -> Self {
        Self {
            graph,
            config,
            gateways,
        }
    }

    /// Runs one question end to end. Failures inside exploration degrade
    /// per their documented fallbacks; only engine bugs (boundary
    /// violations) and setup errors surface as `Err`.
    pub fn run(&self, question: &Question, memory: &mut MemoryStore) -> Result<RunResult, EngineError> {
        let limits = &self.config.limits;
        let policy = &self.config.privacy;
        policy.validate()?;
        let mut transcript = Transcript::new();
        let embedder = self.gateways.embedder.as_ref();

        // Knowledge grounding.
        let mentions = grounding::extract_mentions(question, &self.gateways.hand, &mut transcript)?;
        if mentions.is_empty() {
            return Err(EngineError::NoTopicEntities);
        }
        let topics = grounding::align_mentions(&mentions, &self.graph, embedder, limits.align_top_k)?;
        let sub = grounding::detect_subgraph(&self.graph, &topics, limits.d_max);

        // Privacy-preserving view construction.
        let mut mapping = anonymize::build_mapping(&self.graph, &sub, policy)?;
        let view = anonymize::build_view(&self.graph, &sub, &mapping, policy)?;
        let view = anonymize::sanitize_structure(view, policy)?;
        mapping.seal();
        let dict = anonymize::session_dictionary(&self.graph, &sub, &mapping, policy);
        for short in dict.exempted() {
            transcript.record_warning("boundary", &format!("label {short:?} too short to scan"));
        }
        let anon_question = anonymize::anonymize_text(&question.text, &self.graph, &sub, &mapping);
        let session = Session {
            graph: &self.graph,
            sub: &sub,
            view: &view,
            mapping: &mapping,
            dict: &dict,
            policy,
        };

        // Memory-gated Brain usage.
        memory.seed_cold_start(embedder);
        let (root_records, _hints) = memory::get_exp(
            &memory.pool,
            &mut memory.buffer,
            &question.text,
            None,
            &policy.tag(),
            limits,
            embedder,
        );
        let decision = gate_brain_usage(&root_records, limits.gate_threshold);

        // Question analysis on the gated channel.
        let anchor_tokens: Vec<String> = view
            .anchor_indices()
            .iter()
            .map(|&i| view.node(i).token.clone())
            .collect();
        let (indicator, splits) = self.question_analysis(
            &session,
            question,
            &topics,
            &anon_question,
            &anchor_tokens,
            &decision,
            &mut transcript,
        );
        let d_predict = indicator.d_predict;

        // Reasoning-tree initialization and the root verification loop.
        let (init_mode, init_depth) = memory::init_policy(&root_records, d_predict, limits.d_max);
        let mut tree = ReasoningTree {
            root_indicator: indicator,
            splits,
            root: NodeState::new(init_mode, init_depth),
            split_status: Vec::new(),
        };
        self.node_verification_loop(&session, question, &anon_question, &mut tree.root, &tree.root_indicator, memory, &mut transcript)?;

        // Split children verify against the accumulated evidence.
        let evidence_text = render_evidence(&tree.root.evidence);
        for split in tree.splits.clone() {
            transcript.set_current_node(Some(tree.split_status.len() + 1));
            let raw_split =
                anonymize::deanonymize_text(&split, &mapping, &view, &self.graph);
            let fields = TemplateFields::from([
                ("question", question.text.clone()),
                ("indicator", tree.root_indicator.chain_string()),
                ("split_question", raw_split),
                ("evidence", evidence_text.clone()),
            ]);
            let reply: Result<SufficiencyReply, GatewayError> = gateway::call_parsed(
                gateway::Role::Hand,
                None,
                &self.gateways.hand,
                TemplateId::Sufficiency,
                fields,
                &dict,
                limits.max_brain_calls,
                &mut transcript,
                gateway::parse_json,
            );
            let status = match reply {
                Ok(r) if r.sufficient_split => NodeStatus::Verified,
                Ok(_) => NodeStatus::Pruned,
                Err(err) => {
                    transcript.record_fallback("sufficiency", &err.to_string());
                    NodeStatus::Pruned
                }
            };
            tree.split_status.push(status);
        }
        transcript.set_current_node(None);

        // Answer synthesis and global sufficiency.
        let splits_verified = tree
            .split_status
            .iter()
            .all(|s| *s == NodeStatus::Verified);
        let mut sufficient = tree.root.status == NodeStatus::Verified && splits_verified;
        if !sufficient && !tree.root.evidence.is_empty() {
            sufficient = self
                .global_check(question, &tree, &evidence_text, &dict, &mut transcript)
                .unwrap_or(false);
        }
        let mut answers = Vec::new();
        if sufficient {
            let fields = TemplateFields::from([
                ("question", question.text.clone()),
                ("evidence", evidence_text.clone()),
            ]);
            let reply: Result<FinalAnswerReply, GatewayError> = gateway::call_parsed(
                gateway::Role::Hand,
                None,
                &self.gateways.hand,
                TemplateId::FinalAnswer,
                fields,
                &dict,
                limits.max_brain_calls,
                &mut transcript,
                gateway::parse_json,
            );
            match reply {
                Ok(r) if !r.answer.is_empty() => answers = r.answer,
                _ => answers = tree.root.answers.clone(),
            }
            if answers.is_empty() {
                answers = tree.root.answers.clone();
            }
        }
        // A sufficient run with no defensible answer string is not an
        // answer; never fabricate.
        if answers.is_empty() {
            sufficient = false;
        }

        let answer_source = if sufficient {
            Some(classify_answers(&answers, &tree, session.graph))
        } else {
            None
        };

        // Verified experience write-back.
        if sufficient {
            let artifacts = RunArtifacts {
                anon_indicator_template: tree.root_indicator.template_form(),
                d_predict,
                trajectory: tree.root.trajectory.clone(),
                path_templates: path_templates(&tree, &session),
                outcome: Outcome {
                    sufficient: true,
                    failure_notes: failure_notes(&tree),
                },
            };
            match memory.write_back_if_success(
                &question.text,
                artifacts,
                policy.tag(),
                &dict,
                limits,
                embedder,
            ) {
                Ok(_) => {}
                Err(MemoryError::LeakageGuard(label)) => {
                    transcript.record_warning("write_back", &format!("leakage guard hit: {label}"));
                }
                Err(other) => return Err(other.into()),
            }
        }

        let brain_analysis_calls = transcript
            .events()
            .iter()
            .filter(|e| {
                matches!(e.kind, crate::transcript::EventKind::BrainSend)
                    && e.label == TemplateId::QuestionAnalysisBrain.as_str()
            })
            .count();
        Ok(RunResult {
            question_id: question.id.clone(),
            answers,
            sufficient,
            evidence: tree.root.evidence.iter().map(|f| f.rendered.clone()).collect(),
            answer_source,
            exposure: transcript.totals().clone(),
            brain_analysis_calls,
            entities_before: view.entities_before,
            entities_after: view.entities_after,
            root_status: tree.root.status.clone(),
            root_iterations: tree.root.iterations,
            transcript,
        })
    }

    /// Question analysis per the gate decision: Brain (anonymized space),
    /// Hand (raw, anon derived), or memory reuse (template instantiation).
    /// Malformed replies retry once inside the gateway, then fall back to
    /// the single-chain indicator at maximum depth.
    #[allow(clippy::too_many_arguments)]
    fn question_analysis(
        &self,
        session: &Session,
        question: &Question,
        topics: &TopicEntitySet,
        anon_question: &str,
        anchor_tokens: &[String],
        decision: &GateDecision,
        transcript: &mut Transcript,
    ) -> (Indicator, Vec<String>) {
        let limits = &self.config.limits;
        if let GateDecision::ReuseMemory(record) = decision {
            if let Some(indicator) = Indicator::instantiate_template(
                &record.anon_indicator,
                anchor_tokens,
                limits.d_max,
            ) {
                transcript.record_note("analysis", "reused stored analysis artifacts");
                return (indicator, Vec::new());
            }
            transcript.record_fallback("analysis", "stored template does not fit this session");
        }
        let mut brain_available = self.gateways.brain.is_some();
        if brain_available && self.config.llm_gate {
            // Optional delegation check: the Hand may keep analysis local.
            let fields = TemplateFields::from([
                ("question", question.text.clone()),
                ("topic_entities", anchor_tokens.join(", ")),
                ("mentions", String::new()),
                ("heuristics", format!("anchors={} len={}", anchor_tokens.len(), question.text.len())),
                ("experience", String::new()),
            ]);
            #[derive(Deserialize)]
            struct Delegation {
                analysis_mode: String,
            }
            let delegation: Result<Delegation, GatewayError> = gateway::call_parsed(
                gateway::Role::Hand,
                None,
                &self.gateways.hand,
                TemplateId::AnalysisDelegation,
                fields,
                session.dict,
                limits.max_brain_calls,
                transcript,
                gateway::parse_json,
            );
            if let Ok(d) = delegation {
                if d.analysis_mode.eq_ignore_ascii_case("hand") {
                    brain_available = false;
                    transcript.record_note("analysis", "delegation kept analysis local");
                }
            }
        }
        let (reply, source): (Result<AnalysisReply, GatewayError>, IndicatorSource) =
            if brain_available {
                let fields = TemplateFields::from([
                    ("anon_question", anon_question.to_string()),
                    ("anon_topics", anchor_tokens.join(", ")),
                ]);
                (
                    gateway::call_parsed(
                        gateway::Role::Brain,
                        self.gateways.brain.as_ref(),
                        &self.gateways.hand,
                        TemplateId::QuestionAnalysisBrain,
                        fields,
                        session.dict,
                        limits.max_brain_calls,
                        transcript,
                        gateway::parse_json,
                    ),
                    IndicatorSource::Brain,
                )
            } else {
                let labels: Vec<String> = topics
                    .entries
                    .iter()
                    .map(|t| session.graph.entity_label(t.entity).to_string())
                    .collect();
                let fields = TemplateFields::from([
                    ("question", question.text.clone()),
                    ("topics", labels.join(", ")),
                ]);
                (
                    gateway::call_parsed(
                        gateway::Role::Hand,
                        None,
                        &self.gateways.hand,
                        TemplateId::QuestionAnalysisHand,
                        fields,
                        session.dict,
                        limits.max_brain_calls,
                        transcript,
                        gateway::parse_json,
                    ),
                    IndicatorSource::Hand,
                )
            };
        match reply {
            Ok(parsed) => {
                let chain = if source == IndicatorSource::Hand {
                    // Hand produced raw labels; derive the anon counterpart.
                    anonymize::anonymize_text(
                        &parsed.indicator,
                        session.graph,
                        session.sub,
                        session.mapping,
                    )
                } else {
                    parsed.indicator.clone()
                };
                let indicator = Indicator::parse_chain(&chain, anchor_tokens, source)
                    .filter(|ind| covers_all_anchors(ind, anchor_tokens))
                    .unwrap_or_else(|| {
                        transcript.record_fallback("analysis", "indicator chain unusable");
                        Indicator::fallback(anchor_tokens, limits.d_max)
                    });
                if parsed.d_predict != 0 && parsed.d_predict != indicator.d_predict {
                    transcript.record_note(
                        "analysis",
                        "reply depth differs from the slot-derived depth; slots win",
                    );
                }
                (indicator, parsed.split_questions)
            }
            Err(err) => {
                transcript.record_fallback("analysis", &err.to_string());
                (Indicator::fallback(anchor_tokens, limits.d_max), Vec::new())
            }
        }
    }

    /// The verification-first loop at one node: explore per (mode, depth),
    /// de-anonymize survivors, refine and check locally, then either stop
    /// or apply the experience-guided transition.
    #[allow(clippy::too_many_arguments)]
    fn node_verification_loop(
        &self,
        session: &Session,
        question: &Question,
        anon_question: &str,
        state: &mut NodeState,
        indicator: &Indicator,
        memory: &mut MemoryStore,
        transcript: &mut Transcript,
    ) -> Result<(), EngineError> {
        let limits = &self.config.limits;
        let iteration_cap = 3 * limits.d_max;
        let mut pool_topic = CandidatePool::default();
        let mut pool_refine = CandidatePool::default();
        transcript.set_current_node(Some(0));
        loop {
            state.iterations += 1;
            if state.iterations > iteration_cap {
                state.status = NodeStatus::Pruned;
                transcript.record_note("node", "iteration budget exhausted");
                break;
            }
            state.trajectory.push((state.mode, state.depth));
            let (node_records, _) = memory::get_exp(
                &memory.pool,
                &mut memory.buffer,
                &question.text,
                Some(indicator),
                &session.policy.tag(),
                limits,
                self.gateways.embedder.as_ref(),
            );
            let mem_templates: Vec<String> = node_records
                .iter()
                .flat_map(|r| r.record.path_templates.clone())
                .collect();
            let ctx = ExplorationCtx {
                view: session.view,
                anon_question,
                indicator,
                anchors: ExplorationCtx::resolve_anchors(session.view, indicator),
                d_predict: indicator.d_predict,
                limits,
                embedder: self.gateways.embedder.as_ref(),
                mem_templates: &mem_templates,
                brain: self.gateways.brain.as_ref(),
                hand: &self.gateways.hand,
                dict: session.dict,
            };
            let pool = match state.mode {
                ExplorationMode::Topic => retrieval::explore_topic(&ctx, state.depth, transcript),
                ExplorationMode::Refine => {
                    match retrieval::explore_refine(&ctx, &pool_topic, transcript) {
                        Ok(pool) => pool,
                        Err(GatewayError::BoundaryViolation { template, label }) => {
                            return Err(GatewayError::BoundaryViolation { template, label }.into())
                        }
                        Err(err) => {
                            transcript.record_fallback("refine", &err.to_string());
                            CandidatePool {
                                phase: Some(ExplorationMode::Refine),
                                ..CandidatePool::default()
                            }
                        }
                    }
                }
                ExplorationMode::Predict => {
                    retrieval::explore_predict(&ctx, &[&pool_topic, &pool_refine], transcript)
                }
            };
            match state.mode {
                ExplorationMode::Topic => pool_topic = pool.clone(),
                ExplorationMode::Refine => pool_refine = pool.clone(),
                ExplorationMode::Predict => {}
            }
            state.candidates = pool;

            // Controlled de-anonymization and local verification.
            let verified = self.verify_candidates(session, question, state, transcript)?;
            if verified {
                state.status = NodeStatus::Verified;
                break;
            }
            if state.depth >= limits.d_max {
                state.consecutive_max_failures += 1;
                state.modes_failed_at_max.insert(state.mode);
            } else {
                state.consecutive_max_failures = 0;
            }
            let suggestion = memory::next_step(
                &node_records,
                NodeSnapshot {
                    mode: state.mode,
                    depth: state.depth,
                    d_predict: indicator.d_predict,
                    d_max: limits.d_max,
                },
            );
            let exhausted_all_modes = state.modes_failed_at_max.len() == 3
                && state.consecutive_max_failures >= 2;
            let no_progress = suggestion.mode == state.mode && suggestion.depth == state.depth;
            if suggestion.prune || exhausted_all_modes || no_progress {
                state.status = NodeStatus::Pruned;
                transcript.record_note("node", "pruned after repeated verification failure");
                break;
            }
            state.mode = suggestion.mode;
            state.depth = suggestion.depth.min(limits.d_max);
        }
        transcript.set_current_node(None);
        Ok(())
    }

    /// De-anonymizes the pruned candidates, has the Hand refine them into
    /// verified facts, and checks sufficiency. Returns whether the node
    /// verified this iteration.
    fn verify_candidates(
        &self,
        session: &Session,
        question: &Question,
        state: &mut NodeState,
        transcript: &mut Transcript,
    ) -> Result<bool, EngineError> {
        let limits = &self.config.limits;
        if state.candidates.paths.is_empty() {
            return Ok(false);
        }
        let mut rendered_paths = Vec::new();
        for scored in &state.candidates.paths {
            let expansions = anonymize::deanonymize_walk(
                &scored.path.nodes,
                &scored.path.steps,
                session.view,
                session.graph,
                session.sub,
            );
            for expansion in expansions {
                let mut facts = Vec::new();
                let mut seen = BTreeSet::new();
                for (tid, _) in &expansion.steps {
                    if seen.insert(*tid) {
                        facts.push(render_fact(session.graph, *tid));
                    }
                }
                if !facts.is_empty() {
                    rendered_paths.push(facts.join(" ;; "));
                }
            }
        }
        rendered_paths.sort();
        rendered_paths.dedup();
        rendered_paths.truncate(8);
        if rendered_paths.is_empty() {
            return Ok(false);
        }
        let paths_field = rendered_paths
            .iter()
            .enumerate()
            .map(|(i, p)| format!("p{}: {}", i + 1, p))
            .collect::<Vec<_>>()
            .join("\n");
        let refine_fields = TemplateFields::from([
            ("question", question.text.clone()),
            ("split_question", String::new()),
            ("paths", paths_field),
        ]);
        let refine: RefineReply = match gateway::call_parsed(
            gateway::Role::Hand,
            None,
            &self.gateways.hand,
            TemplateId::PathRefine,
            refine_fields,
            session.dict,
            limits.max_brain_calls,
            transcript,
            gateway::parse_json,
        ) {
            Ok(reply) => reply,
            Err(err) => {
                transcript.record_fallback("path_refine", &err.to_string());
                return Ok(false);
            }
        };
        // Keep only facts that exist in the raw subgraph.
        let mut verified = Vec::new();
        for fact in &refine.verified_facts {
            if let Some(found) = lookup_fact(session.graph, session.sub, fact) {
                verified.push(found);
            }
        }
        for fact in verified {
            if !state.evidence.contains(&fact) {
                state.evidence.push(fact);
            }
        }
        if !refine.is_sufficient || state.evidence.is_empty() {
            return Ok(false);
        }
        let sufficiency_fields = TemplateFields::from([
            ("question", question.text.clone()),
            ("indicator", String::new()),
            ("split_question", String::new()),
            ("evidence", render_evidence(&state.evidence)),
        ]);
        let sufficiency: SufficiencyReply = match gateway::call_parsed(
            gateway::Role::Hand,
            None,
            &self.gateways.hand,
            TemplateId::Sufficiency,
            sufficiency_fields,
            session.dict,
            limits.max_brain_calls,
            transcript,
            gateway::parse_json,
        ) {
            Ok(reply) => reply,
            Err(err) => {
                transcript.record_fallback("sufficiency", &err.to_string());
                return Ok(false);
            }
        };
        if sufficiency.sufficient_split || sufficiency.sufficient_main {
            state.answers = if sufficiency.main_answer.is_empty() {
                if sufficiency.split_answer.is_empty() {
                    refine.split_answer
                } else {
                    sufficiency.split_answer
                }
            } else {
                sufficiency.main_answer
            };
            return Ok(true);
        }
        Ok(false)
    }

    fn global_check(
        &self,
        question: &Question,
        tree: &ReasoningTree,
        evidence_text: &str,
        dict: &RawDictionary,
        transcript: &mut Transcript,
    ) -> Result<bool, EngineError> {
        let fields = TemplateFields::from([
            ("question", question.text.clone()),
            ("indicator", tree.root_indicator.chain_string()),
            ("split_question", String::new()),
            ("evidence", evidence_text.to_string()),
        ]);
        let reply: SufficiencyReply = gateway::call_parsed(
            gateway::Role::Hand,
            None,
            &self.gateways.hand,
            TemplateId::Sufficiency,
            fields,
            dict,
            self.config.limits.max_brain_calls,
            transcript,
            gateway::parse_json,
        )?;
        Ok(reply.sufficient_main)
    }
}

fn covers_all_anchors(indicator: &Indicator, anchor_tokens: &[String]) -> bool {
    let covered = indicator.anchor_tokens();
    anchor_tokens.iter().all(|t| covered.contains(t))
}

fn render_fact(graph: &KnowledgeGraph, tid: TripleId) -> String {
    let t = graph.triple(tid).expect("triple resolves");
    let tail = match t.tail {
        TailRef::Entity(e) => graph.entity_label(e).to_string(),
        TailRef::Literal(l) => graph.literal(l).expect("literal resolves").raw.clone(),
    };
    format!(
        "{} | {} | {}",
        graph.entity_label(t.head),
        graph.relation_label(t.relation),
        tail
    )
}

/// Finds the subgraph triple matching a `h | r | t` string from the Hand.
fn lookup_fact(graph: &KnowledgeGraph, sub: &RawSubgraph, fact: &str) -> Option<VerifiedFact> {
    let parts: Vec<&str> = fact.split('|').map(str::trim).collect();
    if parts.len() != 3 {
        return None;
    }
    for &tid in &sub.triples {
        let rendered = render_fact(graph, tid);
        let rparts: Vec<&str> = rendered.split('|').map(str::trim).collect();
        if rparts == parts {
            return Some(VerifiedFact {
                triple: tid,
                rendered,
            });
        }
    }
    None
}

fn render_evidence(evidence: &[VerifiedFact]) -> String {
    evidence
        .iter()
        .map(|f| f.rendered.clone())
        .collect::<Vec<_>>()
        .join("\n")
}

/// KG-only when every answer string labels an entity on the verified
/// evidence; prediction-phase verification marks LLM-inspired KG; anything
/// else leaned on model knowledge.
fn classify_answers(answers: &[String], tree: &ReasoningTree, graph: &KnowledgeGraph) -> AnswerSource {
    let mut evidence_labels = BTreeSet::new();
    for fact in &tree.root.evidence {
        let t = graph.triple(fact.triple).expect("triple resolves");
        evidence_labels.insert(graph.entity_label(t.head).to_lowercase());
        match t.tail {
            TailRef::Entity(e) => {
                evidence_labels.insert(graph.entity_label(e).to_lowercase());
            }
            TailRef::Literal(l) => {
                evidence_labels.insert(graph.literal(l).expect("literal resolves").raw.to_lowercase());
            }
        }
    }
    let grounded = answers
        .iter()
        .all(|a| evidence_labels.contains(&a.to_lowercase()));
    if !grounded {
        AnswerSource::KgInspiredLlm
    } else if tree.root.candidates.phase == Some(ExplorationMode::Predict) {
        AnswerSource::LlmInspiredKg
    } else {
        AnswerSource::KgOnly
    }
}

/// Session-independent templates of the verified candidate paths: anchors
/// become TOPIC_i (indicator numbering), answer-bearing nodes become ANS,
/// everything else X; relation labels drop their domain segment.
fn path_templates(tree: &ReasoningTree, session: &Session) -> Vec<String> {
    let anchor_order: Vec<String> = tree.root_indicator.anchor_tokens();
    let answers: BTreeSet<String> = tree.root.answers.iter().map(|a| a.to_lowercase()).collect();
    let mut templates = Vec::new();
    for scored in &tree.root.candidates.paths {
        let path = &scored.path;
        let mut out = String::new();
        for (i, &node_idx) in path.nodes.iter().enumerate() {
            if i > 0 {
                let edge = session.view.edge(path.steps[i - 1]);
                let raw_label = session
                    .graph
                    .relation_label(session.view.relation(edge.rel).raw);
                out.push_str(&format!(" -- {} -- ", template_relation(raw_label)));
            }
            let node = session.view.node(node_idx);
            let token = &node.token;
            if let Some(pos) = anchor_order.iter().position(|t| t == token) {
                out.push_str(&format!("TOPIC_{}", pos + 1));
            } else {
                let is_answer = node
                    .raw_members()
                    .iter()
                    .any(|&m| answers.contains(&session.graph.entity_label(m).to_lowercase()));
                out.push_str(if is_answer { "ANS" } else { "X" });
            }
        }
        if !out.is_empty() && !templates.contains(&out) {
            templates.push(out);
        }
    }
    templates
}

/// Drops the schema domain segment so stored templates never contain a
/// full raw relation label.
fn template_relation(label: &str) -> String {
    match label.split_once('.') {
        Some((_, rest)) if !rest.is_empty() => rest.to_string(),
        _ => "r".to_string(),
    }
}

fn failure_notes(tree: &ReasoningTree) -> Vec<FailureNote> {
    let mut notes = Vec::new();
    if tree.root.status == NodeStatus::Pruned {
        if let Some(&(mode, depth)) = tree.root.trajectory.last() {
            notes.push(FailureNote {
                mode,
                depth,
                note: "root pruned".to_string(),
            });
        }
    }
    notes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::Scenario;
    use crate::kg::test_support::fixture_path;

    fn engine_for(fixture: &str, scenario: Scenario, config: EngineConfig) -> Engine {
        let graph = crate::kg::KnowledgeGraph::load(
            &fixture_path(fixture),
            crate::kg::GraphFormat::Tsv,
        )
        .unwrap();
        Engine::new(Arc::new(graph), config, GatewayHandles::scripted(scenario))
    }

    fn fresh_memory(config: &EngineConfig) -> MemoryStore {
        MemoryStore::in_memory([3; 32], &config.limits)
    }

    #[test]
    fn mascot_end_to_end() {
        let config = EngineConfig::default();
        let engine = engine_for("mascot.kg", Scenario::Cases, config.clone());
        let mut memory = fresh_memory(&config);
        let q = Question::new(
            "mascot",
            "Lou Seal is the mascot for the team that last won the World Series when?",
        );
        let result = engine.run(&q, &mut memory).unwrap();
        assert!(result.sufficient);
        assert_eq!(result.answers, vec!["2014 World Series"]);
        assert_eq!(result.answer_source, Some(AnswerSource::KgOnly));
        assert_eq!(result.root_status, NodeStatus::Verified);
        assert!(result.evidence.iter().any(|f| f.contains("championships")));
        assert_eq!(result.entities_before, 5);
        assert_eq!(result.entities_after, 3, "championship events merged");
        // Cold start seeded five exemplars plus this run's record.
        assert_eq!(memory.record_count(), 6);
    }

    #[test]
    fn gate_reuses_memory_on_identical_repeat() {
        let config = EngineConfig::default();
        let engine = engine_for("mascot.kg", Scenario::Cases, config.clone());
        let mut memory = fresh_memory(&config);
        let q = Question::new(
            "mascot",
            "Lou Seal is the mascot for the team that last won the World Series when?",
        );
        let first = engine.run(&q, &mut memory).unwrap();
        assert!(first.brain_analysis_calls >= 1);
        let second = engine.run(&q, &mut memory).unwrap();
        assert_eq!(second.answers, first.answers);
        assert_eq!(second.brain_analysis_calls, 0, "memory gate skips analysis");
        assert!(second.exposure.brain_calls <= first.exposure.brain_calls);
        assert_eq!(memory.record_count(), 6, "repeat merges instead of duplicating");
    }

    #[test]
    fn adversarial_mock_prunes_and_stays_bounded() {
        let config = EngineConfig::default();
        let engine = engine_for("mascot.kg", Scenario::Adversarial, config.clone());
        let mut memory = fresh_memory(&config);
        let q = Question::new(
            "mascot",
            "Lou Seal is the mascot for the team that last won the World Series when?",
        );
        let result = engine.run(&q, &mut memory).unwrap();
        assert!(!result.sufficient);
        assert!(result.answers.is_empty(), "no fabricated answers");
        assert_eq!(result.root_status, NodeStatus::Pruned);
        assert!(result.root_iterations <= 3 * config.limits.d_max);
        assert!(result.exposure.brain_calls <= config.limits.max_brain_calls);
        assert_eq!(memory.record_count(), 5, "failed runs never write back");
    }

    #[test]
    fn forced_shallow_depth_escalates_and_verifies() {
        // D_predict is forced to 1 by a config with d_max 2 and a scripted
        // analysis; the node fails at depth 1 and verifies after the
        // transition.
        struct ShallowAnalysis(crate::gateway::mock::ScriptedBackend);
        impl crate::gateway::ChatBackend for ShallowAnalysis {
            fn complete(&self, request: &crate::gateway::ChatRequest) -> Result<String, GatewayError> {
                if request.template == TemplateId::QuestionAnalysisBrain {
                    let topics = request.fields.get("anon_topics").cloned().unwrap_or_default();
                    return Ok(serde_json::json!({
                        "indicator": format!("{} -- mascot_team -- ?team", topics.trim()),
                        "split_questions": ["What team is it the mascot for?"],
                        "D_predict": 1,
                        "warnings": [],
                    })
                    .to_string());
                }
                self.0.complete(request)
            }
        }
        let mut config = EngineConfig::default();
        config.limits.d_max = 2;
        let graph = crate::kg::KnowledgeGraph::load(
            &fixture_path("mascot.kg"),
            crate::kg::GraphFormat::Tsv,
        )
        .unwrap();
        let scripted = crate::gateway::mock::ScriptedBackend::new(Scenario::Cases);
        let backend: Arc<dyn crate::gateway::ChatBackend> = Arc::new(ShallowAnalysis(scripted));
        let gateways = GatewayHandles {
            brain: Some(backend.clone()),
            hand: Arc::new(crate::gateway::mock::ScriptedBackend::new(Scenario::Cases)),
            embedder: Arc::new(crate::gateway::HashEmbedder::default()),
        };
        let engine = Engine::new(Arc::new(graph), config.clone(), gateways);
        let mut memory = fresh_memory(&config);
        let q = Question::new(
            "mascot",
            "Lou Seal is the mascot for the team that last won the World Series when?",
        );
        let result = engine.run(&q, &mut memory).unwrap();
        assert!(result.sufficient, "verified on the second iteration");
        assert_eq!(result.root_iterations, 2);
        let kg_events = result
            .transcript
            .events()
            .iter()
            .filter(|e| matches!(e.kind, crate::transcript::EventKind::KgExpansion))
            .count();
        assert_eq!(kg_events, 2, "exactly one expansion per iteration");
        assert_eq!(result.answers, vec!["2014 World Series"]);
    }

    #[test]
    fn llm_gate_can_keep_analysis_local() {
        // Delegation replies HAND; analysis must run on the local channel.
        struct LocalGate(crate::gateway::mock::ScriptedBackend);
        impl crate::gateway::ChatBackend for LocalGate {
            fn complete(&self, request: &crate::gateway::ChatRequest) -> Result<String, GatewayError> {
                if request.template == TemplateId::AnalysisDelegation {
                    return Ok(serde_json::json!({
                        "analysis_mode": "HAND", "complexity": "low", "privacy_risk": "low",
                        "reason": "simple", "use_experience": false, "experience_id": ""
                    })
                    .to_string());
                }
                self.0.complete(request)
            }
        }
        let config = EngineConfig {
            llm_gate: true,
            ..EngineConfig::default()
        };
        let graph = crate::kg::KnowledgeGraph::load(
            &fixture_path("mascot.kg"),
            crate::kg::GraphFormat::Tsv,
        )
        .unwrap();
        let hand: Arc<dyn crate::gateway::ChatBackend> = Arc::new(LocalGate(
            crate::gateway::mock::ScriptedBackend::new(Scenario::Cases),
        ));
        let gateways = GatewayHandles {
            brain: Some(Arc::new(crate::gateway::mock::ScriptedBackend::new(Scenario::Cases))),
            hand,
            embedder: Arc::new(crate::gateway::HashEmbedder::default()),
        };
        let engine = Engine::new(Arc::new(graph), config.clone(), gateways);
        let mut memory = fresh_memory(&config);
        let q = Question::new(
            "mascot",
            "Lou Seal is the mascot for the team that last won the World Series when?",
        );
        let result = engine.run(&q, &mut memory).unwrap();
        assert!(result.sufficient);
        assert_eq!(result.brain_analysis_calls, 0, "analysis stayed on the Hand");
        assert_eq!(result.answers, vec!["2014 World Series"]);
    }

    #[test]
    fn unknown_question_without_anchors_errors() {
        let config = EngineConfig::default();
        let engine = engine_for("mascot.kg", Scenario::Cases, config.clone());
        let mut memory = fresh_memory(&config);
        let q = Question::new("x", "what is the answer to everything in xyzzyq land?");
        let err = engine.run(&q, &mut memory).unwrap_err();
        assert!(matches!(err, EngineError::NoTopicEntities));
    }
}
