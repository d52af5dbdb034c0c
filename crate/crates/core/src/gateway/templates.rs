//! Prompt renderers, one per registered message schema.
//!
//! Reply contracts are strict: JSON with the exact field names given in
//! each template, except the follow-up schema which uses a three-line
//! `Missing:/Query:/Reasoning:` text block. Callers re-parse leniently once
//! (outermost JSON span) before declaring a reply malformed.

use super::{TemplateFields, TemplateId};

fn field<'a>(fields: &'a TemplateFields, key: &str) -> &'a str {
    fields.get(key).map(String::as_str).unwrap_or("")
}

pub fn render(template: TemplateId, fields: &TemplateFields) -> String {
    match template {
        TemplateId::EntityExtraction => format!(
            "Extract the entity mentions that appear verbatim in the question text. \
             Return only the mention strings.\n\
             Reply with JSON only: {{\"mentions\": [\"...\"]}}\n\n\
             Q: {}",
            field(fields, "question")
        ),
        TemplateId::AnalysisDelegation => format!(
            "Decide whether the upcoming question analysis should run on the remote \
             channel (anonymized input only) or locally. Prefer local when retrieved \
             experience marks the analysis as easy; justify remote use briefly.\n\
             Reply with JSON only: {{\"analysis_mode\": \"HAND\" | \"BRAIN\", \
             \"complexity\": \"low|medium|high\", \"privacy_risk\": \"low|medium|high\", \
             \"reason\": \"...\", \"use_experience\": false, \"experience_id\": \"\"}}\n\n\
             Q: {}\nMentions: {}\nTopic entities: {}\nHeuristics: {}\nExperience: {}",
            field(fields, "question"),
            field(fields, "mentions"),
            field(fields, "topic_entities"),
            field(fields, "heuristics"),
            field(fields, "experience"),
        ),
        TemplateId::QuestionAnalysisBrain => format!(
            "You see an anonymized question and its anonymized topic entities. \
             Sketch how to answer it over a knowledge graph:\n\
             - \"indicator\": one chain `slot -- relation_hint -- slot -- ...` that uses \
             each topic token exactly once and marks unknown slots as ?name;\n\
             - \"split_questions\": ordered sub-questions, each topic token used at most once;\n\
             - \"D_predict\": hop count from the answer slot to the farthest topic slot;\n\
             - \"warnings\": optional ambiguity notes.\n\
             Use only the identifiers given below; never guess real names.\n\
             Reply with JSON only: {{\"indicator\": \"...\", \"split_questions\": [\"...\"], \
             \"D_predict\": 1, \"warnings\": []}}\n\n\
             Anonymized Q: {}\nAnon topic entities: {}",
            field(fields, "anon_question"),
            field(fields, "anon_topics"),
        ),
        TemplateId::QuestionAnalysisHand => format!(
            "Analyze the question over a knowledge graph. Produce a compact indicator \
             chain aligned with KG-style relations, ordered split sub-questions, and a \
             predicted hop depth.\n\
             Reply with JSON only: {{\"indicator\": \"...\", \"split_questions\": [\"...\"], \
             \"D_predict\": 1}}\n\n\
             Q: {}\nTopic entities: {}",
            field(fields, "question"),
            field(fields, "topics"),
        ),
        TemplateId::FollowUp => format!(
            "Evidence for the question is still incomplete. Identify what is missing \
             (relation, bridge node, type constraint, or aggregation) and propose one \
             retrieval query the local engine can execute next. Use only identifiers \
             that appear below.\n\
             Reply with exactly three lines:\n\
             Missing: <short description>\n\
             Query: <retrieval query>\n\
             Reasoning: <sketch from existing evidence to the answer>\n\n\
             Q: {}\nIndicator: {}\nTopic entities: {}\nExisting paths:\n{}",
            field(fields, "anon_question"),
            field(fields, "indicator"),
            field(fields, "anon_topics"),
            field(fields, "paths"),
        ),
        TemplateId::Predict => format!(
            "Propose up to three plausible targets (answers or bridge nodes) that could \
             complete the reasoning, each with a short path pattern and a reason. Use \
             only identifiers, relations and types that appear below.\n\
             Reply with JSON only: {{\"predictions\": [{{\"target\": \"...\", \
             \"path_pattern\": [\"...\"], \"reason\": \"...\"}}]}}\n\n\
             Q: {}\nIndicator: {}\nTopic entities: {}\nExisting paths:\n{}",
            field(fields, "anon_question"),
            field(fields, "indicator"),
            field(fields, "anon_topics"),
            field(fields, "paths"),
        ),
        TemplateId::PathSelect => format!(
            "Rank the candidate paths by how well they support answering the question, \
             judging indicator match, type consistency and minimality.\n\
             Reply with JSON only: {{\"top_paths\": [{{\"rank\": 1, \"path_id\": \"p1\", \
             \"score\": 0.9, \"reason\": \"...\"}}]}}\n\n\
             Q: {}\nIndicator: {}\nSplit question: {}\nCandidates:\n{}",
            field(fields, "anon_question"),
            field(fields, "indicator"),
            field(fields, "split_question"),
            field(fields, "candidates"),
        ),
        TemplateId::PathRefine => format!(
            "Verify the selected paths against the raw facts, drop unsupported hops, \
             keep only the minimal facts needed, and answer the split question when \
             possible. Facts are written `head | relation | tail`.\n\
             Reply with JSON only: {{\"verified_facts\": [\"h | r | t\"], \
             \"split_answer\": [\"...\"], \"is_sufficient\": true, \"missing\": \"...\", \
             \"anon_feedback\": \"...\"}}\n\n\
             Q: {}\nSplit question: {}\nSelected paths:\n{}",
            field(fields, "question"),
            field(fields, "split_question"),
            field(fields, "paths"),
        ),
        TemplateId::Sufficiency => format!(
            "Given the verified evidence, decide whether the split question is \
             answered, and whether the main question is answered. Facts are written \
             `head | relation | tail`.\n\
             Reply with JSON only: {{\"sufficient_split\": true, \"split_answer\": [\"...\"], \
             \"evidence\": [\"h | r | t\"], \"sufficient_main\": false, \
             \"main_answer\": [\"...\"], \"anon_feedback\": \"...\"}}\n\n\
             Q: {}\nIndicator: {}\nSplit question: {}\nVerified evidence:\n{}",
            field(fields, "question"),
            field(fields, "indicator"),
            field(fields, "split_question"),
            field(fields, "evidence"),
        ),
        TemplateId::FinalAnswer => format!(
            "Answer the main question using only the verified evidence below. Output \
             every valid entity and cite the supporting facts briefly.\n\
             Reply with JSON only: {{\"answer\": [\"...\"], \"reason\": \"...\"}}\n\n\
             Q: {}\nVerified evidence:\n{}",
            field(fields, "question"),
            field(fields, "evidence"),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn fields_land_in_prompt() {
        let fields = BTreeMap::from([
            ("anon_question", "ent_12ab is the mascot for which team?".to_string()),
            ("anon_topics", "ent_12ab".to_string()),
        ]);
        let prompt = render(TemplateId::QuestionAnalysisBrain, &fields);
        assert!(prompt.contains("ent_12ab is the mascot"));
        assert!(prompt.contains("\"indicator\""));
    }

    #[test]
    fn missing_fields_render_empty() {
        let prompt = render(TemplateId::FinalAnswer, &BTreeMap::new());
        assert!(prompt.contains("Q: \n"));
    }
}
