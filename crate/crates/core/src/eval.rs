//! Evaluation harness: question files, exact-match scoring, reports.

use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::controller::{Engine, EngineError, RunResult};
use crate::grounding::Question;
use crate::memory::MemoryStore;

/// Per-question evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionReport {
    pub id: String,
    pub answers: Vec<String>,
    pub gold_answers: Vec<String>,
    pub matched: bool,
    pub sufficient: bool,
    pub brain_calls: usize,
    pub hand_calls: usize,
    pub kg_expansions: usize,
    pub node_reduction: f64,
    pub error: Option<String>,
}

/// Aggregate metrics over one evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub questions: usize,
    /// `None` when the file was empty (printed as "n/a").
    pub hits_at_1: Option<f64>,
    pub mean_brain_calls: f64,
    pub mean_hand_calls: f64,
    pub mean_node_reduction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_question: Vec<QuestionReport>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// Human-readable table (stdout form); the JSON form is the data.
    pub fn render_table(&self) -> String {
        let mut out = String::from("id              match  answer\n");
        for q in &self.per_question {
            out.push_str(&format!(
                "{:<15} {:<6} {}\n",
                q.id,
                if q.matched { "yes" } else { "no" },
                q.answers.first().map(String::as_str).unwrap_or("-")
            ));
        }
        let hits = self
            .aggregate
            .hits_at_1
            .map(|h| format!("{h:.3}"))
            .unwrap_or_else(|| "n/a".to_string());
        out.push_str(&format!(
            "questions={} hits@1={} mean_brain_calls={:.2} mean_hand_calls={:.2} mean_node_reduction={:.3}\n",
            self.aggregate.questions,
            hits,
            self.aggregate.mean_brain_calls,
            self.aggregate.mean_hand_calls,
            self.aggregate.mean_node_reduction,
        ));
        out
    }
}

/// Loads a newline-delimited question file: `{"id","text","gold_answers"}`.
pub fn load_questions(path: &Path) -> std::io::Result<Vec<Question>> {
    let file = std::fs::File::open(path)?;
    let mut questions = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: {e}", i + 1),
            )
        })?;
        questions.push(q);
    }
    Ok(questions)
}

/// Case-insensitive exact match after whitespace normalization, with
/// punctuation and leading articles ignored.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    let trimmed: &[&str] = match words.first() {
        Some(&"a") | Some(&"an") | Some(&"the") => &words[1..],
        _ => &words,
    };
    trimmed.join(" ")
}

/// Hits@1 match: the top answer equals some gold answer after
/// normalization.
pub fn gold_match(answers: &[String], gold: &[String]) -> bool {
    let Some(top) = answers.first() else {
        return false;
    };
    let top = normalize_answer(top);
    gold.iter().any(|g| normalize_answer(g) == top)
}

fn row_from_result(q: &Question, outcome: Result<RunResult, EngineError>) -> QuestionReport {
    match outcome {
        Ok(result) => QuestionReport {
            id: q.id.clone(),
            matched: gold_match(&result.answers, &q.gold_answers),
            answers: result.answers,
            gold_answers: q.gold_answers.clone(),
            sufficient: result.sufficient,
            brain_calls: result.exposure.brain_calls,
            hand_calls: result.exposure.hand_calls,
            kg_expansions: result.exposure.kg_expansions,
            node_reduction: {
                let before = result.entities_before as f64;
                if before == 0.0 {
                    0.0
                } else {
                    1.0 - result.entities_after as f64 / before
                }
            },
            error: None,
        },
        Err(err) => QuestionReport {
            id: q.id.clone(),
            answers: Vec::new(),
            gold_answers: q.gold_answers.clone(),
            matched: false,
            sufficient: false,
            brain_calls: 0,
            hand_calls: 0,
            kg_expansions: 0,
            node_reduction: 0.0,
            error: Some(err.to_string()),
        },
    }
}

/// Evaluates every question. Per-question failures become misses, never
/// aborts. `workers > 1` runs a bounded pool (memory access serialized);
/// the default of 1 keeps report ordering fully deterministic.
pub fn run_eval(
    engine: &Engine,
    questions: &[Question],
    memory: &mut MemoryStore,
    workers: usize,
) -> EvalReport {
    let rows: Vec<QuestionReport> = if workers <= 1 {
        questions
            .iter()
            .map(|q| row_from_result(q, engine.run(q, memory)))
            .collect()
    } else {
        let shared = Mutex::new(&mut *memory);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<QuestionReport>>> =
            questions.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(questions.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= questions.len() {
                        break;
                    }
                    let q = &questions[i];
                    let outcome = {
                        let mut guard = shared.lock().expect("memory lock");
                        engine.run(q, *guard)
                    };
                    *slots[i].lock().expect("slot lock") = Some(row_from_result(q, outcome));
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot").expect("row filled"))
            .collect()
    };
    let n = rows.len();
    let aggregate = Aggregate {
        questions: n,
        hits_at_1: if n == 0 {
            None
        } else {
            Some(rows.iter().filter(|r| r.matched).count() as f64 / n as f64)
        },
        mean_brain_calls: mean(rows.iter().map(|r| r.brain_calls as f64), n),
        mean_hand_calls: mean(rows.iter().map(|r| r.hand_calls as f64), n),
        mean_node_reduction: mean(rows.iter().map(|r| r.node_reduction), n),
    };
    EvalReport {
        per_question: rows,
        aggregate,
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_ignores_case_punctuation_articles() {
        assert_eq!(normalize_answer("The  2014 World Series!"), "2014 world series");
        assert!(gold_match(
            &["2014 World Series.".to_string()],
            &["the 2014 world series".to_string()]
        ));
        assert!(!gold_match(&[], &["x".to_string()]));
        assert!(!gold_match(
            &["2012 World Series".to_string(), "2014 World Series".to_string()],
            &["2014 World Series".to_string()]
        ), "hits@1 judges the top answer only");
    }

    #[test]
    fn empty_eval_reports_na() {
        let report = EvalReport {
            per_question: Vec::new(),
            aggregate: Aggregate {
                questions: 0,
                hits_at_1: None,
                mean_brain_calls: 0.0,
                mean_hand_calls: 0.0,
                mean_node_reduction: 0.0,
            },
        };
        assert!(report.render_table().contains("hits@1=n/a"));
    }

    #[test]
    fn question_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qs.ndjson");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"who?\",\"gold_answers\":[\"x\"]}\n\n{\"id\":\"b\",\"text\":\"what?\"}\n",
        )
        .unwrap();
        let qs = load_questions(&path).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].gold_answers, vec!["x"]);
        assert!(qs[1].gold_answers.is_empty());
        assert!(load_questions(&dir.path().join("missing")).is_err());
    }
}
