//! Question grounding: mention extraction, entity alignment, and bounded
//! working-subgraph detection around the topic anchors.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, Embedder, GatewayError, TemplateFields, TemplateId};
use crate::kg::{EntityId, KnowledgeGraph, TailRef, TripleId};
use crate::transcript::Transcript;

/// Mentions whose best alignment score falls below this floor are dropped;
/// it keeps garbage anchors off toy graphs where every cosine is small.
pub const SIMILARITY_FLOOR: f64 = 0.35;

/// An input question. Gold answers ride along for evaluation only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
}

impl Question {
    pub fn new(id: &str, text: &str) -> Self {
        Self {
            id: id.to_string(),
            text: text.to_string(),
            gold_answers: Vec::new(),
        }
    }
}

/// One aligned topic entity.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicEntity {
    pub entity: EntityId,
    pub mention: String,
    pub score: f64,
}

/// Ordered topic entity set: score-descending, ties broken by entity id.
#[derive(Debug, Clone, Default)]
pub struct TopicEntitySet {
    pub entries: Vec<TopicEntity>,
}

impl TopicEntitySet {
    pub fn ids(&self) -> Vec<EntityId> {
        self.entries.iter().map(|t| t.entity).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Bounded raw working subgraph induced on entities within `radius` hops of
/// some anchor. Triple ids reference the parent graph.
#[derive(Debug, Clone)]
pub struct RawSubgraph {
    pub anchors: Vec<EntityId>,
    pub entities: BTreeSet<EntityId>,
    pub triples: BTreeSet<TripleId>,
    pub radius: usize,
}

impl RawSubgraph {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }
}

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("no mention aligned above the similarity floor")]
    NoAlignment,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Deserialize)]
struct MentionsReply {
    mentions: Vec<String>,
}

/// Asks the Hand channel for the entity mentions present in the question.
pub fn extract_mentions(
    question: &Question,
    hand: &std::sync::Arc<dyn gateway::ChatBackend>,
    transcript: &mut Transcript,
) -> Result<Vec<String>, GroundingError> {
    if question.text.trim().is_empty() {
        return Err(GroundingError::EmptyQuestion);
    }
    let fields = TemplateFields::from([("question", question.text.clone())]);
    let reply: MentionsReply = gateway::call_parsed(
        gateway::Role::Hand,
        None,
        hand,
        TemplateId::EntityExtraction,
        fields,
        &crate::boundary::RawDictionary::default(),
        usize::MAX,
        transcript,
        gateway::parse_json,
    )?;
    Ok(reply.mentions)
}

/// Aligns each mention to its best-matching entity by label embedding
/// similarity. An exact case-insensitive label match scores 1.0 and wins
/// outright; everything else is cosine over the embedder, considering at
/// most `top_k` nearest candidates per mention.
pub fn align_mentions(
    mentions: &[String],
    graph: &KnowledgeGraph,
    embedder: &dyn Embedder,
    top_k: usize,
) -> Result<TopicEntitySet, GroundingError> {
    assert!(top_k >= 1, "top_k must be at least 1");
    let mut best: HashMap<EntityId, TopicEntity> = HashMap::new();
    for mention in mentions {
        if mention.trim().is_empty() {
            continue;
        }
        let aligned = align_single(mention, graph, embedder, top_k);
        if let Some(hit) = aligned {
            let slot = best.entry(hit.entity).or_insert_with(|| hit.clone());
            if hit.score > slot.score {
                *slot = hit;
            }
        }
    }
    if best.is_empty() {
        return Err(GroundingError::NoAlignment);
    }
    let mut entries: Vec<TopicEntity> = best.into_values().collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.entity.cmp(&b.entity))
    });
    Ok(TopicEntitySet { entries })
}

fn align_single(
    mention: &str,
    graph: &KnowledgeGraph,
    embedder: &dyn Embedder,
    top_k: usize,
) -> Option<TopicEntity> {
    let lowered = mention.to_lowercase();
    for e in graph.entities() {
        if e.label.to_lowercase() == lowered {
            return Some(TopicEntity {
                entity: e.id,
                mention: mention.to_string(),
                score: 1.0,
            });
        }
    }
    let probe = embedder.embed(mention).ok()?;
    let mut scored: Vec<(EntityId, f64)> = graph
        .entities()
        .iter()
        .filter_map(|e| {
            let v = embedder.embed(&e.label).ok()?;
            Some((e.id, probe.cosine(&v)))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
        .first()
        .filter(|(_, score)| *score >= SIMILARITY_FLOOR)
        .map(|(id, score)| TopicEntity {
            entity: *id,
            mention: mention.to_string(),
            score: *score,
        })
}

/// Induced subgraph over all entities within `d_max` undirected hops of any
/// anchor. Components that contain no anchor are unreachable and therefore
/// excluded by construction.
pub fn detect_subgraph(graph: &KnowledgeGraph, topics: &TopicEntitySet, d_max: usize) -> RawSubgraph {
    assert!(!topics.is_empty(), "topic set must be non-empty");
    assert!(d_max >= 1, "d_max must be at least 1");
    let anchors = topics.ids();
    let mut members: BTreeSet<EntityId> = anchors.iter().copied().collect();
    let mut queue: VecDeque<(EntityId, usize)> = anchors.iter().map(|&a| (a, 0)).collect();
    let mut dist: HashMap<EntityId, usize> = anchors.iter().map(|&a| (a, 0)).collect();
    while let Some((e, d)) = queue.pop_front() {
        if d == d_max {
            continue;
        }
        for n in graph.entity_neighbors(e).unwrap_or_default() {
            if dist.contains_key(&n) {
                continue;
            }
            dist.insert(n, d + 1);
            members.insert(n);
            queue.push_back((n, d + 1));
        }
    }
    let mut triples = BTreeSet::new();
    for (i, t) in graph.triples().iter().enumerate() {
        if !members.contains(&t.head) {
            continue;
        }
        let include = match t.tail {
            TailRef::Entity(e) => members.contains(&e),
            TailRef::Literal(_) => true,
        };
        if include {
            triples.insert(TripleId(i as u32));
        }
    }
    RawSubgraph {
        anchors,
        entities: members,
        triples,
        radius: d_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{Scenario, ScriptedBackend};
    use crate::gateway::HashEmbedder;
    use crate::kg::test_support::load_fixture;
    use std::sync::Arc;

    #[test]
    fn mentions_from_scripted_hand() {
        let hand: Arc<dyn gateway::ChatBackend> = Arc::new(ScriptedBackend::new(Scenario::Cases));
        let mut t = Transcript::new();
        let q = Question::new("mascot", "Lou Seal is the mascot for the team that last won the World Series when?");
        assert_eq!(extract_mentions(&q, &hand, &mut t).unwrap(), vec!["Lou Seal"]);
        let err = extract_mentions(&Question::new("x", "  "), &hand, &mut t).unwrap_err();
        assert!(matches!(err, GroundingError::EmptyQuestion));
    }

    #[test]
    fn exact_label_match_scores_one() {
        let g = load_fixture("mascot.kg");
        let set = align_mentions(&["Lou Seal".to_string()], &g, &HashEmbedder::default(), 5).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries[0].score, 1.0);
        assert_eq!(g.entity_label(set.entries[0].entity), "Lou Seal");
    }

    #[test]
    fn lejre_mentions_align_in_id_order() {
        let g = load_fixture("lejre.kg");
        let set = align_mentions(
            &["Germany".to_string(), "Lejre Municipality".to_string()],
            &g,
            &HashEmbedder::default(),
            5,
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        // Both are exact matches; ties break by first-appearance entity id.
        assert_eq!(g.entity_label(set.entries[0].entity), "Lejre Municipality");
        assert_eq!(g.entity_label(set.entries[1].entity), "Germany");
    }

    #[test]
    fn unalignable_mention_fails() {
        let g = load_fixture("mascot.kg");
        let embedder = HashEmbedder::default();
        // Verify the floor itself: every label scores below it.
        let probe = embedder.embed("Zzyzx").unwrap();
        for e in g.entities() {
            let cos = probe.cosine(&embedder.embed(&e.label).unwrap());
            assert!(cos < SIMILARITY_FLOOR, "{} scored {}", e.label, cos);
        }
        let err = align_mentions(&["Zzyzx".to_string()], &g, &embedder, 5).unwrap_err();
        assert!(matches!(err, GroundingError::NoAlignment));
    }

    #[test]
    fn subgraph_examples_from_fixture() {
        let g = load_fixture("mascot.kg");
        let topics = align_mentions(&["Lou Seal".to_string()], &g, &HashEmbedder::default(), 5).unwrap();
        let full = detect_subgraph(&g, &topics, 3);
        assert_eq!(full.entity_count(), 5);
        assert_eq!(full.triples.len(), 4);
        let near = detect_subgraph(&g, &topics, 1);
        assert_eq!(near.entity_count(), 2);
        assert_eq!(near.triples.len(), 1);
    }

    #[test]
    fn isolated_anchor_yields_anchor_only_subgraph() {
        let g = crate::kg::KnowledgeGraph::parse("lonely\tr\t\"5\"^^number\nother\tr\tthird\n", crate::kg::GraphFormat::Tsv).unwrap();
        let topics = align_mentions(&["lonely".to_string()], &g, &HashEmbedder::default(), 3).unwrap();
        let sub = detect_subgraph(&g, &topics, 2);
        assert_eq!(sub.entity_count(), 1);
        // The literal-tailed triple stays incident to the anchor.
        assert_eq!(sub.triples.len(), 1);
    }

    #[test]
    fn subgraph_grows_monotonically_with_radius() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(4..40);
            let mut text = String::new();
            for _ in 0..n * 2 {
                let h = rng.gen_range(0..n);
                let t = rng.gen_range(0..n);
                if h != t {
                    text.push_str(&format!("v{h}\tr{}\tv{t}\n", rng.gen_range(0..3)));
                }
            }
            let g = match crate::kg::KnowledgeGraph::parse(&text, crate::kg::GraphFormat::Tsv) {
                Ok(g) if g.entity_count() > 1 => g,
                _ => continue,
            };
            let anchor = g.entities()[rng.gen_range(0..g.entity_count())].id;
            let topics = TopicEntitySet {
                entries: vec![TopicEntity {
                    entity: anchor,
                    mention: "x".into(),
                    score: 1.0,
                }],
            };
            let mut prev = detect_subgraph(&g, &topics, 1);
            for d in 2..=4 {
                let next = detect_subgraph(&g, &topics, d);
                assert!(prev.entities.is_subset(&next.entities));
                assert!(prev.triples.is_subset(&next.triples));
                // Every member is actually within d hops of the anchor.
                for &e in &next.entities {
                    let hop = g.hop_distance(anchor, e, d).unwrap();
                    assert!(hop.is_some(), "member outside radius");
                }
                prev = next;
            }
        }
    }
}
