//! In-memory knowledge graph with interned identifiers, deduplicated triple
//! storage, and bidirectional adjacency indexes.
//!
//! The graph is immutable after load. Identifiers are assigned in first
//! appearance order of the input file so that repeated loads of the same
//! file produce identical handles and neighbor orderings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense handle for an interned entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense handle for an interned relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

/// Dense handle for an interned literal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LiteralId(pub u32);

/// Dense handle into the triple array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleId(pub u32);

/// An interned entity with its raw surface label and coarse schema tags.
///
/// Type tags are derived from the `domain.type.property` convention of
/// relation labels: an entity appearing in head position of such a relation
/// is tagged with the `domain.type` prefix.
#[derive(Debug, Clone)]
pub struct EntityRef {
    pub id: EntityId,
    pub label: String,
    pub type_tags: std::collections::BTreeSet<String>,
}

/// An interned relation. `cluster_label` is the coarse schema cluster used
/// when relations are exposed in privacy mode (first label segment).
#[derive(Debug, Clone)]
pub struct RelationRef {
    pub id: RelationId,
    pub label: String,
    pub cluster_label: Option<String>,
}

/// Kind of a literal tail value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LiteralKind {
    Date,
    Number,
    Str,
}

/// A literal tail value, kept distinct from entities so the anonymizer can
/// coarsen it instead of pseudonymizing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Literal {
    pub kind: LiteralKind,
    pub raw: String,
}

/// Tail position of a triple: another entity or a literal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TailRef {
    Entity(EntityId),
    Literal(LiteralId),
}

/// A stored fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: TailRef,
}

/// Direction selector for adjacency queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

/// Input serialization of a graph file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Tsv,
    NTriplesSubset,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("parse error at line {0}")]
    Parse(usize),
    #[error("unknown entity {0:?}")]
    UnknownEntity(EntityId),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable in-memory knowledge graph.
#[derive(Debug)]
pub struct KnowledgeGraph {
    entities: Vec<EntityRef>,
    relations: Vec<RelationRef>,
    literals: Vec<Literal>,
    triples: Vec<Triple>,
    out_index: Vec<Vec<TripleId>>,
    in_index: Vec<Vec<TripleId>>,
    entity_by_label: HashMap<String, EntityId>,
    duplicate_warnings: usize,
}

impl KnowledgeGraph {
    /// Loads a graph from `path`, deduplicating triples and building both
    /// adjacency indexes. Malformed lines abort with the 1-based line number.
    pub fn load(path: &Path, format: GraphFormat) -> Result<Self, KgError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, format)
    }

    /// Parses graph text. See [`KnowledgeGraph::load`].
    pub fn parse(text: &str, format: GraphFormat) -> Result<Self, KgError> {
        let mut builder = GraphBuilder::default();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (head, rel, tail) = match format {
                GraphFormat::Tsv => parse_tsv_line(line).ok_or(KgError::Parse(line_no))?,
                GraphFormat::NTriplesSubset => {
                    parse_ntriples_line(trimmed).ok_or(KgError::Parse(line_no))?
                }
            };
            builder.add(head, rel, tail, line_no)?;
        }
        Ok(builder.finish())
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// Number of duplicated input lines dropped during load.
    pub fn duplicate_warnings(&self) -> usize {
        self.duplicate_warnings
    }

    pub fn entity(&self, id: EntityId) -> Option<&EntityRef> {
        self.entities.get(id.0 as usize)
    }

    pub fn relation(&self, id: RelationId) -> Option<&RelationRef> {
        self.relations.get(id.0 as usize)
    }

    pub fn literal(&self, id: LiteralId) -> Option<&Literal> {
        self.literals.get(id.0 as usize)
    }

    pub fn triple(&self, id: TripleId) -> Option<&Triple> {
        self.triples.get(id.0 as usize)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &[EntityRef] {
        &self.entities
    }

    pub fn relations(&self) -> &[RelationRef] {
        &self.relations
    }

    pub fn entity_by_label(&self, label: &str) -> Option<EntityId> {
        self.entity_by_label.get(label).copied()
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entities[id.0 as usize].label
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relations[id.0 as usize].label
    }

    /// All triples incident to `e` in the requested direction, ordered by
    /// (relation id, neighbor id). For `Both`, out-edges precede in-edges.
    pub fn neighbors(&self, e: EntityId, direction: Direction) -> Result<Vec<TripleId>, KgError> {
        if e.0 as usize >= self.entities.len() {
            return Err(KgError::UnknownEntity(e));
        }
        let mut out = Vec::new();
        match direction {
            Direction::Out => out.extend_from_slice(&self.out_index[e.0 as usize]),
            Direction::In => out.extend_from_slice(&self.in_index[e.0 as usize]),
            Direction::Both => {
                out.extend_from_slice(&self.out_index[e.0 as usize]);
                out.extend_from_slice(&self.in_index[e.0 as usize]);
            }
        }
        Ok(out)
    }

    /// Entity neighbors of `e` over undirected edges (literal tails do not
    /// connect), deduplicated, in index order.
    pub fn entity_neighbors(&self, e: EntityId) -> Result<Vec<EntityId>, KgError> {
        let mut seen = std::collections::BTreeSet::new();
        for tid in self.neighbors(e, Direction::Both)? {
            let t = self.triples[tid.0 as usize];
            if t.head != e {
                seen.insert(t.head);
            }
            if let TailRef::Entity(other) = t.tail {
                if other != e {
                    seen.insert(other);
                }
            }
        }
        Ok(seen.into_iter().collect())
    }

    /// Undirected shortest-path length between `a` and `b` if it is at most
    /// `cap`, found by expanding frontiers from both endpoints.
    pub fn hop_distance(
        &self,
        a: EntityId,
        b: EntityId,
        cap: usize,
    ) -> Result<Option<usize>, KgError> {
        if a.0 as usize >= self.entities.len() {
            return Err(KgError::UnknownEntity(a));
        }
        if b.0 as usize >= self.entities.len() {
            return Err(KgError::UnknownEntity(b));
        }
        if a == b {
            return Ok(Some(0));
        }
        if cap == 0 {
            return Ok(None);
        }
        let mut dist_a: HashMap<EntityId, usize> = HashMap::from([(a, 0)]);
        let mut dist_b: HashMap<EntityId, usize> = HashMap::from([(b, 0)]);
        let mut frontier_a = vec![a];
        let mut frontier_b = vec![b];
        let mut depth_a = 0usize;
        let mut depth_b = 0usize;
        while !frontier_a.is_empty() || !frontier_b.is_empty() {
            // Expand the smaller live frontier first.
            let expand_a = !frontier_a.is_empty()
                && (frontier_b.is_empty() || frontier_a.len() <= frontier_b.len());
            let depth = if expand_a {
                depth_a += 1;
                depth_a
            } else {
                depth_b += 1;
                depth_b
            };
            if depth_a + depth_b > cap {
                return Ok(None);
            }
            let (frontier, dist, other) = if expand_a {
                (&mut frontier_a, &mut dist_a, &dist_b)
            } else {
                (&mut frontier_b, &mut dist_b, &dist_a)
            };
            let mut next = Vec::new();
            for &e in frontier.iter() {
                for n in self.entity_neighbors(e)? {
                    if dist.contains_key(&n) {
                        continue;
                    }
                    dist.insert(n, depth);
                    if let Some(d_other) = other.get(&n) {
                        let total = depth + d_other;
                        if total <= cap {
                            return Ok(Some(total));
                        }
                    }
                    next.push(n);
                }
            }
            *frontier = next;
        }
        Ok(None)
    }
}

fn parse_tsv_line(line: &str) -> Option<(String, String, TailSpec)> {
    let mut parts = line.split('\t');
    let head = parts.next()?.trim();
    let rel = parts.next()?.trim();
    let tail = parts.next()?.trim();
    if parts.next().is_some() || head.is_empty() || rel.is_empty() || tail.is_empty() {
        return None;
    }
    Some((head.to_string(), rel.to_string(), parse_tail(tail)?))
}

/// `"value"^^kind` tails become typed literals; anything else is an entity.
fn parse_tail(raw: &str) -> Option<TailSpec> {
    if let Some(rest) = raw.strip_prefix('"') {
        let (value, kind) = rest.split_once("\"^^")?;
        let kind = match kind.trim() {
            "date" => LiteralKind::Date,
            "number" => LiteralKind::Number,
            "string" => LiteralKind::Str,
            _ => return None,
        };
        validate_literal(kind, value)?;
        return Some(TailSpec::Literal(Literal {
            kind,
            raw: value.to_string(),
        }));
    }
    Some(TailSpec::Entity(raw.to_string()))
}

fn validate_literal(kind: LiteralKind, value: &str) -> Option<()> {
    match kind {
        LiteralKind::Date => iso_date_prefix_len(value).map(|_| ()),
        LiteralKind::Number => value.parse::<f64>().ok().map(|_| ()),
        LiteralKind::Str => Some(()),
    }
}

/// Length of the valid ISO-8601 prefix (YYYY, YYYY-MM or YYYY-MM-DD).
pub(crate) fn iso_date_prefix_len(value: &str) -> Option<usize> {
    let bytes = value.as_bytes();
    if bytes.len() < 4 || !bytes[..4].iter().all(u8::is_ascii_digit) {
        return None;
    }
    let mut len = 4;
    for part_len in [2, 2] {
        let start = len;
        if bytes.len() <= start || bytes[start] != b'-' {
            break;
        }
        let end = start + 1 + part_len;
        if bytes.len() < end || !bytes[start + 1..end].iter().all(u8::is_ascii_digit) {
            return None;
        }
        len = end;
    }
    Some(len)
}

fn parse_ntriples_line(line: &str) -> Option<(String, String, TailSpec)> {
    let line = line.strip_suffix('.').map(str::trim_end).unwrap_or(line);
    let mut rest = line.trim();
    let head = take_iri(&mut rest)?;
    let rel = take_iri(&mut rest)?;
    rest = rest.trim_start();
    let tail = if rest.starts_with('<') {
        TailSpec::Entity(iri_local_name(take_iri(&mut rest)?.as_str()))
    } else {
        let inner = rest.strip_prefix('"')?;
        let (value, _) = inner.split_once('"')?;
        TailSpec::Literal(Literal {
            kind: LiteralKind::Str,
            raw: value.to_string(),
        })
    };
    let head = iri_local_name(&head);
    let rel = iri_local_name(&rel);
    if head.is_empty() || rel.is_empty() {
        return None;
    }
    Some((head, rel, tail))
}

fn take_iri(rest: &mut &str) -> Option<String> {
    let s = rest.trim_start();
    let inner = s.strip_prefix('<')?;
    let end = inner.find('>')?;
    *rest = &inner[end + 1..];
    Some(inner[..end].to_string())
}

fn iri_local_name(iri: &str) -> String {
    iri.rsplit(['/', '#']).next().unwrap_or(iri).to_string()
}

enum TailSpec {
    Entity(String),
    Literal(Literal),
}

#[derive(Default)]
struct GraphBuilder {
    entities: Vec<EntityRef>,
    relations: Vec<RelationRef>,
    literals: Vec<Literal>,
    triples: Vec<Triple>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
    literal_ids: HashMap<(LiteralKind, String), LiteralId>,
    seen: std::collections::HashSet<Triple>,
    duplicates: usize,
}

impl GraphBuilder {
    fn intern_entity(&mut self, label: String) -> EntityId {
        if let Some(&id) = self.entity_ids.get(&label) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entity_ids.insert(label.clone(), id);
        self.entities.push(EntityRef {
            id,
            label,
            type_tags: Default::default(),
        });
        id
    }

    fn intern_relation(&mut self, label: String) -> RelationId {
        if let Some(&id) = self.relation_ids.get(&label) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        let cluster_label = label
            .split('.')
            .next()
            .filter(|seg| *seg != label)
            .map(str::to_string);
        self.relation_ids.insert(label.clone(), id);
        self.relations.push(RelationRef {
            id,
            label,
            cluster_label,
        });
        id
    }

    fn intern_literal(&mut self, lit: Literal) -> LiteralId {
        let key = (lit.kind, lit.raw.clone());
        if let Some(&id) = self.literal_ids.get(&key) {
            return id;
        }
        let id = LiteralId(self.literals.len() as u32);
        self.literal_ids.insert(key, id);
        self.literals.push(lit);
        id
    }

    fn add(
        &mut self,
        head: String,
        rel: String,
        tail: TailSpec,
        _line_no: usize,
    ) -> Result<(), KgError> {
        let head_id = self.intern_entity(head);
        let rel_id = self.intern_relation(rel);
        let tail_ref = match tail {
            TailSpec::Entity(label) => TailRef::Entity(self.intern_entity(label)),
            TailSpec::Literal(lit) => TailRef::Literal(self.intern_literal(lit)),
        };
        let triple = Triple {
            head: head_id,
            relation: rel_id,
            tail: tail_ref,
        };
        if !self.seen.insert(triple) {
            self.duplicates += 1;
            return Ok(());
        }
        // Head entities inherit the domain.type prefix of the relation.
        let label = self.relations[rel_id.0 as usize].label.clone();
        let segs: Vec<&str> = label.split('.').collect();
        if segs.len() >= 3 {
            self.entities[head_id.0 as usize]
                .type_tags
                .insert(segs[..2].join("."));
        }
        self.triples.push(triple);
        Ok(())
    }

    fn finish(self) -> KnowledgeGraph {
        let mut out_index: Vec<Vec<TripleId>> = vec![Vec::new(); self.entities.len()];
        let mut in_index: Vec<Vec<TripleId>> = vec![Vec::new(); self.entities.len()];
        for (i, t) in self.triples.iter().enumerate() {
            let tid = TripleId(i as u32);
            out_index[t.head.0 as usize].push(tid);
            if let TailRef::Entity(e) = t.tail {
                in_index[e.0 as usize].push(tid);
            }
        }
        let sort_key = |t: &Triple, from_head: bool| {
            let neighbor = if from_head {
                match t.tail {
                    TailRef::Entity(e) => (0u8, e.0),
                    TailRef::Literal(l) => (1u8, l.0),
                }
            } else {
                (0u8, t.head.0)
            };
            (t.relation.0, neighbor)
        };
        for bucket in &mut out_index {
            bucket.sort_by_key(|tid| sort_key(&self.triples[tid.0 as usize], true));
        }
        for bucket in &mut in_index {
            bucket.sort_by_key(|tid| sort_key(&self.triples[tid.0 as usize], false));
        }
        KnowledgeGraph {
            entity_by_label: self.entity_ids,
            entities: self.entities,
            relations: self.relations,
            literals: self.literals,
            triples: self.triples,
            out_index,
            in_index,
            duplicate_warnings: self.duplicates,
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Plain single-frontier BFS, used as the oracle for `hop_distance`.
    pub fn bfs_distance(g: &KnowledgeGraph, a: EntityId, b: EntityId) -> Option<usize> {
        let mut dist = HashMap::from([(a, 0usize)]);
        let mut queue = std::collections::VecDeque::from([a]);
        while let Some(e) = queue.pop_front() {
            let d = dist[&e];
            if e == b {
                return Some(d);
            }
            for n in g.entity_neighbors(e).unwrap() {
                dist.entry(n).or_insert_with(|| {
                    queue.push_back(n);
                    d + 1
                });
            }
        }
        None
    }

    pub fn fixture_path(name: &str) -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures")
            .join(name)
    }

    pub fn load_fixture(name: &str) -> KnowledgeGraph {
        KnowledgeGraph::load(&fixture_path(name), GraphFormat::Tsv).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn mascot_fixture_counts() {
        let g = load_fixture("mascot.kg");
        assert_eq!(g.entity_count(), 5);
        assert_eq!(g.relation_count(), 2);
        assert_eq!(g.triple_count(), 4);
        assert_eq!(g.duplicate_warnings(), 0);
    }

    #[test]
    fn empty_input_yields_empty_graph() {
        let g = KnowledgeGraph::parse("", GraphFormat::Tsv).unwrap();
        assert_eq!(g.entity_count(), 0);
        assert_eq!(g.triple_count(), 0);
    }

    #[test]
    fn duplicate_triple_counted_not_fatal() {
        let g = KnowledgeGraph::parse("a\tr\tb\na\tr\tb\n", GraphFormat::Tsv).unwrap();
        assert_eq!(g.triple_count(), 1);
        assert_eq!(g.duplicate_warnings(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KnowledgeGraph::parse("a\tr\tb\nbroken line\n", GraphFormat::Tsv).unwrap_err();
        assert!(matches!(err, KgError::Parse(2)));
    }

    #[test]
    fn literal_tails_parse_and_validate() {
        let g =
            KnowledgeGraph::parse("a\tr\t\"2020-03-15\"^^date\na\ts\t\"7\"^^number\n", GraphFormat::Tsv)
                .unwrap();
        assert_eq!(g.entity_count(), 1);
        assert_eq!(g.literals.len(), 2);
        let err = KnowledgeGraph::parse("a\tr\t\"not a date\"^^date\n", GraphFormat::Tsv);
        assert!(matches!(err, Err(KgError::Parse(1))));
    }

    #[test]
    fn ntriples_subset_parses() {
        let text = "<http://x/A> <http://x/rel.type.p> <http://x/B> .\n<http://x/A> <http://x/p2> \"lit\" .\n";
        let g = KnowledgeGraph::parse(text, GraphFormat::NTriplesSubset).unwrap();
        assert_eq!(g.entity_count(), 2);
        assert_eq!(g.triple_count(), 2);
        assert_eq!(g.entity_label(EntityId(0)), "A");
    }

    #[test]
    fn neighbors_ordering_and_counts() {
        let g = load_fixture("mascot.kg");
        let giants = g.entity_by_label("San Francisco Giants").unwrap();
        let out = g.neighbors(giants, Direction::Out).unwrap();
        assert_eq!(out.len(), 3);
        let both = g.neighbors(giants, Direction::Both).unwrap();
        assert_eq!(both.len(), 4);
        let leaf = g.entity_by_label("2014 World Series").unwrap();
        assert!(g.neighbors(leaf, Direction::Out).unwrap().is_empty());
        assert!(g.neighbors(EntityId(99), Direction::Out).is_err());
    }

    #[test]
    fn neighbor_order_is_deterministic_across_loads() {
        let g1 = load_fixture("mascot.kg");
        let g2 = load_fixture("mascot.kg");
        for e in 0..g1.entity_count() {
            let id = EntityId(e as u32);
            assert_eq!(
                g1.neighbors(id, Direction::Both).unwrap(),
                g2.neighbors(id, Direction::Both).unwrap()
            );
            assert_eq!(g1.entity_label(id), g2.entity_label(id));
        }
    }

    #[test]
    fn hop_distance_examples() {
        let g = load_fixture("mascot.kg");
        let seal = g.entity_by_label("Lou Seal").unwrap();
        let ws = g.entity_by_label("2014 World Series").unwrap();
        assert_eq!(g.hop_distance(seal, ws, 3).unwrap(), Some(2));
        assert_eq!(g.hop_distance(seal, seal, 0).unwrap(), Some(0));
        assert_eq!(g.hop_distance(seal, ws, 1).unwrap(), None);

        let lejre = load_fixture("lejre.kg");
        let a = lejre.entity_by_label("Lejre Municipality").unwrap();
        let b = lejre.entity_by_label("Germany").unwrap();
        assert_eq!(lejre.hop_distance(a, b, 3).unwrap(), Some(2));
    }

    #[test]
    fn index_consistency_full_scan() {
        for name in ["mascot.kg", "lejre.kg", "guatemala.kg", "obama.kg", "paris.kg"] {
            let g = load_fixture(name);
            for (i, t) in g.triples().iter().enumerate() {
                let tid = TripleId(i as u32);
                assert!(g.out_index[t.head.0 as usize].contains(&tid));
                if let TailRef::Entity(e) = t.tail {
                    assert!(g.in_index[e.0 as usize].contains(&tid));
                }
            }
            let indexed: usize = g.out_index.iter().map(Vec::len).sum();
            assert_eq!(indexed, g.triple_count());
        }
    }

    #[test]
    fn hop_distance_matches_bfs_oracle_on_random_graphs() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..40 {
            let n = rng.gen_range(2..=60);
            let edges = rng.gen_range(1..=n * 2);
            let mut text = String::new();
            for _ in 0..edges {
                let h = rng.gen_range(0..n);
                let t = rng.gen_range(0..n);
                if h == t {
                    continue;
                }
                text.push_str(&format!("n{h}\tr{}\tn{t}\n", rng.gen_range(0..4)));
            }
            let g = match KnowledgeGraph::parse(&text, GraphFormat::Tsv) {
                Ok(g) if g.entity_count() >= 2 => g,
                _ => continue,
            };
            for _ in 0..10 {
                let a = EntityId(rng.gen_range(0..g.entity_count()) as u32);
                let b = EntityId(rng.gen_range(0..g.entity_count()) as u32);
                let oracle = bfs_distance(&g, a, b).filter(|&d| d <= 6);
                assert_eq!(g.hop_distance(a, b, 6).unwrap(), oracle, "{a:?} {b:?}");
            }
        }
    }
}
