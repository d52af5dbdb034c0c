//! Session anonymization and the privacy-preserving view.
//!
//! For each question a fresh secret keys an invertible pseudonym table over
//! the working subgraph. The exposed view goes beyond name masking:
//! identifying literals are coarsened, structurally identical non-anchor
//! entities collapse into supernodes, and the view is pruned to a node
//! budget so unique motifs cannot re-identify entities. The mapping is
//! sealed once the view exists; unknown tokens arriving later are treated
//! as model hallucinations, never minted.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use hmac::{Hmac, Mac};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boundary::RawDictionary;
use crate::grounding::RawSubgraph;
use crate::kg::{EntityId, KnowledgeGraph, Literal, LiteralId, LiteralKind, RelationId, TailRef};

/// How relation labels are exposed on the remote channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationMode {
    /// Original labels; maximal utility for the remote reasoner.
    Utility,
    /// Session tokens with coarse cluster hints.
    Privacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DateGranularity {
    Year,
    Month,
    Full,
}

/// Per-session privacy configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub relation_mode: RelationMode,
    /// Fraction of entities that lose their raw labels (1.0 = all).
    #[serde(rename = "ratio")]
    pub anonymization_ratio: f64,
    /// Maximum entity (and supernode) count after sanitization.
    pub node_budget: usize,
    pub cluster_min_size: usize,
    pub date_granularity: DateGranularity,
    pub number_bucket_width: f64,
    pub expose_type_tags: bool,
}

impl Default for PrivacyPolicy {
    fn default() -> Self {
        Self {
            relation_mode: RelationMode::Utility,
            anonymization_ratio: 1.0,
            node_budget: 256,
            cluster_min_size: 2,
            date_granularity: DateGranularity::Year,
            number_bucket_width: 10.0,
            expose_type_tags: true,
        }
    }
}

impl PrivacyPolicy {
    pub fn validate(&self) -> Result<(), AnonymizeError> {
        if !(0.0..=1.0).contains(&self.anonymization_ratio) {
            return Err(AnonymizeError::InvalidPolicy("ratio outside [0,1]".into()));
        }
        if self.cluster_min_size < 2 {
            return Err(AnonymizeError::InvalidPolicy("cluster_min_size < 2".into()));
        }
        if self.number_bucket_width <= 0.0 {
            return Err(AnonymizeError::InvalidPolicy("bucket width <= 0".into()));
        }
        Ok(())
    }

    /// Compatibility fingerprint stored on experience records.
    pub fn tag(&self) -> PolicyTag {
        PolicyTag {
            relation_mode: self.relation_mode,
            ratio: self.anonymization_ratio,
        }
    }
}

/// Privacy fingerprint used to filter incompatible experiences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTag {
    pub relation_mode: RelationMode,
    pub ratio: f64,
}

impl PolicyTag {
    /// Same relation mode and a ratio within 0.2.
    pub fn compatible(&self, other: &PolicyTag) -> bool {
        self.relation_mode == other.relation_mode && (self.ratio - other.ratio).abs() <= 0.2
    }
}

#[derive(Debug, Error)]
pub enum AnonymizeError {
    #[error("invalid privacy policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("node budget {budget} cannot keep the {need} anchor-connecting nodes")]
    BudgetInfeasible { need: usize, budget: usize },
    #[error("cannot coarsen literal {0:?}")]
    Coarsen(String),
}

/// Raw-side key of a pseudonym.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RawKey {
    Entity(EntityId),
    Relation(RelationId),
    StrLiteral(LiteralId),
}

/// Per-question secret and invertible pseudonym table.
pub struct SessionMapping {
    secret: Vec<u8>,
    forward: HashMap<RawKey, String>,
    inverse: HashMap<String, RawKey>,
    keep_raw: BTreeSet<EntityId>,
    sealed: bool,
}

impl Drop for SessionMapping {
    fn drop(&mut self) {
        // Secret material does not outlive the session object.
        for b in &mut self.secret {
            *b = 0;
        }
    }
}

impl SessionMapping {
    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// No further tokens after the view is built.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn token(&self, key: RawKey) -> Option<&str> {
        self.forward.get(&key).map(String::as_str)
    }

    pub fn resolve(&self, token: &str) -> Option<RawKey> {
        self.inverse.get(token).copied()
    }

    /// Entities that keep their raw labels under the current ratio.
    pub fn plaintext_entities(&self) -> &BTreeSet<EntityId> {
        &self.keep_raw
    }

    pub fn token_count(&self) -> usize {
        self.forward.len()
    }

    fn mint(&mut self, key: RawKey, material: &str) -> String {
        debug_assert!(!self.sealed, "mint after seal");
        let prefix = match key {
            RawKey::Relation(_) => "rel",
            _ => "ent",
        };
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.secret).expect("any key size works");
        mac.update(material.as_bytes());
        let digest = hex::encode(mac.finalize().into_bytes());
        let mut token = format!("{prefix}_{}", &digest[..8]);
        let mut salt = 2usize;
        while self.inverse.contains_key(&token) {
            token = format!("{prefix}_{}_{salt}", &digest[..8]);
            salt += 1;
        }
        self.forward.insert(key, token.clone());
        self.inverse.insert(token.clone(), key);
        token
    }

    fn keep(&mut self, key: RawKey, label: &str) {
        self.forward.insert(key, label.to_string());
        self.inverse.entry(label.to_string()).or_insert(key);
    }
}

/// Builds the session mapping for a working subgraph: fresh secret, HMAC
/// tokens truncated to 8 hex chars, and (below ratio 1.0) a secret-seeded
/// sample of non-anchor entities that keep their raw labels.
pub fn build_mapping(
    graph: &KnowledgeGraph,
    sub: &RawSubgraph,
    policy: &PrivacyPolicy,
) -> Result<SessionMapping, AnonymizeError> {
    policy.validate()?;
    let mut secret = vec![0u8; 32];
    rand::thread_rng().fill_bytes(&mut secret);
    build_mapping_with_secret(graph, sub, policy, secret)
}

pub(crate) fn build_mapping_with_secret(
    graph: &KnowledgeGraph,
    sub: &RawSubgraph,
    policy: &PrivacyPolicy,
    secret: Vec<u8>,
) -> Result<SessionMapping, AnonymizeError> {
    let mut mapping = SessionMapping {
        secret,
        forward: HashMap::new(),
        inverse: HashMap::new(),
        keep_raw: BTreeSet::new(),
        sealed: false,
    };
    let ratio = policy.anonymization_ratio;
    let entities: Vec<EntityId> = sub.entities.iter().copied().collect();
    if ratio == 0.0 {
        mapping.keep_raw.extend(entities.iter().copied());
    } else if ratio < 1.0 {
        let mut non_anchors: Vec<EntityId> = entities
            .iter()
            .copied()
            .filter(|e| !sub.anchors.contains(e))
            .collect();
        let keep_count = (((1.0 - ratio) * entities.len() as f64).round() as usize)
            .min(non_anchors.len());
        let seed = u64::from_le_bytes(mapping.secret[..8].try_into().expect("32-byte secret"));
        non_anchors.shuffle(&mut StdRng::seed_from_u64(seed));
        mapping.keep_raw.extend(non_anchors.into_iter().take(keep_count));
    }
    for &e in &entities {
        let label = graph.entity_label(e).to_string();
        if mapping.keep_raw.contains(&e) {
            mapping.keep(RawKey::Entity(e), &label);
        } else {
            mapping.mint(RawKey::Entity(e), &label);
        }
    }
    let mut relations: BTreeSet<RelationId> = BTreeSet::new();
    let mut str_literals: BTreeSet<LiteralId> = BTreeSet::new();
    for &tid in &sub.triples {
        let t = graph.triple(tid).expect("subgraph triple resolves");
        relations.insert(t.relation);
        if let TailRef::Literal(l) = t.tail {
            if graph.literal(l).map(|lit| lit.kind) == Some(LiteralKind::Str) {
                str_literals.insert(l);
            }
        }
    }
    for r in relations {
        let label = graph.relation_label(r).to_string();
        if ratio == 0.0 {
            mapping.keep(RawKey::Relation(r), &label);
        } else {
            mapping.mint(RawKey::Relation(r), &label);
        }
    }
    for l in str_literals {
        let raw = graph.literal(l).expect("literal resolves").raw.clone();
        if ratio == 0.0 {
            mapping.keep(RawKey::StrLiteral(l), &raw);
        } else {
            mapping.mint(RawKey::StrLiteral(l), &format!("str:{raw}"));
        }
    }
    Ok(mapping)
}

/// Coarsens an identifying literal: dates truncate to the policy
/// granularity, numbers map onto `[k*w, (k+1)*w)` bucket labels. String
/// literals pass through pseudonymization instead and are returned as-is.
pub fn coarsen_literal(lit: &Literal, policy: &PrivacyPolicy) -> Result<Literal, AnonymizeError> {
    match lit.kind {
        LiteralKind::Date => {
            let prefix_len = crate::kg::iso_date_prefix_len(&lit.raw)
                .ok_or_else(|| AnonymizeError::Coarsen(lit.raw.clone()))?;
            let keep = match policy.date_granularity {
                DateGranularity::Year => 4,
                DateGranularity::Month => 7.min(prefix_len),
                DateGranularity::Full => prefix_len,
            };
            Ok(Literal {
                kind: LiteralKind::Date,
                raw: lit.raw[..keep.min(prefix_len)].to_string(),
            })
        }
        LiteralKind::Number => {
            let value: f64 = lit
                .raw
                .parse()
                .map_err(|_| AnonymizeError::Coarsen(lit.raw.clone()))?;
            let w = policy.number_bucket_width;
            let k = (value / w).floor();
            Ok(Literal {
                kind: LiteralKind::Number,
                raw: format!("[{},{})", trim_float(k * w), trim_float((k + 1.0) * w)),
            })
        }
        LiteralKind::Str => Ok(lit.clone()),
    }
}

fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// A node of the anonymized view.
#[derive(Debug, Clone)]
pub struct ViewNode {
    pub token: String,
    pub kind: ViewNodeKind,
    pub type_tags: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub enum ViewNodeKind {
    Entity { raw: EntityId },
    Supernode { members: Vec<EntityId> },
    Literal { raw: LiteralId },
}

impl ViewNode {
    pub fn is_literal(&self) -> bool {
        matches!(self.kind, ViewNodeKind::Literal { .. })
    }

    /// Raw entities this node stands for (empty for literals).
    pub fn raw_members(&self) -> Vec<EntityId> {
        match &self.kind {
            ViewNodeKind::Entity { raw } => vec![*raw],
            ViewNodeKind::Supernode { members } => members.clone(),
            ViewNodeKind::Literal { .. } => Vec::new(),
        }
    }
}

/// A relation as exposed in the view.
#[derive(Debug, Clone)]
pub struct ViewRelation {
    pub raw: RelationId,
    /// Raw label in utility mode (or at ratio 0), session token otherwise.
    pub shown: String,
    pub cluster_hint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewEdge {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

/// Per-anchor structural summary exposed alongside the view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSketch {
    pub token: String,
    pub degree_bucket: String,
    pub type_tag_histogram: BTreeMap<String, usize>,
    pub radius_reached: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StructureSketch {
    pub anchors: Vec<AnchorSketch>,
    pub entity_count: usize,
    pub triple_count: usize,
}

/// The sanitized pseudonymized subgraph handed to remote reasoning.
#[derive(Debug, Clone)]
pub struct AnonymizedView {
    nodes: Vec<ViewNode>,
    relations: Vec<ViewRelation>,
    edges: Vec<ViewEdge>,
    incidence: Vec<Vec<usize>>,
    anchors: Vec<usize>,
    token_index: HashMap<String, usize>,
    pub sketch: StructureSketch,
    pub entities_before: usize,
    pub entities_after: usize,
}

impl AnonymizedView {
    pub fn node(&self, idx: usize) -> &ViewNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[ViewNode] {
        &self.nodes
    }

    pub fn relation(&self, idx: usize) -> &ViewRelation {
        &self.relations[idx]
    }

    pub fn edge(&self, idx: usize) -> ViewEdge {
        self.edges[idx]
    }

    pub fn edges(&self) -> &[ViewEdge] {
        &self.edges
    }

    /// Incident edge indices of a node, deterministic order.
    pub fn incident(&self, node: usize) -> &[usize] {
        &self.incidence[node]
    }

    pub fn anchor_indices(&self) -> &[usize] {
        &self.anchors
    }

    pub fn node_by_token(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    /// Entity and supernode count (the budgeted quantity).
    pub fn entity_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_literal()).count()
    }

    pub fn triple_count(&self) -> usize {
        self.edges.len()
    }

    /// Fraction of raw entities removed by sanitization.
    pub fn node_reduction_ratio(&self) -> f64 {
        if self.entities_before == 0 {
            0.0
        } else {
            1.0 - self.entities_after as f64 / self.entities_before as f64
        }
    }

    /// Line-oriented serialization: sketch header then `tok<TAB>rel<TAB>tok`.
    pub fn serialize(&self) -> String {
        let mut out = format!(
            "# view entities={} triples={} reduced_from={}\n",
            self.entities_after, self.triple_count(), self.entities_before
        );
        for a in &self.sketch.anchors {
            let tags: Vec<String> = a
                .type_tag_histogram
                .iter()
                .map(|(t, n)| format!("{t}:{n}"))
                .collect();
            out.push_str(&format!(
                "# anchor {} degree{} radius={} tags={}\n",
                a.token,
                a.degree_bucket,
                a.radius_reached,
                tags.join(",")
            ));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.nodes[e.head].token, self.relations[e.rel].shown, self.nodes[e.tail].token
            ));
        }
        out
    }
}

/// Pseudonymizes the raw subgraph into an (unsanitized) view.
pub fn build_view(
    graph: &KnowledgeGraph,
    sub: &RawSubgraph,
    mapping: &SessionMapping,
    policy: &PrivacyPolicy,
) -> Result<AnonymizedView, AnonymizeError> {
    let mut nodes = Vec::new();
    let mut node_of_entity: HashMap<EntityId, usize> = HashMap::new();
    let mut node_of_literal: HashMap<LiteralId, usize> = HashMap::new();
    for &e in &sub.entities {
        let token = mapping
            .token(RawKey::Entity(e))
            .expect("mapped entity")
            .to_string();
        let type_tags = if policy.expose_type_tags {
            graph.entity(e).expect("entity resolves").type_tags.clone()
        } else {
            BTreeSet::new()
        };
        node_of_entity.insert(e, nodes.len());
        nodes.push(ViewNode {
            token,
            kind: ViewNodeKind::Entity { raw: e },
            type_tags,
        });
    }
    let mut relations = Vec::new();
    let mut rel_of: HashMap<RelationId, usize> = HashMap::new();
    let mut edges = Vec::new();
    for &tid in &sub.triples {
        let t = graph.triple(tid).expect("subgraph triple resolves");
        let rel_idx = *rel_of.entry(t.relation).or_insert_with(|| {
            let raw_label = graph.relation_label(t.relation).to_string();
            let shown = match policy.relation_mode {
                _ if policy.anonymization_ratio == 0.0 => raw_label.clone(),
                RelationMode::Utility => raw_label.clone(),
                RelationMode::Privacy => mapping
                    .token(RawKey::Relation(t.relation))
                    .expect("mapped relation")
                    .to_string(),
            };
            relations.push(ViewRelation {
                raw: t.relation,
                shown,
                cluster_hint: graph
                    .relation(t.relation)
                    .and_then(|r| r.cluster_label.clone()),
            });
            relations.len() - 1
        });
        let head = node_of_entity[&t.head];
        let tail = match t.tail {
            TailRef::Entity(e) => node_of_entity[&e],
            TailRef::Literal(l) => *node_of_literal.entry(l).or_insert_with(|| {
                let lit = graph.literal(l).expect("literal resolves");
                let token = match lit.kind {
                    LiteralKind::Str => mapping
                        .token(RawKey::StrLiteral(l))
                        .expect("mapped literal")
                        .to_string(),
                    _ => coarsen_literal(lit, policy)
                        .map(|c| c.raw)
                        .unwrap_or_else(|_| "lit_invalid".to_string()),
                };
                nodes.push(ViewNode {
                    token,
                    kind: ViewNodeKind::Literal { raw: l },
                    type_tags: BTreeSet::new(),
                });
                nodes.len() - 1
            }),
        };
        edges.push(ViewEdge {
            head,
            rel: rel_idx,
            tail,
        });
    }
    let anchors = sub
        .anchors
        .iter()
        .map(|a| node_of_entity[a])
        .collect::<Vec<_>>();
    Ok(assemble(
        nodes,
        relations,
        edges,
        anchors,
        sub.entity_count(),
    ))
}

fn assemble(
    nodes: Vec<ViewNode>,
    relations: Vec<ViewRelation>,
    mut edges: Vec<ViewEdge>,
    anchors: Vec<usize>,
    entities_before: usize,
) -> AnonymizedView {
    edges.sort_by_key(|e| (e.head, e.rel, e.tail));
    edges.dedup();
    let mut incidence = vec![Vec::new(); nodes.len()];
    for (i, e) in edges.iter().enumerate() {
        incidence[e.head].push(i);
        if e.tail != e.head {
            incidence[e.tail].push(i);
        }
    }
    let token_index = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.token.clone(), i))
        .collect();
    let entities_after = nodes.iter().filter(|n| !n.is_literal()).count();
    AnonymizedView {
        nodes,
        relations,
        edges,
        incidence,
        anchors,
        token_index,
        sketch: StructureSketch::default(),
        entities_before,
        entities_after,
    }
}

/// Structural de-uniqueness: supernode clustering, budget pruning and the
/// structure sketch. Anchors are never merged or pruned.
pub fn sanitize_structure(
    view: AnonymizedView,
    policy: &PrivacyPolicy,
) -> Result<AnonymizedView, AnonymizeError> {
    let anchor_set: BTreeSet<usize> = view.anchors.iter().copied().collect();
    if policy.node_budget < view.anchors.len() {
        return Err(AnonymizeError::BudgetInfeasible {
            need: view.anchors.len(),
            budget: policy.node_budget,
        });
    }
    let mut nodes: Vec<Option<ViewNode>> = view.nodes.into_iter().map(Some).collect();
    let mut edges: Vec<ViewEdge> = view.edges;

    // Clustering: non-anchor entities sharing (type tags, incident relation
    // multiset) merge into one supernode; parallel duplicates collapse.
    type ClusterKey = (Vec<String>, Vec<(RelationId, bool)>);
    let mut key_of: BTreeMap<ClusterKey, Vec<usize>> = BTreeMap::new();
    for (idx, node) in nodes.iter().enumerate() {
        let node = node.as_ref().unwrap();
        if node.is_literal() || anchor_set.contains(&idx) {
            continue;
        }
        let mut incident: Vec<(RelationId, bool)> = edges
            .iter()
            .flat_map(|e| {
                let rel = view.relations[e.rel].raw;
                let mut refs = Vec::new();
                if e.head == idx {
                    refs.push((rel, true));
                }
                if e.tail == idx {
                    refs.push((rel, false));
                }
                refs
            })
            .collect();
        incident.sort();
        let tags: Vec<String> = node.type_tags.iter().cloned().collect();
        key_of.entry((tags, incident)).or_default().push(idx);
    }
    let mut replacement: HashMap<usize, usize> = HashMap::new();
    for ((tags, _), class) in key_of {
        if class.len() < policy.cluster_min_size {
            continue;
        }
        let mut members: Vec<EntityId> = class
            .iter()
            .flat_map(|&idx| nodes[idx].as_ref().unwrap().raw_members())
            .collect();
        members.sort();
        let mut tokens: Vec<String> = class
            .iter()
            .map(|&idx| nodes[idx].as_ref().unwrap().token.clone())
            .collect();
        tokens.sort();
        let mut hasher = Sha256::new();
        for t in &tokens {
            hasher.update(t.as_bytes());
        }
        let super_token = format!("sup_{}", &hex::encode(hasher.finalize())[..8]);
        let super_idx = nodes.len();
        nodes.push(Some(ViewNode {
            token: super_token,
            kind: ViewNodeKind::Supernode { members },
            type_tags: tags.into_iter().collect(),
        }));
        for idx in class {
            replacement.insert(idx, super_idx);
            nodes[idx] = None;
        }
    }
    for e in &mut edges {
        if let Some(&r) = replacement.get(&e.head) {
            e.head = r;
        }
        if let Some(&r) = replacement.get(&e.tail) {
            e.tail = r;
        }
    }
    edges.sort_by_key(|e| (e.head, e.rel, e.tail));
    edges.dedup();

    // Budget pruning: repeatedly drop the fringe non-anchor node farthest
    // from any anchor, never disconnecting anchors from each other.
    loop {
        let entity_count = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.as_ref().is_some_and(|n| !n.is_literal()))
            .count();
        if entity_count <= policy.node_budget {
            break;
        }
        let degree: HashMap<usize, usize> = live_degrees(&nodes, &edges);
        let dist = anchor_distances(&nodes, &edges, &anchor_set);
        let mut candidates: Vec<(usize, usize, EntityId)> = nodes
            .iter()
            .enumerate()
            .filter_map(|(idx, n)| {
                let n = n.as_ref()?;
                if n.is_literal() || anchor_set.contains(&idx) {
                    return None;
                }
                if degree.get(&idx).copied().unwrap_or(0) > 1 {
                    return None;
                }
                let d = dist.get(&idx).copied().unwrap_or(usize::MAX);
                let raw_min = n.raw_members().into_iter().min().unwrap_or(EntityId(u32::MAX));
                Some((idx, d, raw_min))
            })
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let victim = match candidates.first() {
            Some(&(idx, _, _)) => idx,
            // No fringe node left; drop an interior non-anchor only if the
            // anchors stay mutually connected without it.
            None => match interior_victim(&nodes, &edges, &anchor_set, &dist) {
                Some(idx) => idx,
                None => {
                    return Err(AnonymizeError::BudgetInfeasible {
                        need: entity_count,
                        budget: policy.node_budget,
                    })
                }
            },
        };
        nodes[victim] = None;
        edges.retain(|e| nodes[e.head].is_some() && nodes[e.tail].is_some());
        // Literal values dangling off pruned entities go with them.
        let referenced: BTreeSet<usize> = edges.iter().flat_map(|e| [e.head, e.tail]).collect();
        for (idx, node) in nodes.iter_mut().enumerate() {
            if node.as_ref().is_some_and(|n| n.is_literal()) && !referenced.contains(&idx) {
                *node = None;
            }
        }
    }

    // Compact and rebuild.
    let mut remap: HashMap<usize, usize> = HashMap::new();
    let mut compact_nodes = Vec::new();
    for (idx, node) in nodes.into_iter().enumerate() {
        if let Some(node) = node {
            remap.insert(idx, compact_nodes.len());
            compact_nodes.push(node);
        }
    }
    let compact_edges: Vec<ViewEdge> = edges
        .into_iter()
        .map(|e| ViewEdge {
            head: remap[&e.head],
            rel: e.rel,
            tail: remap[&e.tail],
        })
        .collect();
    let anchors: Vec<usize> = view.anchors.iter().map(|a| remap[a]).collect();
    let mut sanitized = assemble(
        compact_nodes,
        view.relations,
        compact_edges,
        anchors,
        view.entities_before,
    );
    sanitized.sketch = build_sketch(&sanitized);
    Ok(sanitized)
}

fn live_degrees(nodes: &[Option<ViewNode>], edges: &[ViewEdge]) -> HashMap<usize, usize> {
    let mut degree: HashMap<usize, usize> = HashMap::new();
    for e in edges {
        if nodes[e.head].is_some() && nodes[e.tail].is_some() {
            *degree.entry(e.head).or_default() += 1;
            if e.tail != e.head {
                *degree.entry(e.tail).or_default() += 1;
            }
        }
    }
    degree
}

fn anchor_distances(
    nodes: &[Option<ViewNode>],
    edges: &[ViewEdge],
    anchors: &BTreeSet<usize>,
) -> HashMap<usize, usize> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in edges {
        if nodes[e.head].is_some() && nodes[e.tail].is_some() {
            adj.entry(e.head).or_default().push(e.tail);
            adj.entry(e.tail).or_default().push(e.head);
        }
    }
    let mut dist: HashMap<usize, usize> = anchors.iter().map(|&a| (a, 0)).collect();
    let mut queue: std::collections::VecDeque<usize> = anchors.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        let d = dist[&n];
        for &m in adj.get(&n).into_iter().flatten() {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(m) {
                e.insert(d + 1);
                queue.push_back(m);
            }
        }
    }
    dist
}

fn interior_victim(
    nodes: &[Option<ViewNode>],
    edges: &[ViewEdge],
    anchors: &BTreeSet<usize>,
    dist: &HashMap<usize, usize>,
) -> Option<usize> {
    let mut candidates: Vec<(usize, usize, EntityId)> = nodes
        .iter()
        .enumerate()
        .filter_map(|(idx, n)| {
            let n = n.as_ref()?;
            if n.is_literal() || anchors.contains(&idx) {
                return None;
            }
            let d = dist.get(&idx).copied().unwrap_or(usize::MAX);
            let raw_min = n.raw_members().into_iter().min().unwrap_or(EntityId(u32::MAX));
            Some((idx, d, raw_min))
        })
        .collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    candidates
        .into_iter()
        .find(|&(idx, _, _)| anchors_stay_connected(nodes, edges, anchors, idx))
        .map(|(idx, _, _)| idx)
}

fn anchors_stay_connected(
    nodes: &[Option<ViewNode>],
    edges: &[ViewEdge],
    anchors: &BTreeSet<usize>,
    removed: usize,
) -> bool {
    let Some(&first) = anchors.iter().next() else {
        return true;
    };
    // Connectivity among anchors that were reachable from `first` before
    // the removal must be preserved.
    let reach = |skip: Option<usize>| -> BTreeSet<usize> {
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for e in edges {
            if nodes[e.head].is_some()
                && nodes[e.tail].is_some()
                && Some(e.head) != skip
                && Some(e.tail) != skip
            {
                adj.entry(e.head).or_default().push(e.tail);
                adj.entry(e.tail).or_default().push(e.head);
            }
        }
        let mut seen = BTreeSet::from([first]);
        let mut queue = std::collections::VecDeque::from([first]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen
    };
    let before: BTreeSet<usize> = reach(None).intersection(anchors).copied().collect();
    let after: BTreeSet<usize> = reach(Some(removed)).intersection(anchors).copied().collect();
    before == after
}

fn build_sketch(view: &AnonymizedView) -> StructureSketch {
    let anchors = view
        .anchors
        .iter()
        .map(|&a| {
            let degree = view.incident(a).len();
            let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
            for &eidx in view.incident(a) {
                let e = view.edge(eidx);
                let other = if e.head == a { e.tail } else { e.head };
                for tag in &view.node(other).type_tags {
                    *histogram.entry(tag.clone()).or_default() += 1;
                }
            }
            AnchorSketch {
                token: view.node(a).token.clone(),
                degree_bucket: degree_bucket(degree),
                type_tag_histogram: histogram,
                radius_reached: radius_from(view, a),
            }
        })
        .collect();
    StructureSketch {
        anchors,
        entity_count: view.entity_node_count(),
        triple_count: view.triple_count(),
    }
}

fn degree_bucket(degree: usize) -> String {
    match degree {
        0 => "=0".to_string(),
        1 => "=1".to_string(),
        _ => format!("<={}", degree.next_power_of_two()),
    }
}

fn radius_from(view: &AnonymizedView, start: usize) -> usize {
    let mut dist = HashMap::from([(start, 0usize)]);
    let mut queue = std::collections::VecDeque::from([start]);
    let mut max = 0;
    while let Some(n) = queue.pop_front() {
        let d = dist[&n];
        max = max.max(d);
        for &eidx in view.incident(n) {
            let e = view.edge(eidx);
            let other = if e.head == n { e.tail } else { e.head };
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(other) {
                e.insert(d + 1);
                queue.push_back(other);
            }
        }
    }
    max
}

/// One concrete raw expansion of an anonymized path: parent-graph triples
/// in walk order with their traversal direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPathExpansion {
    pub steps: Vec<(crate::kg::TripleId, bool)>,
}

/// Restores the raw counterpart of a single token. Supernodes expand to
/// their member entities. Unknown tokens signal a hallucinated identifier.
pub fn deanonymize_token(
    token: &str,
    mapping: &SessionMapping,
    view: &AnonymizedView,
    graph: &KnowledgeGraph,
) -> Result<Vec<String>, AnonymizeError> {
    if let Some(idx) = view.node_by_token(token) {
        let node = view.node(idx);
        match &node.kind {
            ViewNodeKind::Supernode { members } => {
                return Ok(members
                    .iter()
                    .map(|&m| graph.entity_label(m).to_string())
                    .collect())
            }
            ViewNodeKind::Literal { raw } => {
                return Ok(vec![graph.literal(*raw).expect("literal resolves").raw.clone()])
            }
            ViewNodeKind::Entity { .. } => {}
        }
    }
    match mapping.resolve(token) {
        Some(RawKey::Entity(e)) => Ok(vec![graph.entity_label(e).to_string()]),
        Some(RawKey::Relation(r)) => Ok(vec![graph.relation_label(r).to_string()]),
        Some(RawKey::StrLiteral(l)) => {
            Ok(vec![graph.literal(l).expect("literal resolves").raw.clone()])
        }
        None => Err(AnonymizeError::UnknownToken(token.to_string())),
    }
}

/// Expands an anonymized walk (view node sequence plus edges) into the raw
/// paths it represents. Paths through supernodes multiply into one path per
/// member combination that exists in the raw subgraph.
pub fn deanonymize_walk(
    node_seq: &[usize],
    edge_seq: &[usize],
    view: &AnonymizedView,
    graph: &KnowledgeGraph,
    sub: &RawSubgraph,
) -> Vec<RawPathExpansion> {
    debug_assert_eq!(node_seq.len(), edge_seq.len() + 1);
    // Raw triple lookup keyed by oriented (entity, relation, entity/literal).
    let mut raw_index: HashMap<(EntityId, RelationId, TailRef), crate::kg::TripleId> =
        HashMap::new();
    for &tid in &sub.triples {
        let t = graph.triple(tid).expect("subgraph triple resolves");
        raw_index.insert((t.head, t.relation, t.tail), tid);
    }
    enum Cand {
        Entities(Vec<EntityId>),
        Literal(LiteralId),
    }
    let candidates: Vec<Cand> = node_seq
        .iter()
        .map(|&n| match &view.node(n).kind {
            ViewNodeKind::Entity { raw } => Cand::Entities(vec![*raw]),
            ViewNodeKind::Supernode { members } => Cand::Entities(members.clone()),
            ViewNodeKind::Literal { raw } => Cand::Literal(*raw),
        })
        .collect();
    let mut results = Vec::new();
    let mut assignment: Vec<Option<EntityId>> = vec![None; node_seq.len()];

    fn options(c: &Cand) -> Vec<Option<EntityId>> {
        match c {
            Cand::Entities(es) => es.iter().copied().map(Some).collect(),
            Cand::Literal(_) => vec![None],
        }
    }

    fn step_exists(
        raw_index: &HashMap<(EntityId, RelationId, TailRef), crate::kg::TripleId>,
        rel: RelationId,
        from: Option<EntityId>,
        to: Option<EntityId>,
        to_cand: &Cand,
        forward: bool,
    ) -> Option<(crate::kg::TripleId, bool)> {
        let tail_of = |e: Option<EntityId>, c: &Cand| match (e, c) {
            (Some(e), _) => Some(TailRef::Entity(e)),
            (None, Cand::Literal(l)) => Some(TailRef::Literal(*l)),
            _ => None,
        };
        if forward {
            let head = from?;
            let tail = tail_of(to, to_cand)?;
            raw_index.get(&(head, rel, tail)).map(|&t| (t, true))
        } else {
            let head = to?;
            let tail = tail_of(from, to_cand)?;
            // `from` may itself be a literal only in forward direction.
            let tail = match from {
                Some(e) => TailRef::Entity(e),
                None => tail,
            };
            raw_index.get(&(head, rel, tail)).map(|&t| (t, false))
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        pos: usize,
        node_seq: &[usize],
        edge_seq: &[usize],
        view: &AnonymizedView,
        candidates: &[Cand],
        raw_index: &HashMap<(EntityId, RelationId, TailRef), crate::kg::TripleId>,
        assignment: &mut Vec<Option<EntityId>>,
        steps: &mut Vec<(crate::kg::TripleId, bool)>,
        results: &mut Vec<RawPathExpansion>,
    ) {
        if pos == node_seq.len() {
            results.push(RawPathExpansion { steps: steps.clone() });
            return;
        }
        for option in options(&candidates[pos]) {
            assignment[pos] = option;
            if pos == 0 {
                recurse(
                    pos + 1, node_seq, edge_seq, view, candidates, raw_index, assignment, steps,
                    results,
                );
                continue;
            }
            let eidx = edge_seq[pos - 1];
            let edge = view.edge(eidx);
            let rel = view.relation(edge.rel).raw;
            let forward = edge.head == node_seq[pos - 1];
            if let Some(step) = step_exists(
                raw_index,
                rel,
                assignment[pos - 1],
                option,
                &candidates[pos],
                forward,
            ) {
                steps.push(step);
                recurse(
                    pos + 1, node_seq, edge_seq, view, candidates, raw_index, assignment, steps,
                    results,
                );
                steps.pop();
            }
        }
        assignment[pos] = None;
    }

    let mut steps = Vec::new();
    recurse(
        0,
        node_seq,
        edge_seq,
        view,
        &candidates,
        &raw_index,
        &mut assignment,
        &mut steps,
        &mut results,
    );
    results
}

/// Replaces every mapped raw label occurring in `text` (word-bounded,
/// longest first) with its session token.
pub fn anonymize_text(
    text: &str,
    graph: &KnowledgeGraph,
    sub: &RawSubgraph,
    mapping: &SessionMapping,
) -> String {
    let mut pairs: Vec<(String, String)> = sub
        .entities
        .iter()
        .filter(|e| !mapping.plaintext_entities().contains(e))
        .filter_map(|&e| {
            let token = mapping.token(RawKey::Entity(e))?;
            Some((graph.entity_label(e).to_string(), token.to_string()))
        })
        .collect();
    pairs.sort_by_key(|(label, _)| std::cmp::Reverse(label.len()));
    let mut out = text.to_string();
    for (label, token) in pairs {
        out = replace_word_bounded(&out, &label, &token);
    }
    out
}

fn replace_word_bounded(text: &str, needle: &str, replacement: &str) -> String {
    let lowered = text.to_lowercase();
    let needle_lower = needle.to_lowercase();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    while let Some(pos) = lowered[cursor..].find(&needle_lower) {
        let start = cursor + pos;
        let end = start + needle_lower.len();
        let left_ok = start == 0
            || !lowered[..start]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        let right_ok = end == lowered.len()
            || !lowered[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
        out.push_str(&text[cursor..start]);
        if left_ok && right_ok {
            out.push_str(replacement);
        } else {
            out.push_str(&text[start..end]);
        }
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Replaces every session token occurring in `text` with its raw label.
/// Supernode tokens expand to a slash-joined member list.
pub fn deanonymize_text(
    text: &str,
    mapping: &SessionMapping,
    view: &AnonymizedView,
    graph: &KnowledgeGraph,
) -> String {
    let mut out = text.to_string();
    for node in view.nodes() {
        if !out.contains(&node.token) {
            continue;
        }
        let replacement = match &node.kind {
            ViewNodeKind::Entity { raw } => graph.entity_label(*raw).to_string(),
            ViewNodeKind::Supernode { members } => members
                .iter()
                .map(|&m| graph.entity_label(m))
                .collect::<Vec<_>>()
                .join(" / "),
            ViewNodeKind::Literal { raw } => {
                graph.literal(*raw).expect("literal resolves").raw.clone()
            }
        };
        out = out.replace(&node.token, &replacement);
    }
    // Tokens outside the view (relations, unsampled entities) still resolve
    // through the inverse map.
    let tokens: Vec<String> = out
        .split_whitespace()
        .filter(|w| w.starts_with("ent_") || w.starts_with("rel_"))
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '_').to_string())
        .collect();
    for token in tokens {
        if let Some(key) = mapping.resolve(&token) {
            let label = match key {
                RawKey::Entity(e) => graph.entity_label(e).to_string(),
                RawKey::Relation(r) => graph.relation_label(r).to_string(),
                RawKey::StrLiteral(l) => graph.literal(l).expect("literal resolves").raw.clone(),
            };
            out = out.replace(&token, &label);
        }
    }
    out
}

/// Builds the session raw-label dictionary for the outbound boundary scan:
/// every hidden entity label, relation labels when relations are private,
/// and uncoarsened literal values.
pub fn session_dictionary(
    graph: &KnowledgeGraph,
    sub: &RawSubgraph,
    mapping: &SessionMapping,
    policy: &PrivacyPolicy,
) -> RawDictionary {
    let mut dict = RawDictionary::default();
    if policy.anonymization_ratio == 0.0 {
        return dict;
    }
    for &e in &sub.entities {
        if !mapping.plaintext_entities().contains(&e) {
            dict.insert(graph.entity_label(e).to_string());
        }
    }
    for &tid in &sub.triples {
        let t = graph.triple(tid).expect("subgraph triple resolves");
        if policy.relation_mode == RelationMode::Privacy {
            dict.insert(graph.relation_label(t.relation).to_string());
        }
        if let TailRef::Literal(l) = t.tail {
            let lit = graph.literal(l).expect("literal resolves");
            let hidden = match lit.kind {
                LiteralKind::Str => true,
                _ => coarsen_literal(lit, policy).map(|c| c.raw != lit.raw).unwrap_or(true),
            };
            if hidden {
                dict.insert(lit.raw.clone());
            }
        }
    }
    dict
}
