//! Entity graphs: one node per mention of a candidate or of the query
//! subject, connected by four typed relations.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize_phrase, normalize_token, Sample, TokenizeFn};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("sample {0} has no mentions: empty graph")]
    Empty(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed graph or chain json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("graph dump is inconsistent: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKey {
    Candidate(usize),
    Subject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MentionSource {
    Exact,
    Coref,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub doc: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub entity: EntityKey,
    pub source: MentionSource,
}

impl Mention {
    fn overlaps(&self, doc: usize, start: usize, end: usize) -> bool {
        self.doc == doc && self.start < end && start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    #[serde(rename = "DOC-BASED")]
    DocBased,
    #[serde(rename = "MATCH")]
    Match,
    #[serde(rename = "COREF")]
    Coref,
    #[serde(rename = "COMPLEMENT")]
    Complement,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::DocBased,
        RelationType::Match,
        RelationType::Coref,
        RelationType::Complement,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::DocBased => "DOC-BASED",
            RelationType::Match => "MATCH",
            RelationType::Coref => "COREF",
            RelationType::Complement => "COMPLEMENT",
        }
    }
}

/// Set of relation types on one node pair, as a bitmask over
/// [`RelationType::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RelationSet(u8);

impl RelationSet {
    pub fn insert(&mut self, r: RelationType) {
        self.0 |= 1 << r.index();
    }

    pub fn contains(self, r: RelationType) -> bool {
        self.0 & (1 << r.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = RelationType> {
        RelationType::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

/// Coreference chains of one sample: per document, a list of chains, each a
/// list of `[start, end)` token spans.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorefChains {
    pub documents: Vec<Vec<Vec<[usize; 2]>>>,
}

/// Chains of a whole dataset, keyed by sample id.
pub type CorefSidecar = HashMap<String, CorefChains>;

pub fn load_coref_sidecar(path: &Path) -> Result<CorefSidecar> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Mentions after coreference merging, plus the node members of every
/// accepted chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionSet {
    pub mentions: Vec<Mention>,
    pub chains: Vec<Vec<usize>>,
}

impl MentionSet {
    pub fn exact_only(mentions: Vec<Mention>) -> Self {
        Self {
            mentions,
            chains: Vec::new(),
        }
    }
}

fn entity_phrases(sample: &Sample, tokenizer: TokenizeFn) -> Vec<(EntityKey, Vec<String>)> {
    let mut keys: Vec<(EntityKey, Vec<String>)> = sample
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (EntityKey::Candidate(i), normalize_phrase(c, tokenizer)))
        .collect();
    let subject = normalize_phrase(&sample.query.subject, tokenizer);
    if !subject.is_empty() && keys.iter().all(|(_, k)| *k != subject) {
        keys.push((EntityKey::Subject, subject));
    }
    keys.retain(|(_, k)| !k.is_empty());
    keys
}

/// Every non-overlapping span whose normalized tokens equal a normalized
/// candidate or query subject. Longer matches claim their tokens first; ties
/// go to the earlier span. Output is ordered by document then position.
pub fn find_exact_mentions(sample: &Sample, tokenizer: TokenizeFn) -> Vec<Mention> {
    let keys = entity_phrases(sample, tokenizer);
    let mut out = Vec::new();
    for (doc, tokens) in sample.documents.iter().enumerate() {
        let norm: Vec<String> = tokens.iter().map(|t| normalize_token(t)).collect();
        let content: Vec<usize> = (0..norm.len()).filter(|&i| !norm[i].is_empty()).collect();
        // (normalized length, start, end, key)
        let mut found: Vec<(usize, usize, usize, EntityKey)> = Vec::new();
        for p in 0..content.len() {
            for (key, phrase) in &keys {
                let k = phrase.len();
                if p + k <= content.len() && content[p..p + k].iter().zip(phrase).all(|(&i, w)| norm[i] == *w) {
                    found.push((k, content[p], content[p + k - 1] + 1, *key));
                }
            }
        }
        found.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut taken = vec![false; tokens.len()];
        let mut doc_mentions = Vec::new();
        for (_, start, end, entity) in found {
            if taken[start..end].iter().any(|&t| t) {
                continue;
            }
            taken[start..end].iter_mut().for_each(|t| *t = true);
            doc_mentions.push(Mention {
                doc,
                start,
                end,
                entity,
                source: MentionSource::Exact,
            });
        }
        doc_mentions.sort_by_key(|m| m.start);
        out.extend(doc_mentions);
    }
    out
}

/// Adds coreference mentions. A chain whose spans overlap exact mentions of
/// exactly one entity contributes its remaining spans as mentions of that
/// entity; chains touching two or more entities are discarded, chains touching
/// none are ignored. A proposed span that overlaps a span proposed by another
/// chain is dropped as ambiguous. Chains with out-of-bounds spans are rejected.
pub fn merge_coref(sample: &Sample, exact: Vec<Mention>, chains: Option<&CorefChains>) -> MentionSet {
    let Some(chains) = chains else {
        return MentionSet::exact_only(exact);
    };
    // (doc, start, end, key, chain id)
    let mut proposals: Vec<(usize, usize, usize, EntityKey, usize)> = Vec::new();
    // chain id -> exact mention indices
    let mut accepted: Vec<Vec<usize>> = Vec::new();
    for (doc, doc_chains) in chains.documents.iter().enumerate() {
        let Some(tokens) = sample.documents.get(doc) else {
            if !doc_chains.is_empty() {
                log::warn!("sample {}: chains for missing document {doc} rejected", sample.id);
            }
            continue;
        };
        for chain in doc_chains {
            if chain.iter().any(|&[s, e]| s >= e || e > tokens.len()) {
                log::warn!("sample {}: chain with out-of-bounds span in document {doc} rejected", sample.id);
                continue;
            }
            let touched: Vec<usize> = (0..exact.len())
                .filter(|&m| chain.iter().any(|&[s, e]| exact[m].overlaps(doc, s, e)))
                .collect();
            let keys: HashSet<EntityKey> = touched.iter().map(|&m| exact[m].entity).collect();
            if keys.len() != 1 {
                continue;
            }
            let key = *keys.iter().next().expect("one key");
            let id = accepted.len();
            accepted.push(touched);
            for &[s, e] in chain {
                let free = !exact.iter().any(|m| m.overlaps(doc, s, e));
                let dup = proposals.iter().any(|p| p.4 == id && p.0 == doc && p.1 == s && p.2 == e);
                if free && !dup {
                    proposals.push((doc, s, e, key, id));
                }
            }
        }
    }
    let ambiguous: Vec<bool> = proposals
        .iter()
        .map(|a| {
            proposals
                .iter()
                .any(|b| b.4 != a.4 && a.0 == b.0 && a.1 < b.2 && b.1 < a.2)
        })
        .collect();

    // Final node order: by document, then span.
    let mut tagged: Vec<(Mention, Option<usize>, Option<usize>)> =
        exact.iter().enumerate().map(|(i, m)| (*m, Some(i), None)).collect();
    for (p, amb) in proposals.iter().zip(&ambiguous) {
        if !amb {
            tagged.push((
                Mention {
                    doc: p.0,
                    start: p.1,
                    end: p.2,
                    entity: p.3,
                    source: MentionSource::Coref,
                },
                None,
                Some(p.4),
            ));
        }
    }
    tagged.sort_by_key(|(m, _, _)| (m.doc, m.start, m.end));
    let mut exact_to_node = vec![0; exact.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); accepted.len()];
    for (node, (_, ex, chain)) in tagged.iter().enumerate() {
        if let Some(e) = ex {
            exact_to_node[*e] = node;
        }
        if let Some(c) = chain {
            members[*c].push(node);
        }
    }
    for (c, touched) in accepted.iter().enumerate() {
        members[c].extend(touched.iter().map(|&e| exact_to_node[e]));
        members[c].sort_unstable();
        members[c].dedup();
    }
    MentionSet {
        mentions: tagged.into_iter().map(|(m, _, _)| m).collect(),
        chains: members,
    }
}

/// Which relations survive into the graph. Dropped heuristic relations are
/// removed before the complement is taken, so the complement grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationFilter {
    pub doc_based: bool,
    pub matching: bool,
    pub coref: bool,
    pub complement: bool,
}

impl Default for RelationFilter {
    fn default() -> Self {
        Self {
            doc_based: true,
            matching: true,
            coref: true,
            complement: true,
        }
    }
}

impl RelationFilter {
    pub fn keeps(&self, r: RelationType) -> bool {
        match r {
            RelationType::DocBased => self.doc_based,
            RelationType::Match => self.matching,
            RelationType::Coref => self.coref,
            RelationType::Complement => self.complement,
        }
    }

    pub fn without(mut self, r: RelationType) -> Self {
        match r {
            RelationType::DocBased => self.doc_based = false,
            RelationType::Match => self.matching = false,
            RelationType::Coref => self.coref = false,
            RelationType::Complement => self.complement = false,
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Above this node count the complement is never materialized.
    pub complement_threshold: usize,
    /// Masked datasets carry no coreference information.
    pub masked: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            complement_threshold: 500,
            masked: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ComplementEdges {
    Materialized(Vec<(usize, usize)>),
    /// Every pair absent from the heuristic relations, computed on demand.
    Implicit,
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityGraph {
    pub sample_id: String,
    pub nodes: Vec<Mention>,
    /// DOC-BASED, MATCH and COREF pairs `(i, j)` with `i < j`, sorted.
    heuristic: [Vec<(usize, usize)>; 3],
    complement: ComplementEdges,
    /// `M_c`: node indices mentioning each candidate.
    pub candidate_mentions: Vec<Vec<usize>>,
}

fn pair(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

/// Applies the three heuristic rules to every node pair and takes the
/// complement of their union.
pub fn build_edges(
    sample: &Sample,
    set: &MentionSet,
    options: &GraphOptions,
) -> Result<EntityGraph> {
    let nodes = &set.mentions;
    if nodes.is_empty() {
        return Err(GraphError::Empty(sample.id.clone()));
    }
    let surface: Vec<Vec<String>> = nodes
        .iter()
        .map(|m| {
            sample.documents[m.doc][m.start..m.end]
                .iter()
                .map(|t| normalize_token(t))
                .filter(|t| !t.is_empty())
                .collect()
        })
        .collect();
    let n = nodes.len();
    let mut doc = Vec::new();
    let mut matching = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if nodes[i].doc == nodes[j].doc {
                doc.push((i, j));
            }
            if nodes[i].source == MentionSource::Exact
                && nodes[j].source == MentionSource::Exact
                && surface[i] == surface[j]
            {
                matching.push((i, j));
            }
        }
    }
    let mut coref: Vec<(usize, usize)> = Vec::new();
    if !options.masked {
        for chain in &set.chains {
            for (a, &i) in chain.iter().enumerate() {
                for &j in &chain[a + 1..] {
                    if i != j {
                        coref.push(pair(i, j));
                    }
                }
            }
        }
    }
    coref.sort_unstable();
    coref.dedup();

    let mut candidate_mentions = vec![Vec::new(); sample.candidates.len()];
    for (i, m) in nodes.iter().enumerate() {
        if let EntityKey::Candidate(c) = m.entity {
            candidate_mentions[c].push(i);
        }
    }
    let mut graph = EntityGraph {
        sample_id: sample.id.clone(),
        nodes: nodes.clone(),
        heuristic: [doc, matching, coref],
        complement: ComplementEdges::Implicit,
        candidate_mentions,
    };
    graph.settle_complement(options.complement_threshold);
    Ok(graph)
}

/// Exact mentions, coreference merge and edge construction in one call.
pub fn build_graph(
    sample: &Sample,
    chains: Option<&CorefChains>,
    options: &GraphOptions,
    tokenizer: TokenizeFn,
) -> Result<EntityGraph> {
    let exact = find_exact_mentions(sample, tokenizer);
    let chains = if options.masked { None } else { chains };
    let set = merge_coref(sample, exact, chains);
    build_edges(sample, &set, options)
}

impl EntityGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn candidate_count(&self) -> usize {
        self.candidate_mentions.len()
    }

    fn settle_complement(&mut self, threshold: usize) {
        self.complement = if self.nodes.len() > threshold {
            ComplementEdges::Implicit
        } else {
            ComplementEdges::Materialized(self.implicit_complement())
        };
    }

    pub fn complement_mode(&self) -> &ComplementEdges {
        &self.complement
    }

    fn implicit_complement(&self) -> Vec<(usize, usize)> {
        let n = self.nodes.len();
        let linked: HashSet<(usize, usize)> = self.heuristic.iter().flatten().copied().collect();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if !linked.contains(&(i, j)) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Edge list of one relation (materializing an implicit complement).
    pub fn edges(&self, r: RelationType) -> Vec<(usize, usize)> {
        match r {
            RelationType::Complement => match &self.complement {
                ComplementEdges::Materialized(e) => e.clone(),
                ComplementEdges::Implicit => self.implicit_complement(),
                ComplementEdges::Dropped => Vec::new(),
            },
            other => self.heuristic[other.index()].clone(),
        }
    }

    pub fn edge_count(&self, r: RelationType) -> usize {
        match r {
            RelationType::Complement => match &self.complement {
                ComplementEdges::Materialized(e) => e.len(),
                ComplementEdges::Implicit => {
                    let n = self.nodes.len();
                    let linked: HashSet<(usize, usize)> = self.heuristic.iter().flatten().copied().collect();
                    n * (n.saturating_sub(1)) / 2 - linked.len()
                }
                ComplementEdges::Dropped => 0,
            },
            other => self.heuristic[other.index()].len(),
        }
    }

    /// A copy restricted to the relations `filter` keeps, with the complement
    /// recomputed against what remains.
    pub fn filtered(&self, filter: RelationFilter, complement_threshold: usize) -> EntityGraph {
        let mut g = self.clone();
        for r in [RelationType::DocBased, RelationType::Match, RelationType::Coref] {
            if !filter.keeps(r) {
                g.heuristic[r.index()].clear();
            }
        }
        if filter.complement {
            g.settle_complement(complement_threshold);
        } else {
            g.complement = ComplementEdges::Dropped;
        }
        g
    }

    /// Per node, the heuristic neighbours with the relations on each pair,
    /// sorted by neighbour index. The complement is not included.
    pub fn heuristic_neighbours(&self) -> Vec<Vec<(usize, RelationSet)>> {
        let n = self.nodes.len();
        let mut maps: Vec<BTreeMap<usize, RelationSet>> = vec![BTreeMap::new(); n];
        for r in [RelationType::DocBased, RelationType::Match, RelationType::Coref] {
            for &(i, j) in &self.heuristic[r.index()] {
                maps[i].entry(j).or_default().insert(r);
                maps[j].entry(i).or_default().insert(r);
            }
        }
        maps.into_iter().map(|m| m.into_iter().collect()).collect()
    }

    /// Per node, every neighbour and the relations on the pair, including
    /// complement pairs however they are stored.
    pub fn neighbours(&self) -> Vec<Vec<(usize, RelationSet)>> {
        let mut nb = self.heuristic_neighbours();
        if matches!(self.complement, ComplementEdges::Dropped) {
            return nb;
        }
        let mut set = RelationSet::default();
        set.insert(RelationType::Complement);
        for &(i, j) in &self.edges(RelationType::Complement) {
            nb[i].push((j, set));
            nb[j].push((i, set));
        }
        for list in &mut nb {
            list.sort_by_key(|(j, _)| *j);
        }
        nb
    }

    /// The same graph with all edges replaced by a single complete relation
    /// (stored as DOC-BASED), used when relation types are not distinguished.
    pub fn untyped_complete(&self) -> EntityGraph {
        let n = self.nodes.len();
        let mut all = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                all.push((i, j));
            }
        }
        let mut g = self.clone();
        g.heuristic = [all, Vec::new(), Vec::new()];
        g.complement = ComplementEdges::Dropped;
        g
    }

    pub fn report(&self) -> GraphReport {
        graph_report(self)
    }

    pub fn to_dump(&self) -> GraphDump {
        let mut edges = BTreeMap::new();
        for r in RelationType::ALL {
            edges.insert(r, self.edges(r));
        }
        GraphDump {
            id: self.sample_id.clone(),
            nodes: self.nodes.clone(),
            edges,
            candidate_mentions: self.candidate_mentions.clone(),
        }
    }

    pub fn from_dump(dump: GraphDump) -> Result<Self> {
        let n = dump.nodes.len();
        let get = |r: RelationType| dump.edges.get(&r).cloned().unwrap_or_default();
        let mut heuristic = [get(RelationType::DocBased), get(RelationType::Match), get(RelationType::Coref)];
        for list in heuristic.iter_mut() {
            for e in list.iter_mut() {
                if e.0 == e.1 || e.0.max(e.1) >= n {
                    return Err(GraphError::Invalid(format!("edge {e:?} with {n} nodes")));
                }
                *e = pair(e.0, e.1);
            }
            list.sort_unstable();
        }
        let complement = match dump.edges.get(&RelationType::Complement) {
            Some(c) => {
                let mut c: Vec<(usize, usize)> = c.iter().map(|e| pair(e.0, e.1)).collect();
                c.sort_unstable();
                ComplementEdges::Materialized(c)
            }
            None => ComplementEdges::Dropped,
        };
        for (c, ms) in dump.candidate_mentions.iter().enumerate() {
            for &m in ms {
                if m >= n || dump.nodes[m].entity != EntityKey::Candidate(c) {
                    return Err(GraphError::Invalid(format!("M_c entry {m} for candidate {c}")));
                }
            }
        }
        Ok(Self {
            sample_id: dump.id,
            nodes: dump.nodes,
            heuristic,
            complement,
            candidate_mentions: dump.candidate_mentions,
        })
    }
}

/// Serialized graph: nodes plus per-relation edge arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub id: String,
    pub nodes: Vec<Mention>,
    pub edges: BTreeMap<RelationType, Vec<(usize, usize)>>,
    pub candidate_mentions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphReport {
    pub sample_id: String,
    pub nodes: usize,
    pub doc_based: usize,
    pub matching: usize,
    pub coref: usize,
    pub complement: usize,
    /// Union of the four relations covers every pair.
    pub complete: bool,
    pub connected: bool,
}

impl GraphReport {
    pub const CSV_HEADER: &'static str = "id,nodes,doc_based,match,coref,complement,complete,connected";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sample_id,
            self.nodes,
            self.doc_based,
            self.matching,
            self.coref,
            self.complement,
            self.complete,
            self.connected
        )
    }
}

pub fn graph_report(graph: &EntityGraph) -> GraphReport {
    let n = graph.node_count();
    let nb = graph.neighbours();
    let complete = nb.iter().all(|l| l.len() == n - 1);
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &(j, _) in &nb[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    GraphReport {
        sample_id: graph.sample_id.clone(),
        nodes: n,
        doc_based: graph.edge_count(RelationType::DocBased),
        matching: graph.edge_count(RelationType::Match),
        coref: graph.edge_count(RelationType::Coref),
        complement: graph.edge_count(RelationType::Complement),
        complete,
        connected: seen.iter().all(|&s| s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{tokenize, Query};

    fn sample(docs: &[&str], cands: &[&str], subject: &str) -> Sample {
        Sample {
            id: "g".into(),
            query: Query::new("rel", subject),
            documents: docs.iter().map(|d| tokenize(d)).collect(),
            candidates: cands.iter().map(|c| c.to_string()).collect(),
            answer: Some(cands[0].to_string()),
        }
    }

    #[test]
    fn single_candidate_mention() {
        let s = sample(&["Stockholm is the capital of Sweden ."], &["Sweden", "Norway"], "nothing here");
        let m = find_exact_mentions(&s, tokenize);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end, m[0].entity), (5, 6, EntityKey::Candidate(0)));
    }

    #[test]
    fn absent_candidate_has_no_mentions() {
        let s = sample(&["nothing relevant"], &["Sweden", "Norway"], "zzz");
        assert!(find_exact_mentions(&s, tokenize).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let s = sample(&["I love New York ."], &["York", "New York"], "zzz");
        let m = find_exact_mentions(&s, tokenize);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].entity, EntityKey::Candidate(1));
        assert_eq!((m[0].start, m[0].end), (2, 4));
    }

    #[test]
    fn matching_ignores_case_and_punctuation_inside_spans() {
        let s = sample(&["born in st. louis , missouri"], &["St Louis", "Missouri"], "zzz");
        let m = find_exact_mentions(&s, tokenize);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].start, m[0].end), (2, 5));
    }

    #[test]
    fn chain_extends_single_entity() {
        let s = sample(&["Nelly released an album . the rapper toured"], &["Nelly", "album"], "zzz");
        let exact = find_exact_mentions(&s, tokenize);
        let chains = CorefChains {
            documents: vec![vec![vec![[0, 1], [5, 7]]]],
        };
        let set = merge_coref(&s, exact, Some(&chains));
        assert_eq!(set.mentions.len(), 3);
        let rapper = set.mentions.iter().find(|m| m.start == 5).unwrap();
        assert_eq!(rapper.entity, EntityKey::Candidate(0));
        assert_eq!(rapper.source, MentionSource::Coref);
        assert_eq!(set.chains, vec![vec![0, 2]]);
    }

    #[test]
    fn ambiguous_chain_is_discarded() {
        let s = sample(&["Stockholm is in Sweden . it is cold"], &["Sweden", "Stockholm"], "zzz");
        let exact = find_exact_mentions(&s, tokenize);
        let chains = CorefChains {
            documents: vec![vec![vec![[0, 1], [3, 4], [5, 6]]]],
        };
        let set = merge_coref(&s, exact.clone(), Some(&chains));
        assert_eq!(set.mentions, exact);
        assert!(set.chains.is_empty());
    }

    #[test]
    fn out_of_bounds_chain_is_rejected() {
        let s = sample(&["Nelly sings"], &["Nelly", "x"], "zzz");
        let exact = find_exact_mentions(&s, tokenize);
        let chains = CorefChains {
            documents: vec![vec![vec![[0, 1], [1, 9]]]],
        };
        let set = merge_coref(&s, exact.clone(), Some(&chains));
        assert_eq!(set.mentions, exact);
    }

    #[test]
    fn no_chains_means_exact_only() {
        let s = sample(&["Nelly sings"], &["Nelly", "x"], "zzz");
        let exact = find_exact_mentions(&s, tokenize);
        assert_eq!(merge_coref(&s, exact.clone(), None), MentionSet::exact_only(exact));
    }

    #[test]
    fn match_across_documents_without_doc_edge() {
        let s = sample(&["Stockholm is big", "I saw Stockholm"], &["Stockholm", "x"], "zzz");
        let g = build_graph(&s, None, &GraphOptions::default(), tokenize).unwrap();
        assert_eq!(g.edges(RelationType::Match), vec![(0, 1)]);
        assert!(g.edges(RelationType::DocBased).is_empty());
        assert!(g.edges(RelationType::Complement).is_empty());
    }

    #[test]
    fn different_entities_same_document() {
        let s = sample(&["Stockholm is in Sweden"], &["Stockholm", "Sweden"], "zzz");
        let g = build_graph(&s, None, &GraphOptions::default(), tokenize).unwrap();
        assert_eq!(g.edges(RelationType::DocBased), vec![(0, 1)]);
        assert!(g.edges(RelationType::Match).is_empty());
        assert!(g.edges(RelationType::Coref).is_empty());
    }

    #[test]
    fn empty_graph_is_an_error() {
        let s = sample(&["nothing"], &["a", "b"], "zzz");
        assert!(matches!(
            build_graph(&s, None, &GraphOptions::default(), tokenize),
            Err(GraphError::Empty(_))
        ));
    }

    #[test]
    fn no_heuristic_edges_gives_full_complement() {
        let s = sample(&["alpha", "beta", "gamma", "delta"], &["alpha", "beta", "gamma", "delta"], "zzz");
        let g = build_graph(&s, None, &GraphOptions::default(), tokenize).unwrap();
        let r = g.report();
        assert_eq!(r.complement, 4 * 3 / 2);
        assert!(r.complete && r.connected);
    }

    #[test]
    fn implicit_complement_agrees_with_materialized() {
        let s = sample(&["alpha beta", "beta gamma", "delta alpha"], &["alpha", "beta", "gamma", "delta"], "zzz");
        let small = build_graph(&s, None, &GraphOptions::default(), tokenize).unwrap();
        let lazy = build_graph(
            &s,
            None,
            &GraphOptions {
                complement_threshold: 1,
                masked: false,
            },
            tokenize,
        )
        .unwrap();
        assert!(matches!(lazy.complement_mode(), ComplementEdges::Implicit));
        assert_eq!(small.edges(RelationType::Complement), lazy.edges(RelationType::Complement));
        assert_eq!(small.report(), lazy.report());
    }

    #[test]
    fn masked_mode_ignores_chains() {
        let s = sample(&["Nelly released an album . the rapper toured"], &["Nelly", "album"], "zzz");
        let chains = CorefChains {
            documents: vec![vec![vec![[0, 1], [5, 7]]]],
        };
        let opts = GraphOptions {
            masked: true,
            ..Default::default()
        };
        let g = build_graph(&s, Some(&chains), &opts, tokenize).unwrap();
        assert_eq!(g.edge_count(RelationType::Coref), 0);
        let unmasked = build_graph(&s, Some(&chains), &GraphOptions::default(), tokenize).unwrap();
        assert_eq!(unmasked.edge_count(RelationType::Coref), 1);
    }

    #[test]
    fn dropping_a_relation_grows_the_complement() {
        let s = sample(&["alpha beta", "beta gamma"], &["alpha", "beta", "gamma"], "zzz");
        let g = build_graph(&s, None, &GraphOptions::default(), tokenize).unwrap();
        let before = g.edge_count(RelationType::Complement);
        let f = g.filtered(RelationFilter::default().without(RelationType::DocBased), 500);
        assert_eq!(f.edge_count(RelationType::DocBased), 0);
        assert_eq!(f.edge_count(RelationType::Complement), before + g.edge_count(RelationType::DocBased));
        let nc = g.filtered(RelationFilter::default().without(RelationType::Complement), 500);
        assert_eq!(nc.edge_count(RelationType::Complement), 0);
    }

    #[test]
    fn dump_round_trips() {
        let s = sample(&["alpha beta", "beta gamma zzz"], &["alpha", "beta", "gamma"], "zzz");
        let g = build_graph(&s, None, &GraphOptions::default(), tokenize).unwrap();
        let json = serde_json::to_string(&g.to_dump()).unwrap();
        let back = EntityGraph::from_dump(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(json.contains("\"DOC-BASED\""));
    }
}
