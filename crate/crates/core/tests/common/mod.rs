//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use entity_gcn::dataset::{normalize_token, tokenize, Query, Sample};
use entity_gcn::encoder::{hash_embed, EmbeddingStore};
use entity_gcn::graph::{
    build_graph, CorefChains, EntityGraph, EntityKey, GraphDump, GraphOptions, Mention, MentionSource, RelationType,
};
use entity_gcn::model::{Mode, ModelConfig, ModelParams, PreparedSample};
use entity_gcn::rgcn::RgcnParams;
use entity_gcn::tensor::{Parameters, Tape, Tensor};
use rand::Rng;

/// Four nodes carrying all four relations:
/// alpha(0) beta(1) in doc 0, alpha(2) "he"(3) in doc 1 with a chain
/// linking alpha and "he". DOC (0,1) (2,3); MATCH (0,2); COREF (2,3);
/// COMPLEMENT (0,3) (1,2) (1,3).
pub fn four_node_sample() -> (Sample, CorefChains) {
    let sample = Sample {
        id: "fx".into(),
        query: Query::new("located_in", "delta"),
        documents: vec![tokenize("alpha met beta"), tokenize("alpha said he left")],
        candidates: vec!["alpha".into(), "beta".into(), "gamma".into()],
        answer: Some("beta".into()),
    };
    let chains = CorefChains {
        documents: vec![vec![], vec![vec![[0, 1], [2, 3]]]],
    };
    (sample, chains)
}

pub fn four_node_graph() -> (Sample, EntityGraph) {
    let (s, c) = four_node_sample();
    let g = build_graph(&s, Some(&c), &GraphOptions::default(), tokenize).unwrap();
    (s, g)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::small(4)
}

pub fn prepared(sample: &Sample, graph: &EntityGraph, config: &ModelConfig) -> (EmbeddingStore, PreparedSample) {
    let store = hash_embed(std::slice::from_ref(sample), config.dims.raw, 11, tokenize);
    let p = PreparedSample::new(sample, graph, &store, config).unwrap();
    (store, p)
}

pub fn loss_value(params: &ModelParams, s: &PreparedSample) -> f64 {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = params.forward(&mut tape, &b, s, Mode::Eval).unwrap();
    let (loss, _) = params.loss(&mut tape, &out, s).unwrap().unwrap();
    tape.value(loss).item()
}

/// Human-readable name of every parameter tensor, in traversal order.
pub fn block_names(p: &ModelParams) -> Vec<String> {
    let mut names = Vec::new();
    let mut push = |name: &str, n: usize| names.extend(std::iter::repeat_n(name.to_string(), n));
    push("query RNN", p.encoder.query.tensor_count());
    push("mention projection", 2);
    push("f_x", 4);
    push("f_s", 2);
    for r in RelationType::ALL {
        push(&format!("f_r[{}]", r.name()), 2);
    }
    push("f_a", 2);
    push("f_o", 2 * p.head.len());
    if p.induced.is_some() {
        push("W_e", 1);
    }
    names
}

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor for gradients that are numerically zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central differences with step `h` on every coordinate of every tensor,
/// grouped by block name.
pub fn finite_difference_check(params: &ModelParams, s: &PreparedSample, h: f64) -> Vec<BlockCheck> {
    let (_, _, grads) = params.sample_gradients(s, Mode::Eval).unwrap().unwrap();
    let names = block_names(params);
    assert_eq!(names.len(), grads.len());
    let mut out: Vec<BlockCheck> = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut idx = 0;
                p.visit_mut(&mut |t| {
                    if idx == k {
                        t.data_mut()[j] += delta;
                    }
                    idx += 1;
                });
                loss_value(&p, s)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
        match out.last_mut() {
            Some(b) if b.name == names[k] => {
                b.coordinates += g.len();
                b.max_rel_err = b.max_rel_err.max(worst);
            }
            _ => out.push(BlockCheck {
                name: names[k].clone(),
                coordinates: g.len(),
                max_rel_err: worst,
            }),
        }
    }
    out
}

/// Random graph on `n` nodes: every pair independently gets each heuristic
/// relation with probability `p`, so relation sets overlap; the complement
/// is materialized.
pub fn random_dump<R: Rng>(rng: &mut R, n: usize, p: f64) -> GraphDump {
    let nodes = (0..n)
        .map(|i| Mention {
            doc: i,
            start: 0,
            end: 1,
            entity: EntityKey::Subject,
            source: MentionSource::Exact,
        })
        .collect();
    let mut edges = std::collections::BTreeMap::new();
    for r in RelationType::ALL {
        edges.insert(r, Vec::new());
    }
    for i in 0..n {
        for j in i + 1..n {
            let mut any = false;
            for r in [RelationType::DocBased, RelationType::Match, RelationType::Coref] {
                if rng.random_bool(p) {
                    edges.get_mut(&r).unwrap().push((i, j));
                    any = true;
                }
            }
            if !any {
                edges.get_mut(&RelationType::Complement).unwrap().push((i, j));
            }
        }
    }
    GraphDump {
        id: "rand".into(),
        nodes,
        edges,
        candidate_mentions: vec![],
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = w.dims2();
    (0..out)
        .map(|o| b.data()[o] + (0..inp).map(|k| w.data()[o * inp + k] * x[k]).sum::<f64>())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Literal dense implementation of one gated layer from per-relation
/// adjacency matrices `adj[r][i][j]`.
pub fn dense_layer(p: &RgcnParams, adj: &[Vec<Vec<bool>>; 4], h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = h.len();
    let d = h[0].len();
    (0..n)
        .map(|i| {
            let mut u = affine(&p.self_loop.weight, &p.self_loop.bias, &h[i]);
            let neighbours = (0..n).filter(|&j| adj.iter().any(|a| a[i][j])).count();
            if neighbours > 0 {
                let mut acc = vec![0.0; d];
                for j in 0..n {
                    for (r, a) in adj.iter().enumerate() {
                        if a[i][j] {
                            let m = affine(&p.relations[r].weight, &p.relations[r].bias, &h[j]);
                            for k in 0..d {
                                acc[k] += m[k];
                            }
                        }
                    }
                }
                for k in 0..d {
                    u[k] += acc[k] / neighbours as f64;
                }
            }
            let uh: Vec<f64> = u.iter().chain(&h[i]).copied().collect();
            let a: Vec<f64> = affine(&p.gate.weight, &p.gate.bias, &uh).into_iter().map(sigmoid).collect();
            (0..d).map(|k| u[k].tanh() * a[k] + h[i][k] * (1.0 - a[k])).collect()
        })
        .collect()
}

pub fn dense_adjacency(dump: &GraphDump) -> [Vec<Vec<bool>>; 4] {
    let n = dump.nodes.len();
    let mut adj: [Vec<Vec<bool>>; 4] = std::array::from_fn(|_| vec![vec![false; n]; n]);
    for (r, list) in &dump.edges {
        for &(i, j) in list {
            adj[r.index()][i][j] = true;
            adj[r.index()][j][i] = true;
        }
    }
    adj
}

pub fn dense_propagate(p: &RgcnParams, adj: &[Vec<Vec<bool>>; 4], x: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    for _ in 0..layers {
        h = dense_layer(p, adj, &h);
    }
    h
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Small synthetic train/dev split with prepared samples.
pub fn synthetic_split(
    train: usize,
    dev: usize,
    config: &ModelConfig,
) -> (Vec<PreparedSample>, Vec<PreparedSample>) {
    use entity_gcn::synthetic::{generate, SyntheticConfig};
    let base = SyntheticConfig {
        samples: train,
        seed: 1,
        ..SyntheticConfig::default()
    };
    let t = generate(&base, "t");
    let d = generate(&SyntheticConfig { samples: dev, seed: 2, ..base }, "d");
    let all: Vec<Sample> = t.iter().chain(&d).cloned().collect();
    let store = hash_embed(&all, config.dims.raw, 7, tokenize);
    let prep = |s: &[Sample]| -> Vec<PreparedSample> {
        s.iter()
            .map(|x| {
                let g = build_graph(x, None, &GraphOptions::default(), tokenize).unwrap();
                PreparedSample::new(x, &g, &store, config).unwrap()
            })
            .collect()
    };
    (prep(&t), prep(&d))
}

/// Up to two chains per document of single-token spans.
pub fn random_chains<R: Rng>(s: &Sample, rng: &mut R) -> CorefChains {
    CorefChains {
        documents: s
            .documents
            .iter()
            .map(|d| {
                (0..rng.random_range(0..3))
                    .map(|_| {
                        let mut spans: Vec<[usize; 2]> = (0..rng.random_range(2..4))
                            .map(|_| {
                                let t = rng.random_range(0..d.len());
                                [t, t + 1]
                            })
                            .collect();
                        spans.sort_unstable();
                        spans.dedup();
                        spans
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Applies the three pairwise rules literally, then complements.
pub fn oracle_edges(s: &Sample, chains: &CorefChains, g: &EntityGraph) -> [BTreeSet<(usize, usize)>; 4] {
    let nodes = &g.nodes;
    let n = nodes.len();
    let surface = |i: usize| -> Vec<String> {
        s.documents[nodes[i].doc][nodes[i].start..nodes[i].end].iter().map(|t| normalize_token(t)).collect()
    };
    let exact: Vec<usize> = (0..n).filter(|&i| nodes[i].source == MentionSource::Exact).collect();
    let covers = |i: usize, doc: usize, t: usize| nodes[i].doc == doc && nodes[i].start <= t && t < nodes[i].end;
    let mut chain_members: Vec<Vec<usize>> = Vec::new();
    for (doc, list) in chains.documents.iter().enumerate() {
        for chain in list {
            let keys: HashSet<_> = exact
                .iter()
                .filter(|&&i| chain.iter().any(|&[t, _]| covers(i, doc, t)))
                .map(|&i| nodes[i].entity)
                .collect();
            if keys.len() == 1 {
                chain_members.push((0..n).filter(|&i| chain.iter().any(|&[t, _]| covers(i, doc, t))).collect());
            }
        }
    }
    let mut out: [BTreeSet<(usize, usize)>; 4] = Default::default();
    for i in 0..n {
        for j in i + 1..n {
            let doc = nodes[i].doc == nodes[j].doc;
            let matching = nodes[i].source == MentionSource::Exact
                && nodes[j].source == MentionSource::Exact
                && surface(i) == surface(j);
            let coref = chain_members.iter().any(|m| m.contains(&i) && m.contains(&j));
            for (r, hit) in [doc, matching, coref].into_iter().enumerate() {
                if hit {
                    out[r].insert((i, j));
                }
            }
            if !(doc || matching || coref) {
                out[3].insert((i, j));
            }
        }
    }
    out
}
