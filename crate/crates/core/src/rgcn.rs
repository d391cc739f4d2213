//! Gated relational graph convolution with parameters shared across layers.
//!
//! One layer computes, for every node at once,
//!
//! ```text
//! u_i  = f_s(h_i) + 1/|N_i| * sum_{j in N_i} sum_{r in R_ij} f_r(h_j)
//! a_i  = sigmoid(f_a([u_i, h_i]))
//! h'_i = tanh(u_i) * a_i + h_i * (1 - a_i)
//! ```
//!
//! `|N_i|` counts distinct neighbours, so a pair linked by several relations
//! sends one message per relation but is counted once.

use rand::Rng;

use crate::graph::{ComplementEdges, EntityGraph, RelationType};
use crate::tensor::{AffineBlock, BoundAffine, MixEntry, Parameters, Result, Tape, Tensor, Var};

/// `f_s`, one `f_r` per relation type (indexed by [`RelationType::index`]) and `f_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgcnParams {
    pub self_loop: AffineBlock,
    pub relations: Vec<AffineBlock>,
    pub gate: AffineBlock,
}

#[derive(Debug, Clone)]
pub struct BoundRgcn {
    pub self_loop: BoundAffine,
    pub relations: Vec<BoundAffine>,
    pub gate: BoundAffine,
}

impl RgcnParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            self_loop: AffineBlock::xavier(dim, dim, rng),
            relations: (0..RelationType::ALL.len())
                .map(|_| AffineBlock::xavier(dim, dim, rng))
                .collect(),
            gate: AffineBlock::xavier(2 * dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            self_loop: AffineBlock::zeros(dim, dim),
            relations: (0..RelationType::ALL.len()).map(|_| AffineBlock::zeros(dim, dim)).collect(),
            gate: AffineBlock::zeros(2 * dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.self_loop.out_dim()
    }
}

impl Parameters for RgcnParams {
    type Bound = BoundRgcn;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.self_loop.visit(f);
        for r in &self.relations {
            r.visit(f);
        }
        self.gate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.self_loop.visit_mut(f);
        for r in &mut self.relations {
            r.visit_mut(f);
        }
        self.gate.visit_mut(f);
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundRgcn {
        BoundRgcn {
            self_loop: self.self_loop.bind_from(vars),
            relations: self.relations.iter().map(|r| r.bind_from(vars)).collect(),
            gate: self.gate.bind_from(vars),
        }
    }
}

/// Bilinear edge scorer `W_e` for the induced-edge variant.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedEdgeParams {
    pub w_e: Tensor,
}

impl InducedEdgeParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let data = (0..dim * dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            w_e: Tensor::matrix(dim, dim, data).expect("square"),
        }
    }
}

impl Parameters for InducedEdgeParams {
    type Bound = Var;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.w_e);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w_e);
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Var {
        vars.next().expect("w_e var")
    }
}

/// Message routing for one graph, computed once and reused by every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub nodes: usize,
    /// Relations that carry at least one explicit message.
    pub active: Vec<RelationType>,
    /// Entries whose `source` indexes into `active`.
    pub entries: Vec<MixEntry>,
    /// Complement messages summed algebraically: per node the excluded
    /// (heuristic) neighbours and the `1/|N_i|` weight.
    pub implicit: Option<(Vec<Vec<usize>>, Vec<f64>)>,
}

impl Adjacency {
    pub fn new(graph: &EntityGraph) -> Self {
        let n = graph.node_count();
        let implicit = matches!(graph.complement_mode(), ComplementEdges::Implicit);
        let nb = if implicit {
            graph.heuristic_neighbours()
        } else {
            graph.neighbours()
        };
        let degree: Vec<usize> = if implicit {
            vec![n.saturating_sub(1); n]
        } else {
            nb.iter().map(Vec::len).collect()
        };
        let mut slot = [None; 4];
        let mut active = Vec::new();
        let mut entries = Vec::new();
        for (i, list) in nb.iter().enumerate() {
            for &(j, rels) in list {
                for r in rels.iter() {
                    let s = *slot[r.index()].get_or_insert_with(|| {
                        active.push(r);
                        active.len() - 1
                    });
                    entries.push(MixEntry {
                        target: i,
                        source: s,
                        row: j,
                        weight: 1.0 / degree[i] as f64,
                    });
                }
            }
        }
        let implicit = (implicit && n > 1).then(|| {
            let excluded = nb.iter().map(|l| l.iter().map(|(j, _)| *j).collect()).collect();
            let weights = degree.iter().map(|&d| 1.0 / d as f64).collect();
            (excluded, weights)
        });
        Self {
            nodes: n,
            active,
            entries,
            implicit,
        }
    }
}

/// Gated update shared by the typed and induced variants, given `u` minus
/// the self term.
fn gated(tape: &mut Tape<'_>, p: &BoundRgcn, h: Var, messages: Option<Var>) -> Result<Var> {
    let s = tape.affine(h, p.self_loop)?;
    let u = match messages {
        Some(m) => tape.add(s, m)?,
        None => s,
    };
    let uh = tape.concat(&[u, h])?;
    let za = tape.affine(uh, p.gate)?;
    let a = tape.sigmoid(za)?;
    let tu = tape.tanh(u)?;
    let write = tape.mul(tu, a)?;
    let keep = tape.one_minus(a)?;
    let kept = tape.mul(h, keep)?;
    tape.add(write, kept)
}

/// One application of the gated R-GCN to the `n x d` node matrix `h`.
pub fn layer_update(tape: &mut Tape<'_>, p: &BoundRgcn, h: Var, adj: &Adjacency) -> Result<Var> {
    let mut messages = None;
    if !adj.active.is_empty() {
        let transformed: Vec<Var> = adj
            .active
            .iter()
            .map(|r| tape.affine(h, p.relations[r.index()]))
            .collect::<Result<_>>()?;
        messages = Some(tape.mix(&transformed, adj.entries.clone(), adj.nodes)?);
    }
    if let Some((excluded, weights)) = &adj.implicit {
        let t = tape.affine(h, p.relations[RelationType::Complement.index()])?;
        let c = tape.complement_sum(t, excluded.clone(), weights.clone())?;
        messages = Some(match messages {
            Some(m) => tape.add(m, c)?,
            None => c,
        });
    }
    gated(tape, p, h, messages)
}

/// `L` layers with the same parameters; `L = 0` returns `x` itself.
pub fn propagate(tape: &mut Tape<'_>, p: &BoundRgcn, x: Var, adj: &Adjacency, layers: usize) -> Result<Var> {
    let mut h = x;
    for _ in 0..layers {
        h = layer_update(tape, p, h, adj)?;
    }
    Ok(h)
}

/// Edge weights `sigmoid(x_i^T W_e x_j) / (n - 1)` with a zero diagonal,
/// as an `n x n` matrix. `None` for a single node.
pub fn induced_weights(tape: &mut Tape<'_>, w_e: Var, x: Var) -> Result<Option<Var>> {
    let n = tape.value(x).dims2().0;
    if n < 2 {
        return Ok(None);
    }
    let xw = tape.matmul(x, w_e)?;
    let scores = tape.matmul_t(xw, x)?;
    let sig = tape.sigmoid(scores)?;
    let scale = 1.0 / (n - 1) as f64;
    let mask: Vec<f64> = (0..n * n)
        .map(|k| if k / n == k % n { 0.0 } else { scale })
        .collect();
    let mask = tape.constant(Tensor::matrix(n, n, mask)?);
    Ok(Some(tape.mul(sig, mask)?))
}

/// Fully connected single-relation layer with learned edge weights. The
/// message transform is the first relation block.
pub fn induced_layer_update(tape: &mut Tape<'_>, p: &BoundRgcn, h: Var, weights: Option<Var>) -> Result<Var> {
    let messages = match weights {
        Some(w) => {
            let t = tape.affine(h, p.relations[0])?;
            Some(tape.matmul(w, t)?)
        }
        None => None,
    };
    gated(tape, p, h, messages)
}

pub fn propagate_induced(
    tape: &mut Tape<'_>,
    p: &BoundRgcn,
    w_e: Var,
    x: Var,
    layers: usize,
) -> Result<Var> {
    let weights = if layers > 0 { induced_weights(tape, w_e, x)? } else { None };
    let mut h = x;
    for _ in 0..layers {
        h = induced_layer_update(tape, p, h, weights)?;
    }
    Ok(h)
}
