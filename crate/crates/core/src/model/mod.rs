//! End-to-end Entity-GCN: encoders, gated R-GCN and the candidate scorer,
//! plus training, evaluation, ensembling, checkpoints and ablations.

mod ablation;
mod checkpoint;
mod eval;
mod train;

pub use ablation::{ablation_csv, run_ablation, AblationRow, AblationSetup, Variant};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{
    correlation_analysis, ensemble_predict, ensemble_probabilities, evaluate, evaluate_predictions, outcome, pearson,
    predict_all, report_from_outcomes, Bucket,
    CorrelationReport, EvalReport, Outcome, RelationRow,
};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::encoder::{pool_mentions, query_vectors, BoundEncoder, EmbeddingStore, EncoderDims, EncoderError, EncoderParams, SpanPooling};
use crate::graph::{EntityGraph, GraphError, RelationFilter};
use crate::rgcn::{propagate, propagate_induced, Adjacency, BoundRgcn, InducedEdgeParams, RgcnParams};
use crate::tensor::{AffineBlock, BoundAffine, Parameters, Tape, Tensor, TensorError, Var};

/// Logit given to a gold candidate that has no mention node.
pub const FLOOR_LOGIT: f64 = -30.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("ensemble members disagree on the candidate list of {0}")]
    CandidateMismatch(String),
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint block {index} has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ModelError {
    /// Numerical failures (non-finite values) as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ModelError::Tensor(TensorError::NonFinite { .. })
                | ModelError::Encoder(EncoderError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreHead {
    /// A single affine map of `[q, h_i]`.
    Affine,
    /// Feed-forward head with two tanh hidden layers and a scalar output.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// Heuristic typed edges.
    Typed,
    /// Complete graph, one shared relation block.
    Untyped,
    /// Complete graph weighted by the bilinear edge scorer.
    Induced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: EncoderDims,
    pub head: ScoreHead,
    pub head_hidden: [usize; 2],
    pub layers: usize,
    pub dropout: f64,
    pub pooling: SpanPooling,
    pub propagation: Propagation,
    pub relations: RelationFilter,
    pub complement_threshold: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: EncoderDims::default(),
            head: ScoreHead::Mlp,
            head_hidden: [256, 128],
            layers: 3,
            dropout: 0.0,
            pooling: SpanPooling::Mean,
            propagation: Propagation::Typed,
            relations: RelationFilter::default(),
            complement_threshold: 500,
        }
    }
}

impl ModelConfig {
    /// Every width set to `d` (the query encoder to `d/2` per direction),
    /// for desk-scale runs on hash embeddings.
    pub fn small(d: usize) -> Self {
        Self {
            dims: EncoderDims {
                raw: d,
                query_hidden: [d / 2, d / 2],
                mention_proj: d,
                fx_hidden: 2 * d,
                node: d,
            },
            head_hidden: [d, d / 2],
            ..Self::default()
        }
    }

    /// The graph the model actually propagates over.
    pub fn shape_graph(&self, graph: &EntityGraph) -> EntityGraph {
        match self.propagation {
            Propagation::Typed => graph.filtered(self.relations, self.complement_threshold),
            Propagation::Untyped | Propagation::Induced => graph.untyped_complete(),
        }
    }
}

/// A sample with everything precomputed that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub relation: String,
    pub query: Vec<Tensor>,
    /// Pooled raw mention annotations, `n x raw`.
    pub pooled: Tensor,
    pub adjacency: Adjacency,
    pub candidate_mentions: Vec<Vec<usize>>,
    pub gold: Option<usize>,
}

impl PreparedSample {
    pub fn new(sample: &Sample, graph: &EntityGraph, store: &EmbeddingStore, config: &ModelConfig) -> Result<Self> {
        let shaped = config.shape_graph(graph);
        Ok(Self {
            id: sample.id.clone(),
            relation: sample.query.relation.clone(),
            query: query_vectors(&sample.id, store)?,
            pooled: pool_mentions(graph, store, config.pooling)?,
            adjacency: Adjacency::new(&shaped),
            candidate_mentions: graph.candidate_mentions.clone(),
            gold: sample.answer_index(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nodes
    }

    pub fn candidate_count(&self) -> usize {
        self.candidate_mentions.len()
    }

    pub fn has_mentions(&self) -> Vec<bool> {
        self.candidate_mentions.iter().map(|m| !m.is_empty()).collect()
    }
}

/// All trainable blocks plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub rgcn: RgcnParams,
    pub head: Vec<AffineBlock>,
    pub induced: Option<InducedEdgeParams>,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub rgcn: BoundRgcn,
    pub head: Vec<BoundAffine>,
    pub induced: Option<Var>,
}

/// Deterministic seed derivation: one master seed fans out into streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_ORDER: u64 = 2;
pub(crate) const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Raw output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per-candidate max node score; [`FLOOR_LOGIT`] where `M_c` is empty.
    pub logits: Var,
    pub best_node: Vec<Option<usize>>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_INIT]));
        let d = config.dims.node;
        let encoder = EncoderParams::new(&config.dims, &mut rng);
        let rgcn = RgcnParams::new(d, &mut rng);
        let input = config.dims.query_dim() + d;
        let head = match config.head {
            ScoreHead::Affine => vec![AffineBlock::xavier(input, 1, &mut rng)],
            ScoreHead::Mlp => vec![
                AffineBlock::xavier(input, config.head_hidden[0], &mut rng),
                AffineBlock::xavier(config.head_hidden[0], config.head_hidden[1], &mut rng),
                AffineBlock::xavier(config.head_hidden[1], 1, &mut rng),
            ],
        };
        let induced = (config.propagation == Propagation::Induced).then(|| InducedEdgeParams::new(d, &mut rng));
        Self {
            config,
            encoder,
            rgcn,
            head,
            induced,
        }
    }

    /// A copy with every value rounded to the nearest `f32`, i.e. exactly what
    /// a checkpoint stores.
    pub fn rounded(&self) -> Self {
        let mut p = self.clone();
        p.visit_mut(&mut |t| t.round_to_f32());
        p
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &BoundModel, s: &PreparedSample, mode: Mode) -> Result<ForwardOutput> {
        let tokens: Vec<Var> = s.query.iter().map(|t| tape.constant(t.clone())).collect();
        let q = self.encoder.query.encode(tape, &b.encoder.query, &tokens)?;
        let m = self.encoder.encode_mentions(tape, &b.encoder, s.pooled.clone())?;
        let x = self.encoder.query_dependent(tape, &b.encoder, m, q)?;
        let (training, seed) = match mode {
            Mode::Eval => (false, 0),
            Mode::Train { seed } => (true, seed),
        };
        let rate = self.config.dropout;
        let x = tape.dropout(x, rate, derive_seed(&[seed, 0]), training)?;
        let layers = self.config.layers;
        let h = match (self.config.propagation, b.induced) {
            (Propagation::Induced, Some(w_e)) => propagate_induced(tape, &b.rgcn, w_e, x, layers)?,
            _ => propagate(tape, &b.rgcn, x, &s.adjacency, layers)?,
        };
        let n = s.node_count();
        let qs = tape.repeat_rows(q, n)?;
        let mut z = tape.concat(&[qs, h])?;
        z = tape.dropout(z, rate, derive_seed(&[seed, 1]), training)?;
        let last = b.head.len() - 1;
        for (k, block) in b.head.iter().enumerate() {
            z = tape.affine(z, *block)?;
            if k < last {
                z = tape.tanh(z)?;
            }
        }
        let (logits, best_node) = tape.group_max(z, &s.candidate_mentions, FLOOR_LOGIT)?;
        Ok(ForwardOutput { logits, best_node })
    }

    /// `-log p(gold)` with the softmax over candidates that have mentions,
    /// plus the gold at [`FLOOR_LOGIT`] when it has none. Returns the loss
    /// and whether the floor was used; `None` for unlabelled samples.
    pub fn loss(&self, tape: &mut Tape<'_>, out: &ForwardOutput, s: &PreparedSample) -> Result<Option<(Var, bool)>> {
        let Some(gold) = s.gold else { return Ok(None) };
        let mut include = s.has_mentions();
        let floored = !include[gold];
        include[gold] = true;
        Ok(Some((tape.masked_nll(out.logits, &include, gold)?, floored)))
    }

    pub fn predict(&self, s: &PreparedSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let out = self.forward(&mut tape, &b, s, Mode::Eval)?;
        Ok(Prediction::from_logits(
            tape.value(out.logits).data(),
            &s.has_mentions(),
            out.best_node,
        ))
    }

    /// Loss and parameter gradients of one sample, aligned with `visit`.
    pub fn sample_gradients(&self, s: &PreparedSample, mode: Mode) -> Result<Option<(f64, bool, Vec<Tensor>)>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let out = self.forward(&mut tape, &b, s, mode)?;
        let Some((loss, floored)) = self.loss(&mut tape, &out, s)? else {
            return Ok(None);
        };
        let grads = tape.backward(loss)?;
        Ok(Some((tape.value(loss).item(), floored, grads.param_grads(&tape))))
    }
}

impl Parameters for ModelParams {
    type Bound = BoundModel;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.encoder.visit(f);
        self.rgcn.visit(f);
        for h in &self.head {
            h.visit(f);
        }
        if let Some(i) = &self.induced {
            i.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.encoder.visit_mut(f);
        self.rgcn.visit_mut(f);
        for h in &mut self.head {
            h.visit_mut(f);
        }
        if let Some(i) = &mut self.induced {
            i.visit_mut(f);
        }
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind_from(vars),
            rgcn: self.rgcn.bind_from(vars),
            head: self.head.iter().map(|h| h.bind_from(vars)).collect(),
            induced: self.induced.as_ref().map(|i| i.bind_from(vars)),
        }
    }
}

/// Candidate distribution for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Zero for candidates without mentions.
    pub probabilities: Vec<f64>,
    pub best_node: Vec<Option<usize>>,
    pub predicted: usize,
    /// False when no candidate has a mention; `predicted` is then 0.
    pub answerable: bool,
}

impl Prediction {
    /// Softmax restricted to `include`; argmax ties go to the lowest index.
    pub fn from_logits(logits: &[f64], include: &[bool], best_node: Vec<Option<usize>>) -> Self {
        let max = logits
            .iter()
            .zip(include)
            .filter(|(_, &i)| i)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let answerable = max.is_finite();
        let mut probabilities: Vec<f64> = logits
            .iter()
            .zip(include)
            .map(|(l, &i)| if i && answerable { (l - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = probabilities.iter().sum();
        if z > 0.0 {
            probabilities.iter_mut().for_each(|p| *p /= z);
        }
        let predicted = argmax(&probabilities);
        Self {
            logits: logits.to_vec(),
            probabilities,
            best_node,
            predicted,
            answerable,
        }
    }

    /// 1-based rank of candidate `c`: one plus the number of candidates with
    /// higher probability, or equal probability and a lower index.
    pub fn rank_of(&self, c: usize) -> usize {
        let p = self.probabilities[c];
        1 + self
            .probabilities
            .iter()
            .enumerate()
            .filter(|&(k, &q)| q > p || (q == p && k < c))
            .count()
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}
