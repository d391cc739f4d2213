//! Token embeddings and the trainable encoders that turn them into
//! query-aware node annotations.
//!
//! Token vectors are fixed inputs: they come from an exported embedding file,
//! a static word-vector file, or a deterministic hash. Nothing upstream of the
//! stored vectors is trained. On top of them sit the query bi-LSTM, the mention
//! projection and the query-conditioned feed-forward block `f_x`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Sample, TokenizeFn};
use crate::graph::EntityGraph;
use crate::tensor::{AffineBlock, BoundAffine, Parameters, Tape, Tensor, TensorError, Var};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"EGCNEMB1";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not an embedding file (bad magic)")]
    BadMagic,
    #[error("embedding dimension {found} does not match expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding file truncated or malformed: {0}")]
    Malformed(String),
    #[error("no vector for token {index} of {key}")]
    Missing { key: String, index: usize },
    #[error("query of sample {0} has no tokens")]
    EmptyQuery(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Contextual,
    Static,
    Hash,
}

/// Vectors of one token sequence, row-major `tokens x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: usize,
    pub values: Vec<f64>,
}

impl TokenMatrix {
    pub fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.values[i * dim..(i + 1) * dim]
    }
}

/// Per-document and per-query token vectors, keyed `"<sample>/<doc index>"`
/// and `"<sample>/query"`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub provenance: Provenance,
    entries: BTreeMap<String, TokenMatrix>,
}

pub fn doc_key(sample_id: &str, doc: usize) -> String {
    format!("{sample_id}/{doc}")
}

pub fn query_key(sample_id: &str) -> String {
    format!("{sample_id}/query")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncoderError + '_ {
    move |source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            provenance,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: String, matrix: TokenMatrix) -> Result<()> {
        if matrix.values.len() != matrix.tokens * self.dim {
            return Err(EncoderError::DimMismatch {
                expected: matrix.tokens * self.dim,
                found: matrix.values.len(),
            });
        }
        self.entries.insert(key, matrix);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&TokenMatrix> {
        self.entries.get(key)
    }

    pub fn token(&self, key: &str, index: usize) -> Result<&[f64]> {
        match self.entries.get(key) {
            Some(m) if index < m.tokens => Ok(m.row(index, self.dim)),
            _ => Err(EncoderError::Missing {
                key: key.to_string(),
                index,
            }),
        }
    }

    /// Keys of a sample that are absent or shorter than its token lists.
    pub fn coverage_gaps(&self, sample: &Sample, tokenizer: TokenizeFn) -> Vec<String> {
        let mut gaps = Vec::new();
        for (d, doc) in sample.documents.iter().enumerate() {
            let key = doc_key(&sample.id, d);
            if self.entries.get(&key).is_none_or(|m| m.tokens != doc.len()) {
                gaps.push(key);
            }
        }
        let key = query_key(&sample.id);
        let q = sample.query_tokens(tokenizer).len();
        if self.entries.get(&key).is_none_or(|m| m.tokens != q) {
            gaps.push(key);
        }
        gaps
    }

    /// Binary little-endian layout: magic, `u32` dim, `u32` entry count, then
    /// per entry a `u32`-length-prefixed UTF-8 key, a `u32` token count and
    /// `tokens x dim` `f32` values. Entries are written in key order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (key, m) in &self.entries {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            w.write_all(&(m.tokens as u32).to_le_bytes())?;
            for v in &m.values {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(io_err(path))?;
        fs::write(path, buf).map_err(io_err(path))
    }

    pub fn read_from(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| EncoderError::BadMagic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(EncoderError::BadMagic);
        }
        let read_u32 = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| EncoderError::Malformed("unexpected end of file".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let dim = read_u32(&mut r)? as usize;
        if let Some(e) = expected_dim {
            if e != dim {
                return Err(EncoderError::DimMismatch {
                    expected: e,
                    found: dim,
                });
            }
        }
        let count = read_u32(&mut r)?;
        let mut store = Self::new(dim, Provenance::Contextual);
        for _ in 0..count {
            let klen = read_u32(&mut r)? as usize;
            if r.len() < klen {
                return Err(EncoderError::Malformed("key overruns file".into()));
            }
            let key = String::from_utf8(r[..klen].to_vec()).map_err(|e| EncoderError::Malformed(e.to_string()))?;
            r = &r[klen..];
            let tokens = read_u32(&mut r)? as usize;
            let n = tokens * dim;
            if r.len() < n * 4 {
                return Err(EncoderError::Malformed(format!("values of {key} overrun file")));
            }
            let values = r[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            r = &r[n * 4..];
            store.entries.insert(key, TokenMatrix { tokens, values });
        }
        if !r.is_empty() {
            return Err(EncoderError::Malformed("trailing bytes".into()));
        }
        Ok(store)
    }
}

pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    EmbeddingStore::read_from(&bytes, expected_dim)
}

fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Unit-norm Gaussian direction determined by `(token, seed)` alone.
pub fn hash_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, token));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn embed_with(
    samples: &[Sample],
    dim: usize,
    provenance: Provenance,
    tokenizer: TokenizeFn,
    mut lookup: impl FnMut(&str) -> Vec<f64>,
) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(dim, provenance);
    let mut matrix = |tokens: &[String]| TokenMatrix {
        tokens: tokens.len(),
        values: tokens.iter().flat_map(|t| lookup(t)).collect(),
    };
    for s in samples {
        for (d, doc) in s.documents.iter().enumerate() {
            store.entries.insert(doc_key(&s.id, d), matrix(doc));
        }
        store
            .entries
            .insert(query_key(&s.id), matrix(&s.query_tokens(tokenizer)));
    }
    store
}

/// Context-free pseudo-embeddings: each token type maps to [`hash_vector`].
pub fn hash_embed(samples: &[Sample], dim: usize, seed: u64, tokenizer: TokenizeFn) -> EmbeddingStore {
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    embed_with(samples, dim, Provenance::Hash, tokenizer, |t| {
        cache
            .entry(t.to_string())
            .or_insert_with(|| hash_vector(t, dim, seed))
            .clone()
    })
}

/// Plain-text word vectors, one `token v1 ... vD` line each.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticVectors {
    pub dim: usize,
    pub vocab: HashMap<String, Vec<f64>>,
}

impl StaticVectors {
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut dim = None;
        let mut vocab = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| EncoderError::Io {
                path: "<static vectors>".into(),
                source,
            })?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| EncoderError::Malformed(format!("line {}: {e}", n + 1)))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(EncoderError::DimMismatch {
                        expected: d,
                        found: values.len(),
                    })
                }
                _ => {}
            }
            vocab.insert(token.to_string(), values);
        }
        let dim = dim.ok_or_else(|| EncoderError::Malformed("no vectors".into()))?;
        Ok(Self { dim, vocab })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        Self::parse(BufReader::new(f))
    }

    /// Exact token first, then its lowercase form; unknown tokens get zeros.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        self.vocab
            .get(token)
            .or_else(|| self.vocab.get(&token.to_lowercase()))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dim])
    }
}

pub fn static_embed(samples: &[Sample], vectors: &StaticVectors, tokenizer: TokenizeFn) -> EmbeddingStore {
    embed_with(samples, vectors.dim, Provenance::Static, tokenizer, |t| vectors.lookup(t))
}

/// How a multi-token mention span becomes one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpanPooling {
    #[default]
    Mean,
    First,
    Last,
}

/// Raw per-node annotations `x_i`, an `n x dim` matrix.
pub fn pool_mentions(graph: &EntityGraph, store: &EmbeddingStore, pooling: SpanPooling) -> Result<Tensor> {
    let dim = store.dim;
    let mut data = Vec::with_capacity(graph.node_count() * dim);
    for m in &graph.nodes {
        let key = doc_key(&graph.sample_id, m.doc);
        let rows: Vec<usize> = match pooling {
            SpanPooling::Mean => (m.start..m.end).collect(),
            SpanPooling::First => vec![m.start],
            SpanPooling::Last => vec![m.end - 1],
        };
        let mut acc = vec![0.0; dim];
        for &i in &rows {
            for (a, v) in acc.iter_mut().zip(store.token(&key, i)?) {
                *a += v;
            }
        }
        let k = rows.len() as f64;
        data.extend(acc.into_iter().map(|a| a / k));
    }
    Ok(Tensor::matrix(graph.node_count(), dim, data)?)
}

/// Query token vectors as one `[dim]` tensor per token.
pub fn query_vectors(sample_id: &str, store: &EmbeddingStore) -> Result<Vec<Tensor>> {
    let key = query_key(sample_id);
    let m = store.get(&key).ok_or_else(|| EncoderError::Missing {
        key: key.clone(),
        index: 0,
    })?;
    if m.tokens == 0 {
        return Err(EncoderError::EmptyQuery(sample_id.to_string()));
    }
    Ok((0..m.tokens)
        .map(|i| Tensor::vector(m.row(i, store.dim).to_vec()))
        .collect())
}

/// One LSTM direction: a single affine block producing the input, forget,
/// candidate and output gate pre-activations from `[x_t, h_{t-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub gates: AffineBlock,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gates = AffineBlock::xavier(input + hidden, 4 * hidden, rng);
        gates.bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self { gates, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.gates.in_dim() - self.hidden
    }

    /// Runs over `xs` in the given order and returns every hidden state.
    pub fn run(&self, tape: &mut Tape<'_>, bound: BoundAffine, xs: &[Var]) -> std::result::Result<Vec<Var>, TensorError> {
        let h0 = Tensor::zeros(&[self.hidden]);
        let mut h = tape.constant(h0.clone());
        let mut c = tape.constant(h0);
        let n = self.hidden;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let xh = tape.concat(&[x, h])?;
            let z = tape.affine(xh, bound)?;
            let zi = tape.slice_cols(z, 0, n)?;
            let zf = tape.slice_cols(z, n, 2 * n)?;
            let zg = tape.slice_cols(z, 2 * n, 3 * n)?;
            let zo = tape.slice_cols(z, 3 * n, 4 * n)?;
            let i = tape.sigmoid(zi)?;
            let f = tape.sigmoid(zf)?;
            let g = tape.tanh(zg)?;
            let o = tape.sigmoid(zo)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBiLstm {
    pub forward: BoundAffine,
    pub backward: BoundAffine,
}

/// Stacked bidirectional LSTM over the query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoder {
    pub layers: Vec<BiLstmLayer>,
}

impl QueryEncoder {
    /// `hidden[k]` is the per-direction width of layer `k`.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(BiLstmLayer {
                forward: LstmCell::new(width, h, rng),
                backward: LstmCell::new(width, h, rng),
            });
            width = 2 * h;
        }
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers.last().map_or(0, |l| l.forward.hidden)
    }

    /// `q = [final forward state, final backward state]` of the top layer.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        bound: &[BoundBiLstm],
        tokens: &[Var],
    ) -> std::result::Result<Var, TensorError> {
        if tokens.is_empty() {
            return Err(TensorError::Invalid("empty query".into()));
        }
        let mut xs = tokens.to_vec();
        let mut last = None;
        for (layer, b) in self.layers.iter().zip(bound) {
            let fwd = layer.forward.run(tape, b.forward, &xs)?;
            let rev: Vec<Var> = xs.iter().rev().copied().collect();
            let mut bwd = layer.backward.run(tape, b.backward, &rev)?;
            bwd.reverse();
            last = Some((*fwd.last().expect("non-empty"), bwd[0]));
            xs = fwd
                .iter()
                .zip(&bwd)
                .map(|(f, b)| tape.concat(&[*f, *b]))
                .collect::<std::result::Result<_, _>>()?;
        }
        let (f, b) = last.ok_or_else(|| TensorError::Invalid("query encoder has no layers".into()))?;
        tape.concat(&[f, b])
    }
}

impl Parameters for QueryEncoder {
    type Bound = Vec<BoundBiLstm>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for l in &self.layers {
            l.forward.gates.visit(f);
            l.backward.gates.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            l.forward.gates.visit_mut(f);
            l.backward.gates.visit_mut(f);
        }
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Self::Bound {
        self.layers
            .iter()
            .map(|l| BoundBiLstm {
                forward: l.forward.gates.bind_from(vars),
                backward: l.backward.gates.bind_from(vars),
            })
            .collect()
    }
}

/// Widths of the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub raw: usize,
    pub query_hidden: [usize; 2],
    pub mention_proj: usize,
    pub fx_hidden: usize,
    pub node: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            raw: 3072,
            query_hidden: [256, 128],
            mention_proj: 256,
            fx_hidden: 1024,
            node: 512,
        }
    }
}

impl EncoderDims {
    pub fn query_dim(&self) -> usize {
        2 * self.query_hidden[1]
    }
}

/// Query encoder, mention projection and `f_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub query: QueryEncoder,
    pub mention_proj: AffineBlock,
    pub fx_hidden: AffineBlock,
    pub fx_out: AffineBlock,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub query: Vec<BoundBiLstm>,
    pub mention_proj: BoundAffine,
    pub fx_hidden: BoundAffine,
    pub fx_out: BoundAffine,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(dims: &EncoderDims, rng: &mut R) -> Self {
        let query = QueryEncoder::new(dims.raw, &dims.query_hidden, rng);
        let mention_proj = AffineBlock::xavier(dims.raw, dims.mention_proj, rng);
        let fx_hidden = AffineBlock::xavier(dims.mention_proj + dims.query_dim(), dims.fx_hidden, rng);
        let fx_out = AffineBlock::xavier(dims.fx_hidden, dims.node, rng);
        Self {
            query,
            mention_proj,
            fx_hidden,
            fx_out,
        }
    }

    pub fn encode_query(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundEncoder,
        sample_id: &str,
        store: &EmbeddingStore,
    ) -> Result<Var> {
        let vectors = query_vectors(sample_id, store)?;
        let tokens: Vec<Var> = vectors.into_iter().map(|t| tape.constant(t)).collect();
        Ok(self.query.encode(tape, &bound.query, &tokens)?)
    }

    /// Affine projection of pooled raw annotations, `n x mention_proj`.
    pub fn encode_mentions(&self, tape: &mut Tape<'_>, bound: &BoundEncoder, pooled: Tensor) -> Result<Var> {
        let x = tape.constant(pooled);
        Ok(tape.affine(x, bound.mention_proj)?)
    }

    /// `x̂_i = tanh(W2 tanh(W1 [x_i, q] + b1) + b2)` for every node at once.
    pub fn query_dependent(&self, tape: &mut Tape<'_>, bound: &BoundEncoder, mentions: Var, q: Var) -> Result<Var> {
        let n = tape.value(mentions).dims2().0;
        let qs = tape.repeat_rows(q, n)?;
        let joined = tape.concat(&[mentions, qs])?;
        let h = tape.affine(joined, bound.fx_hidden)?;
        let h = tape.tanh(h)?;
        let o = tape.affine(h, bound.fx_out)?;
        Ok(tape.tanh(o)?)
    }
}

impl Parameters for EncoderParams {
    type Bound = BoundEncoder;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.query.visit(f);
        self.mention_proj.visit(f);
        self.fx_hidden.visit(f);
        self.fx_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.query.visit_mut(f);
        self.mention_proj.visit_mut(f);
        self.fx_hidden.visit_mut(f);
        self.fx_out.visit_mut(f);
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundEncoder {
        BoundEncoder {
            query: self.query.bind_from(vars),
            mention_proj: self.mention_proj.bind_from(vars),
            fx_hidden: self.fx_hidden.bind_from(vars),
            fx_out: self.fx_out.bind_from(vars),
        }
    }
}
