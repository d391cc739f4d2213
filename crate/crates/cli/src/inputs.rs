use std::borrow::Cow;
use std::path::Path;

use entity_gcn::dataset::{parse_dataset, tokenize, Sample};
use entity_gcn::encoder::{hash_embed, load_embeddings, static_embed, EmbeddingStore, StaticVectors};
use entity_gcn::graph::{build_graph, load_coref_sidecar, CorefSidecar, EntityGraph, GraphError, GraphOptions};
use entity_gcn::model::{ModelConfig, Variant};

use crate::failure::Failure;
use crate::{EmbedArgs, GraphArgs, ModelArgs};

pub const DEFAULT_HASH_DIM: usize = 64;

/// Parses a split, logging rejected records; an empty result is an error.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("dataset {} does not exist", path.display())));
    }
    let parsed = parse_dataset(path)?;
    for r in &parsed.rejections {
        log::warn!("{}: record {} ({:?}) rejected: {}", path.display(), r.index, r.id, r.reason);
    }
    if parsed.samples.is_empty() {
        return Err(Failure::data(anyhow::anyhow!("{} holds no valid samples", path.display())));
    }
    Ok(parsed.samples)
}

/// Where token vectors come from.
pub enum EmbedSource {
    File(EmbeddingStore),
    Static(StaticVectors),
    Hash { dim: usize, seed: u64 },
}

impl EmbedSource {
    pub fn from_args(args: &EmbedArgs, expected_dim: Option<usize>) -> Result<Self, Failure> {
        if let Some(p) = &args.embeddings {
            return Ok(Self::File(load_embeddings(p, expected_dim)?));
        }
        if let Some(p) = &args.static_vectors {
            let v = StaticVectors::load(p)?;
            if let Some(d) = expected_dim.filter(|&d| d != v.dim) {
                return Err(Failure::data(anyhow::anyhow!(
                    "static vectors have width {}, the model expects {d}",
                    v.dim
                )));
            }
            return Ok(Self::Static(v));
        }
        let dim = args.hash_dim.or(expected_dim).unwrap_or(DEFAULT_HASH_DIM);
        if expected_dim.is_some_and(|d| d != dim) {
            return Err(Failure::usage(format!("--hash-dim {dim} differs from the checkpoint width")));
        }
        Ok(Self::Hash { dim, seed: args.hash_seed })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::File(s) => s.dim,
            Self::Static(v) => v.dim,
            Self::Hash { dim, .. } => *dim,
        }
    }

    pub fn is_hash(&self) -> bool {
        matches!(self, Self::Hash { .. })
    }

    /// A store covering `samples`, checked for missing entries.
    pub fn store(&self, samples: &[Sample]) -> Result<Cow<'_, EmbeddingStore>, Failure> {
        let store = match self {
            Self::File(s) => Cow::Borrowed(s),
            Self::Static(v) => Cow::Owned(static_embed(samples, v, tokenize)),
            Self::Hash { dim, seed } => Cow::Owned(hash_embed(samples, *dim, *seed, tokenize)),
        };
        for s in samples {
            let gaps = store.coverage_gaps(s, tokenize);
            if !gaps.is_empty() {
                return Err(Failure::data(anyhow::anyhow!(
                    "embeddings do not cover sample {}: {}",
                    s.id,
                    gaps.join(", ")
                )));
            }
        }
        Ok(store)
    }
}

/// Model configuration from the flags and the embedding width.
pub fn model_config(args: &ModelArgs, source: &EmbedSource) -> Result<ModelConfig, Failure> {
    let mut config = match args.node_dim {
        Some(d) => ModelConfig::small(d),
        None if source.is_hash() => ModelConfig::small(source.dim()),
        None => ModelConfig::default(),
    };
    config.dims.raw = source.dim();
    if let Some(l) = args.layers {
        config.layers = l;
    }
    if let Some(p) = args.dropout {
        if !(0.0..1.0).contains(&p) {
            return Err(Failure::usage("--dropout must lie in [0, 1)"));
        }
        config.dropout = p;
    }
    Ok(config)
}

pub fn variants(names: &[String]) -> Result<Vec<Variant>, Failure> {
    if names.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    names.iter().map(|n| n.parse::<Variant>().map_err(Failure::from)).collect()
}

pub fn load_chains(args: &GraphArgs) -> Result<Option<CorefSidecar>, Failure> {
    match &args.chains {
        Some(_) if args.masked => {
            log::warn!("--chains ignored in masked mode");
            Ok(None)
        }
        Some(p) => Ok(Some(load_coref_sidecar(p)?)),
        None => Ok(None),
    }
}

/// Builds every graph; samples without a single mention are dropped and
/// counted.
pub fn graphs(
    samples: Vec<Sample>,
    chains: Option<&CorefSidecar>,
    options: &GraphOptions,
) -> Result<(Vec<Sample>, Vec<EntityGraph>, usize), Failure> {
    let mut kept = Vec::with_capacity(samples.len());
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        let c = chains.and_then(|m| m.get(&s.id));
        match build_graph(&s, c, options, tokenize) {
            Ok(g) => {
                out.push(g);
                kept.push(s);
            }
            Err(GraphError::Empty(id)) => {
                log::warn!("sample {id} has an empty graph; skipped");
                skipped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((kept, out, skipped))
}
