use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    ensemble_predict, evaluate, evaluate_predictions, train, EpochLog, ModelConfig, ModelError, ModelParams, Propagation,
    PreparedSample, Result, TrainConfig,
};
use crate::dataset::Sample;
use crate::encoder::EmbeddingStore;
use crate::graph::{EntityGraph, RelationType};

/// The ablation rows, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    FullEnsemble,
    FullSingle,
    StaticWithRgcn,
    StaticWithoutRgcn,
    NoRgcn,
    NoRelationTypes,
    NoDocBased,
    NoMatch,
    NoCoref,
    NoComplement,
    InducedEdges,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::FullEnsemble,
        Variant::FullSingle,
        Variant::StaticWithRgcn,
        Variant::StaticWithoutRgcn,
        Variant::NoRgcn,
        Variant::NoRelationTypes,
        Variant::NoDocBased,
        Variant::NoMatch,
        Variant::NoCoref,
        Variant::NoComplement,
        Variant::InducedEdges,
    ];

    /// Row label as printed in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::FullEnsemble => "full (ensemble)",
            Variant::FullSingle => "full (single)",
            Variant::StaticWithRgcn => "GloVe with R-GCN",
            Variant::StaticWithoutRgcn => "GloVe w/o R-GCN",
            Variant::NoRgcn => "No R-GCN",
            Variant::NoRelationTypes => "No relation types",
            Variant::NoDocBased => "No DOC-BASED",
            Variant::NoMatch => "No MATCH",
            Variant::NoCoref => "No COREF",
            Variant::NoComplement => "No COMPLEMENT",
            Variant::InducedEdges => "Induced edges",
        }
    }

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Variant::FullEnsemble => "full-ensemble",
            Variant::FullSingle => "full",
            Variant::StaticWithRgcn => "static",
            Variant::StaticWithoutRgcn => "static-no-rgcn",
            Variant::NoRgcn => "no-rgcn",
            Variant::NoRelationTypes => "no-relation-types",
            Variant::NoDocBased => "no-doc-based",
            Variant::NoMatch => "no-match",
            Variant::NoCoref => "no-coref",
            Variant::NoComplement => "no-complement",
            Variant::InducedEdges => "induced",
        }
    }

    pub fn uses_static(self) -> bool {
        matches!(self, Variant::StaticWithRgcn | Variant::StaticWithoutRgcn)
    }

    pub fn config(self, base: &ModelConfig) -> ModelConfig {
        let mut c = *base;
        match self {
            Variant::FullEnsemble | Variant::FullSingle | Variant::StaticWithRgcn => {}
            Variant::StaticWithoutRgcn | Variant::NoRgcn => c.layers = 0,
            Variant::NoRelationTypes => c.propagation = Propagation::Untyped,
            Variant::NoDocBased => c.relations = c.relations.without(RelationType::DocBased),
            Variant::NoMatch => c.relations = c.relations.without(RelationType::Match),
            Variant::NoCoref => c.relations = c.relations.without(RelationType::Coref),
            Variant::NoComplement => c.relations = c.relations.without(RelationType::Complement),
            Variant::InducedEdges => c.propagation = Propagation::Induced,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// Inputs shared by every variant.
pub struct AblationSetup<'a> {
    pub train: &'a [Sample],
    pub dev: &'a [Sample],
    pub train_graphs: &'a [EntityGraph],
    pub dev_graphs: &'a [EntityGraph],
    pub store: &'a EmbeddingStore,
    /// Context-free vectors for the static-embedding rows.
    pub static_store: &'a EmbeddingStore,
    /// Explains where `static_store` came from, copied into those rows.
    pub static_note: String,
    pub base: ModelConfig,
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub masked: bool,
    /// Dev accuracy per seed (one value for the ensemble row).
    pub accuracies: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub note: String,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

fn prepare(samples: &[Sample], graphs: &[EntityGraph], store: &EmbeddingStore, config: &ModelConfig) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .zip(graphs)
        .map(|(s, g)| PreparedSample::new(s, g, store, config))
        .collect()
}

/// Trains and evaluates every requested variant once per seed. The ensemble
/// row combines the single-model runs of the same seeds.
pub fn run_ablation(
    setup: &AblationSetup<'_>,
    variants: &[Variant],
    mut progress: impl FnMut(Variant, u64, &EpochLog),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut singles: Option<(Vec<ModelParams>, Vec<PreparedSample>)> = None;
    let train_full = |progress: &mut dyn FnMut(Variant, u64, &EpochLog)| -> Result<(Vec<ModelParams>, Vec<PreparedSample>)> {
        let config = Variant::FullSingle.config(&setup.base);
        let train_set = prepare(setup.train, setup.train_graphs, setup.store, &config)?;
        let dev_set = prepare(setup.dev, setup.dev_graphs, setup.store, &config)?;
        let mut models = Vec::new();
        for &seed in &setup.seeds {
            let cfg = TrainConfig { seed, ..setup.training };
            let out = train(ModelParams::new(config, seed), &train_set, &dev_set, &cfg, |e| {
                progress(Variant::FullSingle, seed, e)
            })?;
            models.push(out.params);
        }
        Ok((models, dev_set))
    };

    for &variant in variants {
        let mut note = String::new();
        let accuracies = match variant {
            Variant::NoCoref if setup.masked => {
                note = "skipped: no coreference edges in masked mode".into();
                Vec::new()
            }
            Variant::FullSingle | Variant::FullEnsemble => {
                if singles.is_none() {
                    singles = Some(train_full(&mut progress)?);
                }
                let (models, dev_set) = singles.as_ref().expect("trained");
                if variant == Variant::FullSingle {
                    models
                        .iter()
                        .map(|m| evaluate(m, dev_set).map(|r| r.accuracy))
                        .collect::<Result<_>>()?
                } else {
                    let member_preds: Vec<Vec<_>> = models
                        .iter()
                        .map(|m| dev_set.iter().map(|s| m.predict(s)).collect::<Result<Vec<_>>>())
                        .collect::<Result<_>>()?;
                    let preds = dev_set
                        .iter()
                        .enumerate()
                        .map(|(k, s)| {
                            let members: Vec<_> = member_preds.iter().map(|p| p[k].clone()).collect();
                            ensemble_predict(s, &members)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    note = format!("product of {} members", models.len());
                    vec![evaluate_predictions(dev_set, &preds).accuracy]
                }
            }
            _ => {
                let config = variant.config(&setup.base);
                let store = if variant.uses_static() {
                    note = setup.static_note.clone();
                    setup.static_store
                } else {
                    setup.store
                };
                let train_set = prepare(setup.train, setup.train_graphs, store, &config)?;
                let dev_set = prepare(setup.dev, setup.dev_graphs, store, &config)?;
                let mut accs = Vec::new();
                for &seed in &setup.seeds {
                    let cfg = TrainConfig { seed, ..setup.training };
                    let out = train(ModelParams::new(config, seed), &train_set, &dev_set, &cfg, |e| {
                        progress(variant, seed, e)
                    })?;
                    accs.push(out.best_dev_accuracy);
                }
                accs
            }
        };
        let (mean, std) = mean_std(&accuracies);
        rows.push(AblationRow {
            variant,
            masked: setup.masked,
            accuracies,
            mean,
            std,
            note,
        });
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "variant,mode,mean,std,runs,note";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.label(),
            if r.masked { "masked" } else { "unmasked" },
            fmt(r.mean),
            fmt(r.std),
            r.accuracies.len(),
            r.note.replace(',', ";"),
        ));
    }
    out
}
