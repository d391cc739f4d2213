use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, ModelError, ModelParams, Prediction, PreparedSample, Result};

/// Per-sample result, enough to rebuild every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: String,
    pub relation: String,
    pub candidates: usize,
    pub nodes: usize,
    pub predicted: usize,
    pub gold: Option<usize>,
    /// 1-based rank of the gold answer.
    pub gold_rank: Option<usize>,
    pub answerable: bool,
}

impl Outcome {
    pub fn correct(&self) -> bool {
        self.gold == Some(self.predicted)
    }

    fn within(&self, k: usize) -> bool {
        self.gold_rank.is_some_and(|r| r <= k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation: String,
    pub accuracy: f64,
    pub p_at_2: f64,
    pub p_at_5: f64,
    pub mean_candidates: f64,
    pub std_candidates: f64,
    pub support: usize,
    /// At least 50 samples and on average at least 5 candidates.
    pub headline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub p_at_2: f64,
    pub p_at_5: f64,
    pub unanswerable: usize,
    pub relations: Vec<RelationRow>,
    pub outcomes: Vec<Outcome>,
}

pub const RELATION_CSV_HEADER: &str = "relation,accuracy,p_at_2,p_at_5,mean_candidates,std_candidates,support,headline";

impl EvalReport {
    pub fn relations_csv(&self) -> String {
        let mut out = String::from(RELATION_CSV_HEADER);
        out.push('\n');
        for r in &self.relations {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.4},{:.4},{},{}\n",
                r.relation, r.accuracy, r.p_at_2, r.p_at_5, r.mean_candidates, r.std_candidates, r.support, r.headline
            ));
        }
        out
    }
}

fn rate(outcomes: &[&Outcome], f: impl Fn(&Outcome) -> bool) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| f(o)).count() as f64 / outcomes.len() as f64
}

pub fn outcome(sample: &PreparedSample, p: &Prediction) -> Outcome {
    Outcome {
        id: sample.id.clone(),
        relation: sample.relation.clone(),
        candidates: sample.candidate_count(),
        nodes: sample.node_count(),
        predicted: p.predicted,
        gold: sample.gold,
        gold_rank: sample.gold.map(|g| p.rank_of(g)),
        answerable: p.answerable,
    }
}

pub fn evaluate_predictions(samples: &[PreparedSample], predictions: &[Prediction]) -> EvalReport {
    let outcomes: Vec<Outcome> = samples.iter().zip(predictions).map(|(s, p)| outcome(s, p)).collect();
    report_from_outcomes(outcomes)
}

pub fn report_from_outcomes(outcomes: Vec<Outcome>) -> EvalReport {
    let all: Vec<&Outcome> = outcomes.iter().collect();
    let mut groups: BTreeMap<&str, Vec<&Outcome>> = BTreeMap::new();
    for o in &outcomes {
        groups.entry(&o.relation).or_default().push(o);
    }
    let relations = groups
        .into_iter()
        .map(|(rel, os)| {
            let n = os.len() as f64;
            let mean = os.iter().map(|o| o.candidates as f64).sum::<f64>() / n;
            let var = os.iter().map(|o| (o.candidates as f64 - mean).powi(2)).sum::<f64>() / n;
            RelationRow {
                relation: rel.to_string(),
                accuracy: rate(&os, Outcome::correct),
                p_at_2: rate(&os, |o| o.within(2)),
                p_at_5: rate(&os, |o| o.within(5)),
                mean_candidates: mean,
                std_candidates: var.sqrt(),
                support: os.len(),
                headline: os.len() >= 50 && mean >= 5.0,
            }
        })
        .collect();
    EvalReport {
        samples: outcomes.len(),
        accuracy: rate(&all, Outcome::correct),
        p_at_2: rate(&all, |o| o.within(2)),
        p_at_5: rate(&all, |o| o.within(5)),
        unanswerable: outcomes.iter().filter(|o| !o.answerable).count(),
        relations,
        outcomes,
    }
}

pub fn predict_all(params: &ModelParams, samples: &[PreparedSample]) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| params.predict(s)).collect()
}

pub fn evaluate(params: &ModelParams, samples: &[PreparedSample]) -> Result<EvalReport> {
    let predictions = predict_all(params, samples)?;
    Ok(evaluate_predictions(samples, &predictions))
}

/// Product rule over member distributions, computed as a sum of logs and
/// renormalized. Candidates with zero probability under any member get zero.
pub fn ensemble_probabilities(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members.first().ok_or(ModelError::EmptyEnsemble)?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(ModelError::CandidateMismatch("<probabilities>".into()));
    }
    let logs: Vec<f64> = (0..first.len())
        .map(|c| members.iter().map(|m| m[c].ln()).sum())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(vec![0.0; first.len()]);
    }
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Ensemble prediction for one sample from member predictions.
pub fn ensemble_predict(sample: &PreparedSample, members: &[Prediction]) -> Result<Prediction> {
    if members.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    if members.iter().any(|m| m.probabilities.len() != sample.candidate_count()) {
        return Err(ModelError::CandidateMismatch(sample.id.clone()));
    }
    let probs: Vec<Vec<f64>> = members.iter().map(|m| m.probabilities.clone()).collect();
    let probabilities = ensemble_probabilities(&probs)?;
    let answerable = members.iter().all(|m| m.answerable);
    Ok(Prediction {
        logits: probabilities.iter().map(|p| p.ln()).collect(),
        predicted: argmax(&probabilities),
        probabilities,
        best_node: members[0].best_node.clone(),
        answerable,
    })
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub kind: String,
    /// Candidate count, or mean node count of a node-count decile.
    pub size: f64,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson_candidates: Option<f64>,
    pub pearson_nodes: Option<f64>,
    pub buckets: Vec<Bucket>,
}

pub const MIN_BUCKET: usize = 10;

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,size,samples,accuracy\n");
        for b in &self.buckets {
            out.push_str(&format!("{},{:.4},{},{:.6}\n", b.kind, b.size, b.samples, b.accuracy));
        }
        out
    }
}

fn bucket_correlation(buckets: &[Bucket]) -> Option<f64> {
    let kept: Vec<&Bucket> = buckets.iter().filter(|b| b.samples >= MIN_BUCKET).collect();
    let xs: Vec<f64> = kept.iter().map(|b| b.size).collect();
    let ys: Vec<f64> = kept.iter().map(|b| b.accuracy).collect();
    pearson(&xs, &ys)
}

/// Accuracy against candidate count (exact buckets) and node count
/// (deciles), with Pearson's r over buckets holding at least ten samples.
pub fn correlation_analysis(outcomes: &[Outcome]) -> CorrelationReport {
    let labelled: Vec<&Outcome> = outcomes.iter().filter(|o| o.gold.is_some()).collect();
    let mut by_cand: BTreeMap<usize, Vec<&Outcome>> = BTreeMap::new();
    for o in &labelled {
        by_cand.entry(o.candidates).or_default().push(o);
    }
    let cand: Vec<Bucket> = by_cand
        .into_iter()
        .map(|(c, os)| Bucket {
            kind: "candidates".into(),
            size: c as f64,
            samples: os.len(),
            accuracy: rate(&os, Outcome::correct),
        })
        .collect();

    let mut sorted = labelled.clone();
    sorted.sort_by_key(|o| o.nodes);
    let n = sorted.len();
    let mut nodes = Vec::new();
    for d in 0..10 {
        let part = &sorted[d * n / 10..(d + 1) * n / 10];
        if part.is_empty() {
            continue;
        }
        nodes.push(Bucket {
            kind: "nodes".into(),
            size: part.iter().map(|o| o.nodes as f64).sum::<f64>() / part.len() as f64,
            samples: part.len(),
            accuracy: rate(part, Outcome::correct),
        });
    }
    CorrelationReport {
        pearson_candidates: bucket_correlation(&cand),
        pearson_nodes: bucket_correlation(&nodes),
        buckets: cand.into_iter().chain(nodes).collect(),
    }
}
