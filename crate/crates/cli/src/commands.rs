use std::fs;
use std::path::{Path, PathBuf};

use entity_gcn::dataset::{dataset_stats, mask_dataset, split_check as check_split, tokenize, write_dataset, Sample};
use entity_gcn::encoder::{hash_embed, EmbeddingStore};
use entity_gcn::graph::{graph_report, GraphOptions, GraphReport};
use entity_gcn::model::{
    ablation_csv, correlation_analysis, ensemble_predict, evaluate_predictions, load_checkpoint, predict_all,
    run_ablation, save_checkpoint, train as fit, AblationSetup, CheckpointMeta, EpochLog, ModelConfig, ModelParams,
    Prediction, PreparedSample, TrainConfig, Variant,
};
use entity_gcn::synthetic::{generate, SyntheticConfig};
use entity_gcn::tensor::AdamConfig;
use serde_json::json;

use crate::failure::Failure;
use crate::inputs::{graphs, load_chains, load_samples, model_config, variants, EmbedSource};
use crate::{DataArgs, EmbedArgs, GraphArgs, ModelArgs, TrainArgs};

type Result<T = ()> = std::result::Result<T, Failure>;

/// Machine-readable progress on stdout, one object per line.
fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn epoch_line(e: &EpochLog) -> serde_json::Value {
    json!({
        "event": "epoch",
        "epoch": e.epoch,
        "loss": e.loss,
        "dev_accuracy": e.dev_accuracy,
        "floor_events": e.floor_events,
        "improved": e.improved,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Written next to the target and renamed so readers never see half a file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn stats(dataset: &Path, out: Option<&Path>) -> Result {
    let samples = load_samples(dataset)?;
    let s = dataset_stats(&samples)?;
    emit(json!({ "event": "stats", "stats": s }));
    if let Some(out) = out {
        write(out, s.to_csv())?;
    }
    Ok(())
}

fn graph_options(graph: &GraphArgs, config: Option<&ModelConfig>) -> GraphOptions {
    GraphOptions {
        masked: graph.masked,
        complement_threshold: config.map_or(GraphOptions::default().complement_threshold, |c| c.complement_threshold),
    }
}

pub fn build_graphs(dataset: &Path, graph: &GraphArgs, out: &Path) -> Result {
    let samples = load_samples(dataset)?;
    let chains = load_chains(graph)?;
    let (_, built, skipped) = graphs(samples, chains.as_ref(), &graph_options(graph, None))?;
    let mut dumps = String::new();
    let mut csv = format!("{}\n", GraphReport::CSV_HEADER);
    for g in &built {
        dumps.push_str(&serde_json::to_string(&g.to_dump())?);
        dumps.push('\n');
        csv.push_str(&graph_report(g).csv_row());
        csv.push('\n');
    }
    fs::create_dir_all(out)?;
    write(&out.join("graphs.jsonl"), dumps)?;
    write(&out.join("graph_report.csv"), csv)?;
    emit(json!({ "event": "graphs", "built": built.len(), "skipped": skipped }));
    Ok(())
}

fn prepare(
    samples: Vec<Sample>,
    source: &EmbedSource,
    graph: &GraphArgs,
    config: &ModelConfig,
) -> Result<(Vec<PreparedSample>, usize)> {
    let chains = load_chains(graph)?;
    let (samples, built, skipped) = graphs(samples, chains.as_ref(), &graph_options(graph, Some(config)))?;
    let store = source.store(&samples)?;
    let prepared = samples
        .iter()
        .zip(&built)
        .map(|(s, g)| PreparedSample::new(s, g, &store, config))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((prepared, skipped))
}

fn train_config(t: &TrainArgs) -> Result<TrainConfig> {
    if t.batch == 0 {
        return Err(Failure::usage("--batch must be at least 1"));
    }
    if !(t.lr > 0.0 && t.lr.is_finite()) {
        return Err(Failure::usage("--lr must be positive"));
    }
    Ok(TrainConfig {
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        batch: t.batch,
        epochs: t.epochs,
        patience: t.patience,
        seed: t.seed,
    })
}

pub fn train(data: &DataArgs, model: &ModelArgs, training: &TrainArgs, out: &Path) -> Result {
    let variant = match model.variants.as_slice() {
        [] => Variant::FullSingle,
        [one] => one.parse::<Variant>()?,
        _ => return Err(Failure::usage("train takes at most one --ablate variant")),
    };
    if variant == Variant::FullEnsemble {
        return Err(Failure::usage("train one member at a time and combine them with `ensemble`"));
    }
    let source = EmbedSource::from_args(&data.embed, None)?;
    let config = variant.config(&model_config(model, &source)?);
    let tc = train_config(training)?;
    let (train_set, skipped_train) = prepare(load_samples(&data.dataset)?, &source, &data.graph, &config)?;
    let (dev_set, skipped_dev) = prepare(load_samples(&data.dev)?, &source, &data.graph, &config)?;
    emit(json!({
        "event": "start",
        "variant": variant.name(),
        "train": train_set.len(),
        "dev": dev_set.len(),
        "skipped": skipped_train + skipped_dev,
        "config": config,
    }));
    let outcome = fit(ModelParams::new(config, tc.seed), &train_set, &dev_set, &tc, |e| emit(epoch_line(e)))?;
    let meta = CheckpointMeta {
        epochs_trained: outcome.log.len(),
        adam_steps: outcome.adam_steps,
        ..CheckpointMeta::untrained(config, tc.seed)
    };
    save_checkpoint(out, &outcome.params, &meta)?;
    emit(json!({
        "event": "done",
        "best_epoch": outcome.best_epoch,
        "best_dev_accuracy": outcome.best_dev_accuracy,
        "checkpoint": out,
    }));
    Ok(())
}

/// Evaluates one checkpoint, or the product-rule ensemble of several.
pub fn eval(dataset: &Path, embed: &EmbedArgs, graph: &GraphArgs, checkpoints: &[PathBuf], out: &Path) -> Result {
    let mut members = Vec::new();
    for path in checkpoints {
        let (params, _) = load_checkpoint(path)?;
        members.push(params);
    }
    let config = members[0].config;
    if members.iter().any(|m| m.config.dims.raw != config.dims.raw) {
        return Err(Failure::usage("ensemble members expect different embedding widths"));
    }
    if members.iter().any(|m| m.config.complement_threshold != config.complement_threshold) {
        log::warn!("members differ in complement threshold; using the first member's");
    }
    let source = EmbedSource::from_args(embed, Some(config.dims.raw))?;
    let samples = load_samples(dataset)?;
    let chains = load_chains(graph)?;
    let (samples, built, skipped) = graphs(samples, chains.as_ref(), &graph_options(graph, Some(&config)))?;
    let store = source.store(&samples)?;

    let mut per_member: Vec<(Vec<PreparedSample>, Vec<Prediction>)> = Vec::new();
    for m in &members {
        let prepared = prep_all(&samples, &built, &store, &m.config)?;
        let preds = predict_all(m, &prepared)?;
        per_member.push((prepared, preds));
    }
    let (prepared, _) = &per_member[0];
    let predictions: Vec<Prediction> = if members.len() == 1 {
        per_member[0].1.clone()
    } else {
        prepared
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let votes: Vec<Prediction> = per_member.iter().map(|(_, p)| p[k].clone()).collect();
                ensemble_predict(s, &votes)
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let report = evaluate_predictions(prepared, &predictions);
    let correlation = correlation_analysis(&report.outcomes);
    fs::create_dir_all(out)?;
    write(&out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&out.join("relations.csv"), report.relations_csv())?;
    write(&out.join("correlation.csv"), correlation.to_csv())?;
    let mut lines = String::new();
    for (s, p) in prepared.iter().zip(&predictions) {
        lines.push_str(&serde_json::to_string(&json!({
            "id": s.id,
            "predicted": p.predicted,
            "probabilities": p.probabilities,
        }))?);
        lines.push('\n');
    }
    write(&out.join("predictions.jsonl"), lines)?;
    emit(json!({
        "event": "eval",
        "members": members.len(),
        "samples": report.samples,
        "skipped": skipped,
        "accuracy": report.accuracy,
        "p_at_2": report.p_at_2,
        "p_at_5": report.p_at_5,
        "unanswerable": report.unanswerable,
        "pearson_candidates": correlation.pearson_candidates,
        "pearson_nodes": correlation.pearson_nodes,
    }));
    Ok(())
}

fn prep_all(
    samples: &[Sample],
    graphs: &[entity_gcn::graph::EntityGraph],
    store: &EmbeddingStore,
    config: &ModelConfig,
) -> Result<Vec<PreparedSample>> {
    Ok(samples
        .iter()
        .zip(graphs)
        .map(|(s, g)| PreparedSample::new(s, g, store, config))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn ablate(data: &DataArgs, model: &ModelArgs, training: &TrainArgs, runs: usize, out: &Path) -> Result {
    if runs == 0 {
        return Err(Failure::usage("--runs must be at least 1"));
    }
    let chosen = variants(&model.variants)?;
    let source = EmbedSource::from_args(&data.embed, None)?;
    let base = model_config(model, &source)?;
    let tc = train_config(training)?;
    let chains = load_chains(&data.graph)?;
    let options = graph_options(&data.graph, Some(&base));
    let (train_s, train_g, _) = graphs(load_samples(&data.dataset)?, chains.as_ref(), &options)?;
    let (dev_s, dev_g, _) = graphs(load_samples(&data.dev)?, chains.as_ref(), &options)?;
    let all: Vec<Sample> = train_s.iter().chain(&dev_s).cloned().collect();
    let store = source.store(&all)?;
    // Static rows need context-free vectors of the same width.
    let (static_store, static_note) = match &source {
        EmbedSource::Static(_) | EmbedSource::Hash { .. } => (store.clone().into_owned(), String::new()),
        EmbedSource::File(_) => (
            hash_embed(&all, source.dim(), data.embed.hash_seed, tokenize),
            "static vectors unavailable: hash vectors substituted".to_string(),
        ),
    };
    let setup = AblationSetup {
        train: &train_s,
        dev: &dev_s,
        train_graphs: &train_g,
        dev_graphs: &dev_g,
        store: &store,
        static_store: &static_store,
        static_note,
        base,
        training: tc,
        seeds: (0..runs as u64).map(|k| tc.seed + k).collect(),
        masked: data.graph.masked,
    };
    let rows = run_ablation(&setup, &chosen, |v, seed, e| {
        let mut line = epoch_line(e);
        line["variant"] = json!(v.name());
        line["seed"] = json!(seed);
        emit(line);
    })?;
    write(out, ablation_csv(&rows))?;
    for r in &rows {
        emit(json!({ "event": "ablation", "row": r }));
    }
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

pub fn mask(dataset: &Path, seed: u64, out: &Path) -> Result {
    let samples = load_samples(dataset)?;
    let (masked, table) = mask_dataset(&samples, seed, tokenize);
    write_dataset(out, &masked)?;
    let table_path = sidecar(out, ".mask.json");
    write(&table_path, serde_json::to_string_pretty(&table)?)?;
    emit(json!({ "event": "mask", "samples": masked.len(), "table": table_path }));
    Ok(())
}

pub fn synth(config: SyntheticConfig, out: &Path) -> Result {
    if config.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let data = generate(&config, &format!("syn{}-", config.seed));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_dataset(out, &data)?;
    emit(json!({ "event": "synth", "samples": data.len(), "out": out }));
    Ok(())
}

pub fn split_check(train: &Path, dev: &Path) -> Result {
    let report = check_split(&load_samples(train)?, &load_samples(dev)?);
    emit(json!({ "event": "split_check", "report": report }));
    if report.disjoint() {
        Ok(())
    } else {
        Err(Failure::data(anyhow::anyhow!(
            "{} dev ids also occur in train",
            report.overlapping_ids.len()
        )))
    }
}
