//! Generator for a synthetic two-hop task whose answer is only reachable by
//! following a chain across two documents.
//!
//! Document A states `<subject> <rel1> <bridge>` and document B states
//! `<bridge> <rel2> <answer>`. A third document mentions the answer on its
//! own and a fourth does the same for one distractor (the mirror), which
//! also appears next to other distractors. The remaining documents list
//! distractor candidates, each used once. Entity names are opaque tokens, so
//! nothing about a mention in isolation tells answer from distractor: answer
//! and mirror look alike until the bridge, and its match in the subject's
//! document, come into view.
//!
//! The optional decoy chain (`d1 - d2`, `d2 - d3`) copies the chain shape
//! without the subject, so only recognising the subject from its hash vector
//! separates answer from decoy. That is much slower to learn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Query, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub candidates: usize,
    pub documents: usize,
    /// Size of the entity name pool.
    pub entities: usize,
    /// Number of distinct query relations.
    pub relations: usize,
    /// Distractor documents `d1 - d2`, `d2 - d3` mimicking the chain.
    pub decoy_chain: bool,
    /// An extra document mentions the answer alone, and another does the
    /// same for one distractor, so a lone mention says nothing by itself.
    pub answer_repeat: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            candidates: 8,
            documents: 6,
            entities: 1_000_000,
            relations: 8,
            decoy_chain: false,
            answer_repeat: true,
            seed: 0,
        }
    }
}

fn statement(a: &str, verb: &str, b: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    let fillers = ["the", "of", "was", "in", "a", "and"];
    let mut doc = vec![a.to_string(), verb.to_string()];
    if rng.random_bool(0.5) {
        doc.push(fillers[rng.random_range(0..fillers.len())].to_string());
    }
    doc.push(b.to_string());
    doc.push(".".to_string());
    doc
}

/// `<e1> <verb> <e2> , <e3> ... .`; no entity at all gives a filler sentence.
fn listing(entities: &[&String], verb: &str) -> Vec<String> {
    let mut doc = Vec::new();
    for (k, e) in entities.iter().enumerate() {
        match k {
            0 => {}
            1 => doc.push(verb.to_string()),
            _ => doc.push(",".to_string()),
        }
        doc.push(e.to_string());
    }
    if entities.len() < 2 {
        doc.extend(["the", verb, "of"].map(String::from));
    }
    doc.push(".".to_string());
    doc
}

/// Builds `config.samples` samples with ids `<prefix><k>`.
pub fn generate(config: &SyntheticConfig, prefix: &str) -> Vec<Sample> {
    assert!(config.candidates >= 4 && config.documents >= 2, "need at least 4 candidates and 2 documents");
    assert!(config.entities > config.candidates + 1, "entity pool too small");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.samples)
        .map(|k| {
            let picked = rand::seq::index::sample(&mut rng, config.entities, config.candidates + 1);
            let names: Vec<String> = picked.iter().map(|e| format!("ent{e}")).collect();
            let subject = names[0].clone();
            let bridge = names[1].clone();
            let answer = names[2].clone();
            let distractors = &names[3..];
            let rel = rng.random_range(0..config.relations);
            let (hop1, hop2) = (format!("p{rel}"), format!("q{rel}"));

            let mut docs = vec![
                statement(&subject, &hop1, &bridge, &mut rng),
                statement(&bridge, &hop2, &answer, &mut rng),
            ];
            let mut free: Vec<&String> = distractors.iter().collect();
            let mut room = config.documents - 2;
            let verb = |rng: &mut ChaCha8Rng| format!("v{}", rng.random_range(0..config.relations));
            if config.decoy_chain && room >= 2 && free.len() >= 3 {
                let (d1, d2, d3) = (free.remove(0), free.remove(0), free.remove(0));
                let (v1, v2) = (format!("p{}", rng.random_range(0..config.relations)), format!("q{}", rng.random_range(0..config.relations)));
                docs.push(statement(d1, &v1, d2, &mut rng));
                docs.push(statement(d2, &v2, d3, &mut rng));
                room -= 2;
            }
            if config.answer_repeat && room >= 3 && free.len() >= 2 {
                // The mirror stays in `free` and so also lands in a filler
                // document next to other distractors.
                docs.push(listing(&[&answer], &verb(&mut rng)));
                docs.push(listing(&[free[0]], &verb(&mut rng)));
                room -= 2;
            }
            // Distractors are never reused, so no accidental chains form.
            while room > 0 {
                let take = free.len().div_ceil(room);
                let group: Vec<&String> = free.drain(..take).collect();
                docs.push(listing(&group, &verb(&mut rng)));
                room -= 1;
            }
            docs.shuffle(&mut rng);
            let mut candidates: Vec<String> = names[1..].to_vec();
            candidates.shuffle(&mut rng);
            Sample {
                id: format!("{prefix}{k}"),
                query: Query::new(&format!("r{rel}"), &subject),
                documents: docs,
                candidates,
                answer: Some(answer),
            }
        })
        .collect()
}
