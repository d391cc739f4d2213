mod common;

use common::*;
use entity_gcn::model::{ModelParams, Propagation, ScoreHead};
use entity_gcn::tensor::{AffineBlock, Parameters, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_blocks(checks: &[BlockCheck], expected: &[&str]) {
    for c in checks {
        assert!(c.max_rel_err < TOL, "{}: rel err {:e}", c.name, c.max_rel_err);
    }
    for name in expected {
        assert!(checks.iter().any(|c| c.name == *name), "block {name} not checked");
    }
}

#[test]
fn every_block_of_the_typed_model() {
    let (s, g) = four_node_graph();
    assert_eq!(g.node_count(), 4);
    let config = tiny_config();
    let (_, p) = prepared(&s, &g, &config);
    let params = ModelParams::new(config, 3);
    let checks = finite_difference_check(&params, &p, H);
    assert_blocks(
        &checks,
        &[
            "query RNN",
            "mention projection",
            "f_x",
            "f_s",
            "f_r[DOC-BASED]",
            "f_r[MATCH]",
            "f_r[COREF]",
            "f_r[COMPLEMENT]",
            "f_a",
            "f_o",
        ],
    );
}

#[test]
fn implicit_complement_and_affine_head() {
    let (s, g) = four_node_graph();
    let config = entity_gcn::model::ModelConfig {
        complement_threshold: 0,
        head: ScoreHead::Affine,
        ..tiny_config()
    };
    let (_, p) = prepared(&s, &g, &config);
    assert!(p.adjacency.implicit.is_some());
    let checks = finite_difference_check(&ModelParams::new(config, 5), &p, H);
    assert_blocks(&checks, &["f_r[COMPLEMENT]", "f_o"]);
}

#[test]
fn induced_edge_scorer() {
    let (s, g) = four_node_graph();
    let config = entity_gcn::model::ModelConfig {
        propagation: Propagation::Induced,
        ..tiny_config()
    };
    let (_, p) = prepared(&s, &g, &config);
    let checks = finite_difference_check(&ModelParams::new(config, 8), &p, H);
    assert_blocks(&checks, &["W_e", "f_r[DOC-BASED]", "f_a"]);
}

#[test]
fn random_three_layer_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let blocks: Vec<AffineBlock> = [(5, 4), (4, 3), (3, 1)]
        .iter()
        .map(|&(i, o)| AffineBlock::xavier(i, o, &mut rng))
        .collect();
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |bs: &[AffineBlock]| -> f64 {
        let mut v = x.clone();
        for (k, b) in bs.iter().enumerate() {
            v = b.apply(&v).unwrap();
            if k < 2 {
                v = v.iter().map(|z| if k == 0 { z.tanh() } else { 1.0 / (1.0 + (-z).exp()) }).collect();
            }
        }
        v[0] * v[0]
    };
    let mut tape = Tape::new();
    let bound: Vec<_> = blocks.iter().map(|b| b.bind(&mut tape)).collect();
    let mut v = tape.constant(Tensor::vector(x.clone()));
    for (k, b) in bound.iter().enumerate() {
        v = tape.affine(v, *b).unwrap();
        if k == 0 {
            v = tape.tanh(v).unwrap();
        } else if k == 1 {
            v = tape.sigmoid(v).unwrap();
        }
    }
    let sq = tape.mul(v, v).unwrap();
    let l = tape.sum(sq).unwrap();
    assert!((tape.value(l).item() - loss(&blocks)).abs() < 1e-14);
    let grads = tape.backward(l).unwrap().param_grads(&tape);
    let mut k = 0;
    for (bi, b) in blocks.iter().enumerate() {
        for which in 0..2 {
            let len = if which == 0 { b.weight.len() } else { b.bias.len() };
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut bs = blocks.clone();
                    let t = if which == 0 { &mut bs[bi].weight } else { &mut bs[bi].bias };
                    t.data_mut()[j] += delta;
                    loss(&bs)
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let err = rel_err(grads[k].data()[j], numeric);
                assert!(err < TOL, "block {bi}/{which}[{j}]: {err:e}");
            }
            k += 1;
        }
    }
}
