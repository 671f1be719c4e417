//! How stack depth interacts with k = 2 on an unbranched stereocenter.
//!
//! Looking down each of the four center bonds, the other three substituents
//! form a 3-cycle. Together the four cycles list every ordered substituent
//! pair exactly once, for either hand. A k = 2 layer therefore adds the same
//! multiset of pair messages to the center-outgoing nodes of both mirror
//! images, and mean pooling after one or two layers cannot tell them apart.
//! From the third layer on, differing node states feed the nonlinear messages.
//! Per-node layer norm is itself nonlinear and breaks the cancellation early.

use chienn::chienn::{GraphPlan, LayerStack, StackConfig};
use chienn::datagen::{gen_tetrahedral_with, TetraConfig};
use chienn::molgraph::mirror;
use chienn::ordering::ParallelPolicy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mirror_gap(k: usize, layers: usize, layer_norm: bool, seed: u64) -> f64 {
    let cfg = TetraConfig {
        branch_prob: 0.0,
        ..TetraConfig::default()
    };
    let g = gen_tetrahedral_with(seed, 1, &cfg).unwrap().remove(0).graph;
    let a = GraphPlan::new(&g, ParallelPolicy::Reject).unwrap();
    let b = GraphPlan::new(&mirror(&g), ParallelPolicy::Reject).unwrap();
    let config = StackConfig {
        k,
        hidden: 16,
        hidden_mid: 16,
        layers,
        residual: false,
        layer_norm,
        ..StackConfig::default()
    };
    let stack = LayerStack::init(&mut ChaCha8Rng::seed_from_u64(seed), config, a.input_dim()).unwrap();
    let (ea, eb) = (stack.graph_embedding(&a).unwrap(), stack.graph_embedding(&b).unwrap());
    let scale = ea.iter().chain(&eb).fold(0.0f64, |m, v| m.max(v.abs()));
    ea.iter().zip(&eb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn k2_needs_three_layers_on_a_bare_center() {
    for seed in 0..20 {
        assert!(mirror_gap(2, 1, false, seed) < 1e-12, "seed {seed}");
        assert!(mirror_gap(2, 2, false, seed) < 1e-12, "seed {seed}");
        assert!(mirror_gap(2, 3, false, seed) > 1e-9, "seed {seed}");
    }
}

#[test]
fn layer_norm_exposes_k2_after_one_layer() {
    for seed in 0..20 {
        assert!(mirror_gap(2, 1, true, seed) > 1e-9, "seed {seed}");
    }
}

#[test]
fn k3_separates_after_one_layer() {
    for seed in 0..20 {
        assert!(mirror_gap(3, 1, false, seed) > 1e-6, "seed {seed}");
    }
}
