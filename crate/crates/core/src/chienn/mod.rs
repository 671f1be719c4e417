//! Order-sensitive message passing on edge graphs.
//!
//! The free functions here evaluate single nodes on plain vectors and serve
//! as the reference path. [`LayerStack`] runs the same computation batched on
//! an autodiff [`Tape`](crate::autonn::Tape) for training.

mod params;
mod stack;

use std::collections::HashMap;

use thiserror::Error;

use crate::autonn::{self, NnError};
use crate::edgegraph::{EdgeGraph, NodeKey};
use crate::ordering::{NeighborOrder, OrderingError};

pub use params::{uniform_tensor, ChiennParams, Embedding, PsiActivation, ReadoutHead};
pub use stack::{BatchPlan, Checkpoint, GraphPlan, LayerStack, StackConfig, CHECKPOINT_SCHEMA_VERSION};

/// Per-node hidden vectors, indexed like [`EdgeGraph::nodes`].
pub type StateTable = Vec<Vec<f64>>;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChiennError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("window has {got} vectors, arity is {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("arity k must be at least 1")]
    InvalidArity,
    #[error("no neighbor order for node {0}")]
    MissingOrder(NodeKey),
    #[error("readout of an empty graph")]
    EmptyGraph,
    #[error("shift-invariant aggregation needs at least one element")]
    EmptyOrder,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
}

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<(), ChiennError> {
    if v.len() != expected {
        return Err(ChiennError::DimensionMismatch(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// `ρ(x; Σ_i φ(x; x_i))`, the permutation-invariant baseline.
///
/// Messages must have the width of `x`; with no neighbors `ρ` sees a zero vector.
pub fn vanilla_aggregate<Phi, Rho>(
    x: &[f64],
    neighbors: &[Vec<f64>],
    phi: Phi,
    rho: Rho,
) -> Result<Vec<f64>, ChiennError>
where
    Phi: Fn(&[f64], &[f64]) -> Vec<f64>,
    Rho: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let mut sum = vec![0.0; x.len()];
    for nb in neighbors {
        check_len("neighbor", nb, x.len())?;
        let m = phi(x, nb);
        check_len("message", &m, x.len())?;
        add_into(&mut sum, &m);
    }
    Ok(rho(x, &sum))
}

/// `Σ_p g(x_p, …, x_{p+d−1})` over all `d` rotations of `order`.
pub fn shift_invariant_aggregate<G>(g: G, order: &[Vec<f64>]) -> Result<Vec<f64>, ChiennError>
where
    G: Fn(&[&[f64]]) -> Vec<f64>,
{
    let d = order.len();
    if d == 0 {
        return Err(ChiennError::EmptyOrder);
    }
    let mut acc: Option<Vec<f64>> = None;
    for p in 0..d {
        let rotated: Vec<&[f64]> = (0..d).map(|i| order[(p + i) % d].as_slice()).collect();
        let term = g(&rotated);
        match &mut acc {
            None => acc = Some(term),
            Some(a) => {
                check_len("g output", &term, a.len())?;
                add_into(a, &term);
            }
        }
    }
    Ok(acc.unwrap_or_default())
}

/// Appends `k − d` zero vectors of length `width` when `d < k`.
pub fn zero_pad_order(order: &[Vec<f64>], k: usize, width: usize) -> Vec<Vec<f64>> {
    let mut out = order.to_vec();
    while out.len() < k {
        out.push(vec![0.0; width]);
    }
    out
}

/// Neighbor positions of the `d` windows summed for a node with `d`
/// neighbors; `None` marks a zero-padding slot.
///
/// For `d ≥ k`, window `p` holds positions `p, p+1, …, p+k−1 (mod d)`.
/// For `1 ≤ d < k`, window `p` holds the full rotation `p, …, p+d−1 (mod d)`
/// followed by `k − d` padding slots, which keeps the sum shift-invariant.
pub fn cyclic_windows(d: usize, k: usize) -> Vec<Vec<Option<usize>>> {
    let width = d.min(k);
    (0..d)
        .map(|p| {
            (0..k)
                .map(|i| (i < width).then_some((p + i) % d))
                .collect()
        })
        .collect()
}

/// `ψ^k(window) = W3·σ(W4·(w_0 | … | w_{k−1}) + b4) + b3`.
pub fn psi_k(params: &ChiennParams, window: &[&[f64]]) -> Result<Vec<f64>, ChiennError> {
    if window.len() != params.k {
        return Err(ChiennError::WindowLength {
            expected: params.k,
            got: window.len(),
        });
    }
    let mut concat = Vec::with_capacity(params.k * params.hidden);
    for w in window {
        check_len("window vector", w, params.hidden)?;
        concat.extend_from_slice(w);
    }
    let pre = autonn::linear(&params.w4, params.b4.data(), &concat)?;
    let act = match params.psi {
        PsiActivation::Elu => autonn::elu(&pre),
        PsiActivation::Identity => pre,
    };
    Ok(autonn::linear(&params.w3, params.b3.data(), &act)?)
}

/// New state of node `j → k` from its own state, the parallel node's state,
/// and the neighbor states in cyclic order.
pub fn chienn_update(
    params: &ChiennParams,
    x_jk: &[f64],
    x_kj: &[f64],
    order: &[&[f64]],
) -> Result<Vec<f64>, ChiennError> {
    check_len("x_jk", x_jk, params.hidden)?;
    check_len("x_kj", x_kj, params.hidden)?;
    let mut out = autonn::linear(&params.w1, params.b1.data(), x_jk)?;
    add_into(&mut out, &autonn::linear(&params.w2, params.b2.data(), x_kj)?);
    let zero = vec![0.0; params.hidden];
    for window in cyclic_windows(order.len(), params.k) {
        let slots: Vec<&[f64]> = window
            .iter()
            .map(|s| s.map_or(zero.as_slice(), |i| order[i]))
            .collect();
        add_into(&mut out, &psi_k(params, &slots)?);
    }
    Ok(out)
}

/// Initial states `A·(e_ij | x_i | x_j) + b` for every node.
pub fn embed_init(embed: &Embedding, eg: &EdgeGraph) -> Result<StateTable, ChiennError> {
    (0..eg.len())
        .map(|n| Ok(autonn::linear(&embed.w, embed.b.data(), &eg.init_input(n))?))
        .collect()
}

/// One synchronous layer update over `eg.states`; returns the new table
/// without touching `eg`.
pub fn layer_forward(
    params: &ChiennParams,
    eg: &EdgeGraph,
    orders: &[NeighborOrder],
) -> Result<StateTable, ChiennError> {
    if eg.states.len() != eg.len() {
        return Err(ChiennError::DimensionMismatch(format!(
            "{} states for {} nodes",
            eg.states.len(),
            eg.len()
        )));
    }
    let by_key: HashMap<NodeKey, &NeighborOrder> = orders.iter().map(|o| (o.node, o)).collect();
    let mut next = Vec::with_capacity(eg.len());
    for (n, node) in eg.nodes().iter().enumerate() {
        let order = by_key.get(&node.key).ok_or(ChiennError::MissingOrder(node.key))?;
        let neighbor_states = order
            .sequence
            .iter()
            .map(|k| Ok(eg.states[eg.node_index(*k).map_err(OrderingError::from)?].as_slice()))
            .collect::<Result<Vec<_>, ChiennError>>()?;
        let x_kj = &eg.states[eg.parallel_index(n)];
        next.push(chienn_update(params, &eg.states[n], x_kj, &neighbor_states)?);
    }
    Ok(next)
}

/// Mean over node states.
pub fn mean_pool(states: &[Vec<f64>]) -> Result<Vec<f64>, ChiennError> {
    let first = states.first().ok_or(ChiennError::EmptyGraph)?;
    let mut acc = vec![0.0; first.len()];
    for s in states {
        check_len("state", s, first.len())?;
        add_into(&mut acc, s);
    }
    let inv = 1.0 / states.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Mean-pool then the two-layer head.
pub fn readout(states: &[Vec<f64>], head: &ReadoutHead) -> Result<Vec<f64>, ChiennError> {
    let pooled = mean_pool(states)?;
    let hidden = autonn::elu(&autonn::linear(&head.w1, head.b1.data(), &pooled)?);
    Ok(autonn::linear(&head.w2, head.b2.data(), &hidden)?)
}

pub(crate) fn layer_norm_row(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonn::Tensor;
    use crate::edgegraph::to_edge_graph;
    use crate::molgraph::{BondOrder, MolecularGraph, Vocabulary};
    use crate::ordering::{all_orders, ParallelPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vecs(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn vanilla_empty_neighbors() {
        let out = vanilla_aggregate(&[1.0, 2.0], &[], |_, n| n.to_vec(), |x, s| {
            x.iter().zip(s).map(|(a, b)| a * 10.0 + b).collect()
        })
        .unwrap();
        assert_eq!(out, vec![10.0, 20.0]);
    }

    #[test]
    fn vanilla_identity_sum_is_order_free() {
        let a = vec![1.0, 2.0];
        let b = vec![-3.0, 0.5];
        let f = |ns: &[Vec<f64>]| vanilla_aggregate(&[0.0, 0.0], ns, |_, n| n.to_vec(), |_, s| s.to_vec()).unwrap();
        assert_eq!(f(&[a.clone(), b.clone()]), vec![-2.0, 2.5]);
        assert_eq!(f(&[b, a]), vec![-2.0, 2.5]);
    }

    #[test]
    fn vanilla_random_maps_all_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ChiennParams::init(&mut rng, 1, 4, 6).unwrap();
        let x = rand_vecs(&mut rng, 1, 4).remove(0);
        let nbs = rand_vecs(&mut rng, 5, 4);
        let phi = |x: &[f64], n: &[f64]| {
            let s: Vec<f64> = x.iter().zip(n).map(|(a, b)| a * b).collect();
            psi_k(&params, &[&s]).unwrap()
        };
        let rho = |x: &[f64], s: &[f64]| autonn::elu(&x.iter().zip(s).map(|(a, b)| a - b).collect::<Vec<_>>());
        let base = vanilla_aggregate(&x, &nbs, phi, rho).unwrap();
        let mut idx: Vec<usize> = (0..5).collect();
        let mut count = 0;
        permutohedron_heap(&mut idx, &mut |p| {
            let perm: Vec<Vec<f64>> = p.iter().map(|&i| nbs[i].clone()).collect();
            let out = vanilla_aggregate(&x, &perm, phi, rho).unwrap();
            assert!(max_abs_diff(&out, &base) < 1e-12);
            count += 1;
        });
        assert_eq!(count, 120);
    }

    /// Heap's algorithm over all permutations of `v`.
    fn permutohedron_heap(v: &mut [usize], f: &mut dyn FnMut(&[usize])) {
        fn rec(k: usize, v: &mut [usize], f: &mut dyn FnMut(&[usize])) {
            if k <= 1 {
                f(v);
                return;
            }
            for i in 0..k - 1 {
                rec(k - 1, v, f);
                if k % 2 == 0 { v.swap(i, k - 1) } else { v.swap(0, k - 1) }
            }
            rec(k - 1, v, f);
        }
        let n = v.len();
        rec(n, v, f);
    }

    #[test]
    fn vanilla_dimension_mismatch() {
        let r = vanilla_aggregate(&[0.0, 0.0], &[vec![1.0]], |_, n| n.to_vec(), |_, s| s.to_vec());
        assert!(matches!(r, Err(ChiennError::DimensionMismatch(_))));
    }

    #[test]
    fn shift_invariant_single_and_rotations() {
        let g = |xs: &[&[f64]]| -> Vec<f64> {
            let flat: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
            vec![flat.iter().enumerate().map(|(i, v)| (i as f64 + 1.0).sin() * v * v).sum::<f64>() + flat[0].exp()]
        };
        let one = vec![vec![0.3, -0.2]];
        assert_eq!(shift_invariant_aggregate(g, &one).unwrap(), g(&[&[0.3, -0.2]]));
        let (a, b, c) = (vec![1.0, 0.2], vec![-0.7, 0.4], vec![0.1, 0.9]);
        let o1 = shift_invariant_aggregate(g, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let o2 = shift_invariant_aggregate(g, &[b, c, a]).unwrap();
        assert!(max_abs_diff(&o1, &o2) < 1e-12);
        assert_eq!(shift_invariant_aggregate(g, &[]), Err(ChiennError::EmptyOrder));
    }

    #[test]
    fn shift_invariant_detects_transposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut differ = 0;
        for _ in 0..100 {
            let p = ChiennParams::init(&mut rng, 3, 3, 8).unwrap();
            let g = |xs: &[&[f64]]| psi_k(&p, xs).unwrap();
            let v = rand_vecs(&mut rng, 3, 3);
            let o1 = shift_invariant_aggregate(g, &v).unwrap();
            let o2 = shift_invariant_aggregate(g, &[v[0].clone(), v[2].clone(), v[1].clone()]).unwrap();
            if max_abs_diff(&o1, &o2) > 1e-6 {
                differ += 1;
            }
        }
        assert!(differ >= 99, "{differ}");
    }

    #[test]
    fn psi_zero_window() {
        let mut p = ChiennParams::init(&mut ChaCha8Rng::seed_from_u64(1), 2, 3, 4).unwrap();
        p.b3 = Tensor::zeros(vec![3]);
        p.b4 = Tensor::zeros(vec![4]);
        let z = [0.0; 3];
        assert_eq!(psi_k(&p, &[&z, &z]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn psi_window_length_checked() {
        let p = ChiennParams::zeros(2, 3, 4).unwrap();
        let z = [0.0; 3];
        assert_eq!(psi_k(&p, &[&z]), Err(ChiennError::WindowLength { expected: 2, got: 1 }));
    }

    #[test]
    fn psi_hand_computed() {
        let mut p = ChiennParams::zeros(2, 2, 2).unwrap();
        p.w4 = Tensor::matrix(2, 4, vec![1.0, 0.0, -1.0, 2.0, 0.0, 1.0, 1.0, -1.0]).unwrap();
        p.b4 = Tensor::vector(vec![0.0, -1.0]);
        p.w3 = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 1.0]).unwrap();
        p.b3 = Tensor::vector(vec![0.5, 0.0]);
        // W4·[1,2,-1,1] + b4 = [4, -1]; elu -> [4, e^-1 - 1]
        // W3·h + b3 = [4 + 2(e^-1 - 1) + 0.5, -4 + (e^-1 - 1)]
        let out = psi_k(&p, &[&[1.0, 2.0], &[-1.0, 1.0]]).unwrap();
        assert!((out[0] - 3.235_758_882_342_884_7).abs() < 1e-12, "{}", out[0]);
        assert!((out[1] + 4.632_120_558_828_558).abs() < 1e-12, "{}", out[1]);
    }

    #[test]
    fn padding() {
        let x0 = vec![1.0, 2.0];
        assert_eq!(zero_pad_order(&[x0.clone()], 3, 2), vec![x0.clone(), vec![0.0; 2], vec![0.0; 2]]);
        let three = vec![x0.clone(), x0.clone(), x0.clone()];
        assert_eq!(zero_pad_order(&three, 3, 2), three);
        assert_eq!(zero_pad_order(&[], 3, 2), vec![vec![0.0; 2]; 3]);
    }

    #[test]
    fn window_layouts() {
        assert!(cyclic_windows(0, 3).is_empty());
        assert_eq!(cyclic_windows(1, 3), vec![vec![Some(0), None, None]]);
        assert_eq!(cyclic_windows(2, 3), vec![vec![Some(0), Some(1), None], vec![Some(1), Some(0), None]]);
        assert_eq!(
            cyclic_windows(3, 2),
            vec![vec![Some(0), Some(1)], vec![Some(1), Some(2)], vec![Some(2), Some(0)]]
        );
    }

    #[test]
    fn update_with_no_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ChiennParams::init(&mut rng, 3, 4, 5).unwrap();
        let v = rand_vecs(&mut rng, 2, 4);
        let mut expect = autonn::linear(&p.w1, p.b1.data(), &v[0]).unwrap();
        add_into(&mut expect, &autonn::linear(&p.w2, p.b2.data(), &v[1]).unwrap());
        assert_eq!(chienn_update(&p, &v[0], &v[1], &[]).unwrap(), expect);
    }

    #[test]
    fn update_expands_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ChiennParams::init(&mut rng, 2, 4, 5).unwrap();
        let v = rand_vecs(&mut rng, 5, 4);
        let (x, xp, a, b, c) = (&v[0], &v[1], &v[2], &v[3], &v[4]);
        let mut expect = autonn::linear(&p.w1, p.b1.data(), x).unwrap();
        add_into(&mut expect, &autonn::linear(&p.w2, p.b2.data(), xp).unwrap());
        for (u, w) in [(a, b), (b, c), (c, a)] {
            add_into(&mut expect, &psi_k(&p, &[u, w]).unwrap());
        }
        let out = chienn_update(&p, x, xp, &[a, b, c]).unwrap();
        assert!(max_abs_diff(&out, &expect) < 1e-14);
    }

    #[test]
    fn update_shift_vs_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut swapped_differs = 0;
        for _ in 0..100 {
            let p = ChiennParams::init(&mut rng, 2, 4, 6).unwrap();
            let v = rand_vecs(&mut rng, 5, 4);
            let (a, b, c) = (v[2].as_slice(), v[3].as_slice(), v[4].as_slice());
            let base = chienn_update(&p, &v[0], &v[1], &[a, b, c]).unwrap();
            let shifted = chienn_update(&p, &v[0], &v[1], &[c, a, b]).unwrap();
            let swapped = chienn_update(&p, &v[0], &v[1], &[a, c, b]).unwrap();
            assert!(max_abs_diff(&base, &shifted) < 1e-10);
            if max_abs_diff(&base, &swapped) > 1e-6 {
                swapped_differs += 1;
            }
        }
        assert!(swapped_differs >= 99);
    }

    #[test]
    fn update_shift_invariant_when_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ChiennParams::init(&mut rng, 3, 4, 6).unwrap();
        let v = rand_vecs(&mut rng, 4, 4);
        let one = chienn_update(&p, &v[0], &v[1], &[&v[2], &v[3]]).unwrap();
        let two = chienn_update(&p, &v[0], &v[1], &[&v[3], &v[2]]).unwrap();
        assert!(max_abs_diff(&one, &two) < 1e-12);
    }

    #[test]
    fn update_dimension_mismatch() {
        let p = ChiennParams::zeros(2, 3, 4).unwrap();
        assert!(matches!(
            chienn_update(&p, &[0.0; 2], &[0.0; 3], &[]),
            Err(ChiennError::DimensionMismatch(_))
        ));
    }

    fn single_bond() -> MolecularGraph {
        MolecularGraph::from_topology(
            "co",
            Vocabulary::standard(),
            &["C", "O"],
            &[[0.0; 3], [1.2, 0.0, 0.0]],
            &[(0, 1, BondOrder::Double)],
        )
        .unwrap()
    }

    #[test]
    fn layer_on_single_bond_uses_only_self_and_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = single_bond();
        let mut eg = to_edge_graph(&g);
        let orders = all_orders(&eg, ParallelPolicy::Reject).unwrap();
        eg.states = rand_vecs(&mut rng, 2, 4);
        let p = ChiennParams::init(&mut rng, 3, 4, 5).unwrap();
        let next = layer_forward(&p, &eg, &orders).unwrap();
        for n in 0..2 {
            let mut expect = autonn::linear(&p.w1, p.b1.data(), &eg.states[n]).unwrap();
            add_into(&mut expect, &autonn::linear(&p.w2, p.b2.data(), &eg.states[1 - n]).unwrap());
            assert_eq!(next[n], expect);
        }
    }

    #[test]
    fn identity_like_layer_keeps_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut eg = to_edge_graph(&single_bond());
        let orders = all_orders(&eg, ParallelPolicy::Reject).unwrap();
        eg.states = rand_vecs(&mut rng, 2, 3);
        let mut p = ChiennParams::zeros(2, 3, 4).unwrap();
        p.w1 = Tensor::identity(3);
        assert_eq!(layer_forward(&p, &eg, &orders).unwrap(), eg.states);
    }

    #[test]
    fn layer_requires_every_order() {
        let mut eg = to_edge_graph(&single_bond());
        let mut orders = all_orders(&eg, ParallelPolicy::Reject).unwrap();
        eg.states = vec![vec![0.0; 3]; 2];
        orders.pop();
        let p = ChiennParams::zeros(2, 3, 4).unwrap();
        assert!(matches!(layer_forward(&p, &eg, &orders), Err(ChiennError::MissingOrder(_))));
    }

    #[test]
    fn readout_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = vec![0.4, -0.3, 1.1];
        let pooled = mean_pool(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert!(max_abs_diff(&pooled, &v) < 1e-15);
        assert_eq!(mean_pool(&[v.clone()]).unwrap(), v);
        let head = ReadoutHead::zeros(3, 5, 2);
        assert_eq!(readout(&[v.clone()], &head).unwrap(), vec![0.0, 0.0]);
        let head = ReadoutHead::init(&mut rng, 3, 5, 2);
        assert_eq!(readout(&[], &head), Err(ChiennError::EmptyGraph));
    }
}
