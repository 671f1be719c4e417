//! Suites over the ChiENN update, autodiff and training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check, PropertyResult, Scale, Tally};
use crate::autonn::{self, grad_check, NnError, Tape, Tensor, Var};
use crate::chienn::{
    chienn_update, shift_invariant_aggregate, vanilla_aggregate, BatchPlan, ChiennError, ChiennParams, GraphPlan,
    LayerStack, PsiActivation, StackConfig,
};
use crate::datagen::{gen_random_molecule_with, gen_tetrahedral, Label, SyntheticSample};
use crate::edgegraph::to_edge_graph;
use crate::molgraph::mirror;
use crate::ordering::{all_orders, is_cyclic_shift, ParallelPolicy};
use crate::seeding::substream;
use crate::train::{
    clip_grad_norm, cosine_warmup_lr, examples_from_samples, train_model, Dataset, Task, TrainConfig,
};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n)).expect("shape matches")
}

/// `max |a − b| / max(‖a‖∞, ‖b‖∞)`, or 0 when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Every permutation of `0..n`, by Heap's algorithm.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if i + 1 < k {
                if k % 2 == 0 {
                    a.swap(i, k - 1);
                } else {
                    a.swap(0, k - 1);
                }
            }
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

fn random_params(rng: &mut ChaCha8Rng, k: usize, hidden: usize, psi: PsiActivation) -> ChiennParams {
    let mid = rng.random_range(2..=6);
    let mut p = ChiennParams::init(rng, k, hidden, mid).expect("k is positive");
    p.psi = psi;
    p
}

fn update_with(params: &ChiennParams, x: &[f64], xp: &[f64], order: &[Vec<f64>], perm: &[usize]) -> Result<Vec<f64>, ChiennError> {
    let refs: Vec<&[f64]> = perm.iter().map(|&i| order[i].as_slice()).collect();
    chienn_update(params, x, xp, &refs)
}

pub fn vanilla_permutation_invariance(seed: u64, scale: Scale) -> PropertyResult {
    let name = "chienn.vanilla_permutation_invariance";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    let perms = permutations(5);
    for _ in 0..scale.trials(100) {
        let h = rng.random_range(2..=5);
        let w_phi = rand_tensor(&mut rng, vec![h, 2 * h]);
        let w_rho = rand_tensor(&mut rng, vec![h, 2 * h]);
        let phi = |x: &[f64], y: &[f64]| autonn::elu(&autonn::linear(&w_phi, &vec![0.0; h], &[x, y].concat()).expect("shapes"));
        let rho = |x: &[f64], s: &[f64]| autonn::elu(&autonn::linear(&w_rho, &vec![0.0; h], &[x, s].concat()).expect("shapes"));
        let x = rand_vec(&mut rng, h);
        let nbs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, h)).collect();
        let outcome = (|| {
            let base = vanilla_aggregate(&x, &nbs, phi, rho)?;
            for p in &perms {
                let shuffled: Vec<Vec<f64>> = p.iter().map(|&i| nbs[i].clone()).collect();
                let e = rel_err(&base, &vanilla_aggregate(&x, &shuffled, phi, rho)?);
                if e > 1e-12 {
                    return Ok(Some(format!("permutation {p:?}: relative error {e:e}")));
                }
            }
            Ok::<_, ChiennError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn shift_aggregate_invariance(seed: u64, scale: Scale) -> PropertyResult {
    let name = "chienn.shift_aggregate_invariance";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let d = rng.random_range(1..=8);
        let h = rng.random_range(1..=4);
        let w = rand_tensor(&mut rng, vec![3, d * h]);
        let g = |win: &[&[f64]]| autonn::elu(&autonn::linear(&w, &[0.1, -0.2, 0.3], &win.concat()).expect("shapes"));
        let order: Vec<Vec<f64>> = (0..d).map(|_| rand_vec(&mut rng, h)).collect();
        let outcome = (|| {
            let base = shift_invariant_aggregate(g, &order)?;
            for s in 1..d {
                let shifted: Vec<Vec<f64>> = (0..d).map(|i| order[(i + s) % d].clone()).collect();
                let e = rel_err(&base, &shift_invariant_aggregate(g, &shifted)?);
                if e > 1e-12 {
                    return Ok(Some(format!("d={d} shift {s}: relative error {e:e}")));
                }
            }
            Ok::<_, ChiennError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn update_shift_invariance(seed: u64, scale: Scale) -> PropertyResult {
    let name = "chienn.update_shift_invariance";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        let n = rng.random_range(2..=12);
        let g = match gen_random_molecule_with(&mut rng, n, 9) {
            Ok(g) => g,
            Err(e) => {
                t.record::<String>(Err(e.to_string()));
                continue;
            }
        };
        let k = rng.random_range(1..=4);
        let h = rng.random_range(2..=6);
        let params = random_params(&mut rng, k, h, PsiActivation::Elu);
        let eg = to_edge_graph(&g);
        let states: Vec<Vec<f64>> = (0..eg.len()).map(|_| rand_vec(&mut rng, h)).collect();
        let outcome = (|| {
            for (n, order) in all_orders(&eg, ParallelPolicy::Reject)?.iter().enumerate() {
                let nb: Vec<Vec<f64>> = order
                    .sequence
                    .iter()
                    .map(|key| Ok(states[eg.node_index(*key).map_err(crate::ordering::OrderingError::from)?].clone()))
                    .collect::<Result<_, ChiennError>>()?;
                let d = nb.len();
                let xp = &states[eg.parallel_index(n)];
                let ident: Vec<usize> = (0..d).collect();
                let base = update_with(&params, &states[n], xp, &nb, &ident)?;
                for s in 1..d {
                    let shift: Vec<usize> = (0..d).map(|i| (i + s) % d).collect();
                    let e = rel_err(&base, &update_with(&params, &states[n], xp, &nb, &shift)?);
                    if e > 1e-10 {
                        return Ok(Some(format!("node {}, k={k}, d={d}, shift {s}: relative error {e:e}", order.node)));
                    }
                }
            }
            Ok::<_, ChiennError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn order_sensitivity(seed: u64, scale: Scale) -> PropertyResult {
    let name = "chienn.order_sensitivity";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, scale.trials(1000) / 100);
    for _ in 0..scale.trials(1000) {
        let k = rng.random_range(2..=4);
        let d = rng.random_range(3..=8);
        let h = rng.random_range(2..=6);
        let params = random_params(&mut rng, k, h, PsiActivation::Elu);
        let (x, xp) = (rand_vec(&mut rng, h), rand_vec(&mut rng, h));
        let nb: Vec<Vec<f64>> = (0..d).map(|_| rand_vec(&mut rng, h)).collect();
        let ident: Vec<usize> = (0..d).collect();
        let mut perm = ident.clone();
        while is_cyclic_shift(&ident, &perm) {
            perm.shuffle(&mut rng);
        }
        let outcome = update_with(&params, &x, &xp, &nb, &ident).and_then(|a| {
            let b = update_with(&params, &x, &xp, &nb, &perm)?;
            let e = rel_err(&a, &b);
            Ok(check(e > 1e-6, || format!("k={k}, d={d}, permutation {perm:?}: relative change only {e:e}")))
        });
        t.record(outcome);
    }
    t.finish()
}

/// Exhaustive permutation check of the update for `d ≤ 6` neighbors.
fn permutation_invariance(name: &str, seed: u64, trials: usize, arity: impl Fn(&mut ChaCha8Rng) -> usize, psi: PsiActivation, tol: f64) -> PropertyResult {
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    let tables: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    for _ in 0..trials {
        let k = arity(&mut rng);
        let d = rng.random_range(1..=6);
        let h = rng.random_range(2..=5);
        let params = random_params(&mut rng, k, h, psi);
        let (x, xp) = (rand_vec(&mut rng, h), rand_vec(&mut rng, h));
        let nb: Vec<Vec<f64>> = (0..d).map(|_| rand_vec(&mut rng, h)).collect();
        let outcome = (|| {
            let base = update_with(&params, &x, &xp, &nb, &tables[d][0])?;
            for p in &tables[d] {
                let e = rel_err(&base, &update_with(&params, &x, &xp, &nb, p)?);
                if e > tol {
                    return Ok(Some(format!("k={k}, d={d}, permutation {p:?}: relative error {e:e}")));
                }
            }
            Ok::<_, ChiennError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn linear_psi_collapse(seed: u64, scale: Scale) -> PropertyResult {
    permutation_invariance(
        "chienn.linear_psi_collapse",
        seed,
        scale.trials(200),
        |rng| rng.random_range(1..=4),
        PsiActivation::Identity,
        1e-10,
    )
}

pub fn k1_permutation_invariance(seed: u64, scale: Scale) -> PropertyResult {
    permutation_invariance("chienn.k1_permutation_invariance", seed, scale.trials(200), |_| 1, PsiActivation::Elu, 1e-10)
}

fn small_stack(rng: &mut ChaCha8Rng, k: usize, layers: usize, input_dim: usize) -> Result<LayerStack, ChiennError> {
    let config = StackConfig {
        k,
        hidden: 8,
        hidden_mid: 8,
        layers,
        head_hidden: 8,
        outputs: 2,
        ..StackConfig::default()
    };
    LayerStack::init(rng, config, input_dim)
}

/// Pooled embeddings of a tetrahedral sample and its mirror image from a
/// fresh stack of default size.
///
/// Depth matters for `k = 2`: around a bare center the four bond views
/// together contain every ordered substituent pair exactly once, so one or
/// two layers followed by mean pooling cancel the mirror difference.
fn enantiomer_embeddings(
    rng: &mut ChaCha8Rng,
    k: usize,
    sample: &SyntheticSample,
) -> Result<(Vec<f64>, Vec<f64>), ChiennError> {
    let a = GraphPlan::new(&sample.graph, ParallelPolicy::Reject)?;
    let b = GraphPlan::new(&mirror(&sample.graph), ParallelPolicy::Reject)?;
    let config = StackConfig { k, ..StackConfig::default() };
    let stack = LayerStack::init(rng, config, a.input_dim())?;
    Ok((stack.graph_embedding(&a)?, stack.graph_embedding(&b)?))
}

pub fn enantiomer_discrimination(seed: u64, scale: Scale) -> PropertyResult {
    let name = "chienn.enantiomer_discrimination";
    let mut rng = substream(seed, name);
    let n = scale.trials(1000);
    let mut t = Tally::new(name, n / 100);
    match gen_tetrahedral(rng.random(), n) {
        Ok(samples) => {
            for s in &samples {
                let k = rng.random_range(2..=4);
                let outcome = enantiomer_embeddings(&mut rng, k, s).map(|(a, b)| {
                    let e = rel_err(&a, &b);
                    check(e > 1e-6, || format!("k={k}: mirror embeddings differ by only {e:e}"))
                });
                t.record(outcome);
            }
        }
        Err(e) => t.record::<String>(Err(e.to_string())),
    }
    t.finish()
}

pub fn enantiomer_blindness_k1(seed: u64, scale: Scale) -> PropertyResult {
    let name = "chienn.enantiomer_blindness_k1";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    match gen_tetrahedral(rng.random(), scale.trials(1000)) {
        Ok(samples) => {
            for s in &samples {
                let outcome = enantiomer_embeddings(&mut rng, 1, s).map(|(a, b)| {
                    let e = rel_err(&a, &b);
                    check(e <= 1e-9, || format!("mirror embeddings differ by {e:e}"))
                });
                t.record(outcome);
            }
        }
        Err(e) => t.record::<String>(Err(e.to_string())),
    }
    t.finish()
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, NnError>>);

/// One scalar objective per tape op. A random weighting tensor keeps
/// gradients away from symmetric cancellation.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let (n, m, o) = (rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4));
    let weighted = |tape: &mut Tape, y: Var, r: Var| -> Result<Var, NnError> {
        let p = tape.mul(y, r)?;
        tape.sum(p)
    };
    let gather_index: Vec<Option<usize>> = (0..6).map(|i| if i == 4 { None } else { Some(rng.random_range(0..n)) }).collect();
    let segments: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    // Targets kept at least 0.1 from every prediction so l1 stays smooth.
    let pred = rand_tensor(rng, vec![n, 1]);
    let targets: Vec<f64> = pred.data().iter().map(|p| p + rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let factor = rng.random_range(-2.0..2.0);
    vec![
        (
            "linear",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![o, m]), rand_tensor(rng, vec![o]), rand_tensor(rng, vec![n, o])],
            Box::new(move |tape, v| {
                let y = tape.linear(v[0], v[1], Some(v[2]))?;
                weighted(tape, y, v[3])
            }),
        ),
        (
            "add",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![n, m])],
            Box::new(move |tape, v| {
                let y = tape.add(v[0], v[1])?;
                weighted(tape, y, v[2])
            }),
        ),
        (
            "mul",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![n, m])],
            Box::new(move |tape, v| {
                let y = tape.mul(v[0], v[1])?;
                weighted(tape, y, v[2])
            }),
        ),
        (
            "scale",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![n, m])],
            Box::new(move |tape, v| {
                let y = tape.scale(v[0], factor)?;
                weighted(tape, y, v[1])
            }),
        ),
        (
            "elu",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![n, m])],
            Box::new(move |tape, v| {
                let y = tape.elu(v[0])?;
                weighted(tape, y, v[1])
            }),
        ),
        (
            "sum",
            vec![rand_tensor(rng, vec![n, m])],
            Box::new(move |tape, v| {
                let y = tape.mul(v[0], v[0])?;
                tape.sum(y)
            }),
        ),
        (
            "gather_rows",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![3, 2 * m])],
            Box::new(move |tape, v| {
                let y = tape.gather_rows(v[0], gather_index.clone(), 2)?;
                weighted(tape, y, v[1])
            }),
        ),
        (
            "segment_sum",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![3, m])],
            {
                let segments = segments.clone();
                Box::new(move |tape, v| {
                    let y = tape.segment_sum(v[0], segments.clone(), 3)?;
                    weighted(tape, y, v[1])
                })
            },
        ),
        (
            "segment_mean",
            vec![rand_tensor(rng, vec![n, m]), rand_tensor(rng, vec![2, m])],
            Box::new(move |tape, v| {
                let y = tape.segment_mean(v[0], segments.clone(), 2)?;
                weighted(tape, y, v[1])
            }),
        ),
        (
            "layer_norm",
            vec![rand_tensor(rng, vec![n, m + 1]), rand_tensor(rng, vec![n, m + 1])],
            Box::new(move |tape, v| {
                let y = tape.layer_norm(v[0], 1e-5)?;
                weighted(tape, y, v[1])
            }),
        ),
        (
            "cross_entropy",
            vec![rand_tensor(rng, vec![n, m])],
            Box::new(move |tape, v| tape.cross_entropy(v[0], &labels)),
        ),
        ("l1", vec![pred], Box::new(move |tape, v| tape.l1(v[0], &targets))),
    ]
}

pub fn op_gradients(seed: u64, scale: Scale) -> PropertyResult {
    let name = "autonn.op_gradients";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(100) {
        let outcome = (|| {
            for (op, params, f) in op_cases(&mut rng) {
                let e = grad_check(&*f, &params, 1e-5)?;
                if !(e < 1e-4) {
                    return Ok(Some(format!("{op}: relative gradient error {e:e}")));
                }
            }
            Ok::<_, NnError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

fn to_nn(e: ChiennError) -> NnError {
    match e {
        ChiennError::Nn(e) => e,
        other => NnError::ShapeMismatch {
            op: "stack",
            detail: other.to_string(),
        },
    }
}

pub fn stack_gradients(seed: u64, scale: Scale) -> PropertyResult {
    let name = "autonn.stack_gradients";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for trial in 0..scale.trials(100) {
        let outcome = (|| {
            let sample = gen_tetrahedral(rng.random(), 1).map_err(|e| e.to_string())?.remove(0);
            let label = match sample.label {
                Label::Class(c) => c,
                Label::Value(_) => return Err("expected a class label".to_string()),
            };
            let a = GraphPlan::new(&sample.graph, ParallelPolicy::Reject).map_err(|e| e.to_string())?;
            let other = gen_tetrahedral(rng.random(), 1).map_err(|e| e.to_string())?.remove(0);
            let b = GraphPlan::new(&other.graph, ParallelPolicy::Reject).map_err(|e| e.to_string())?;
            let config = StackConfig {
                k: 1 + trial % 4,
                hidden: 4,
                hidden_mid: 4,
                layers: 3,
                head_hidden: 4,
                outputs: 2,
                residual: trial % 2 == 1,
                layer_norm: trial % 3 == 2,
                ..StackConfig::default()
            };
            let stack = LayerStack::init(&mut rng, config, a.input_dim()).map_err(|e| e.to_string())?;
            let batch = BatchPlan::new(&[&a, &b], stack.config.k).map_err(|e| e.to_string())?;
            let params: Vec<Tensor> = stack.tensors().into_iter().cloned().collect();
            // Independent labels; opposite labels on a mirror pair cancel most
            // of the gradient and leave coordinates at roundoff level.
            let labels = [label, rng.random_range(0..2)];
            let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, NnError> {
                let logits = stack.forward_tape(tape, vars, &batch).map_err(to_nn)?;
                tape.cross_entropy(logits, &labels)
            };
            let e = grad_check(f, &params, 1e-5).map_err(|e| e.to_string())?;
            Ok(check(e < 1e-4, || format!("relative gradient error {e:e}")))
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn forward_determinism(seed: u64, scale: Scale) -> PropertyResult {
    let name = "autonn.forward_determinism";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(100) {
        let outcome = (|| {
            let samples = gen_tetrahedral(rng.random(), 4).map_err(|e| e.to_string())?;
            let plans = samples
                .iter()
                .map(|s| GraphPlan::new(&s.graph, ParallelPolicy::Reject))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let k = rng.random_range(1..=4);
            let layers = rng.random_range(1..=3);
            let stack = small_stack(&mut rng, k, layers, plans[0].input_dim()).map_err(|e| e.to_string())?;
            let reloaded = LayerStack::from_json(&stack.to_json()).map_err(|e| e.to_string())?;
            let refs: Vec<&GraphPlan> = plans.iter().collect();
            let batch = BatchPlan::new(&refs, k).map_err(|e| e.to_string())?;
            let first = stack.predict(&batch).map_err(|e| e.to_string())?;
            let second = stack.predict(&batch).map_err(|e| e.to_string())?;
            let third = reloaded.predict(&batch).map_err(|e| e.to_string())?;
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            Ok::<_, String>(check(bits(&first) == bits(&second) && bits(&first) == bits(&third), || {
                "repeated forward passes differ".to_string()
            }))
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn lr_continuity(seed: u64, scale: Scale) -> PropertyResult {
    let name = "train.lr_continuity";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        let epochs = rng.random_range(2..=400);
        let cfg = TrainConfig {
            epochs,
            warmup_epochs: rng.random_range(0..epochs),
            base_lr: 10f64.powf(rng.random_range(-5.0..-1.0)),
            ..TrainConfig::default()
        };
        let outcome = (|| {
            let lrs = (0..epochs).map(|e| cosine_warmup_lr(e, &cfg)).collect::<Result<Vec<_>, _>>()?;
            let w = cfg.warmup_epochs;
            let step = cfg.base_lr * (1.0 / w.max(1) as f64).max(std::f64::consts::PI / (2.0 * (epochs - w) as f64));
            let tol = 1e-12 * cfg.base_lr;
            for (e, lr) in lrs.iter().enumerate() {
                if !(*lr >= -tol && *lr <= cfg.base_lr + tol) {
                    return Ok(Some(format!("epoch {e}: lr {lr:e} outside [0, {:e}]", cfg.base_lr)));
                }
            }
            if (lrs[w] - cfg.base_lr).abs() > tol || (w > 0 && lrs[0] != 0.0) {
                return Ok(Some(format!("warm-up endpoints wrong: lr[0]={:e}, lr[{w}]={:e}", lrs[0], lrs[w])));
            }
            for (e, pair) in lrs.windows(2).enumerate() {
                if (pair[1] - pair[0]).abs() > step + tol {
                    return Ok(Some(format!("jump {:e} at epoch {e} exceeds {step:e}", pair[1] - pair[0])));
                }
            }
            Ok::<_, crate::train::TrainError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn clip_never_increases_norm(seed: u64, scale: Scale) -> PropertyResult {
    let name = "train.clip_never_increases_norm";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        let mag = 10f64.powf(rng.random_range(-3.0..3.0));
        let mut grads: Vec<Tensor> = (0..rng.random_range(1..=4))
            .map(|_| {
                let len = rng.random_range(1..=5);
                let mut g = rand_tensor(&mut rng, vec![len]);
                g.scale_in_place(mag);
                g
            })
            .collect();
        let max_norm = 10f64.powf(rng.random_range(-2.0..2.0));
        let before: f64 = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let original = grads.clone();
        let outcome = clip_grad_norm(&mut grads, max_norm).map(|reported| {
            let after: f64 = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            let limit = before.min(max_norm) * (1.0 + 1e-12);
            let untouched = before > max_norm || grads == original;
            check(after <= limit && untouched && (reported - before).abs() <= 1e-12 * before, || {
                format!("norm {before:e} -> {after:e} with max {max_norm:e}, reported {reported:e}")
            })
        });
        t.record(outcome);
    }
    t.finish()
}

pub fn training_determinism(seed: u64, scale: Scale) -> PropertyResult {
    let name = "train.seed_determinism";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(5) {
        let run_seed: u64 = rng.random();
        let run = || -> Result<(String, String), String> {
            let samples = gen_tetrahedral(run_seed, 24).map_err(|e| e.to_string())?;
            let examples = examples_from_samples(&samples, ParallelPolicy::Reject).map_err(|e| e.to_string())?;
            let data = Dataset::split(examples, run_seed);
            let config = StackConfig {
                k: 2,
                hidden: 4,
                hidden_mid: 4,
                layers: 1,
                head_hidden: 4,
                outputs: 2,
                ..StackConfig::default()
            };
            let mut stack = LayerStack::init(&mut substream(run_seed, "init"), config, data.train[0].plan.input_dim())
                .map_err(|e| e.to_string())?;
            let cfg = TrainConfig {
                epochs: 3,
                warmup_epochs: 1,
                batch_size: 8,
                seed: run_seed,
                task: Task::Classification,
                ..TrainConfig::default()
            };
            let report = train_model(&mut stack, &data, &cfg).map_err(|e| e.to_string())?;
            Ok((stack.to_json(), serde_json::to_string(&report).map_err(|e| e.to_string())?))
        };
        let outcome = run().and_then(|a| {
            let b = run()?;
            Ok(check(a == b, || "two runs with the same seed differ".to_string()))
        });
        t.record(outcome);
    }
    t.finish()
}
