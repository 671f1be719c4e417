//! Suites over graph structure, geometry, neighbor ordering and datagen.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check, PropertyResult, Scale, Tally};
use crate::datagen::{
    chirality_oracle, gen_random_molecule_with, gen_ranking_pairs_with, gen_tetrahedral, oracle_chirality,
    order_chirality, perturb_conformer, ranked_substituents, Chirality, Label, RankingConfig, DEFAULT_DELTA,
};
use crate::edgegraph::{to_edge_graph, NodeKey};
use crate::geometry::RigidTransform;
use crate::molgraph::{apply_rigid, mirror, MolecularGraph};
use crate::ordering::{all_orders, canonical_transform, cyclic_equivalent, format_orders, is_cyclic_shift, ParallelPolicy};
use crate::seeding::substream;

fn random_mol(rng: &mut ChaCha8Rng, max_atoms: usize, max_degree: usize) -> MolecularGraph {
    let n = rng.random_range(2..=max_atoms);
    gen_random_molecule_with(rng, n, max_degree).expect("random molecule fits")
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn bond_pairing(seed: u64, scale: Scale) -> PropertyResult {
    let name = "molgraph.bond_pairing";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let g = random_mol(&mut rng, 12, 4);
        let bonds = g.bonds();
        let mut seen = BTreeSet::new();
        let mut msg = None;
        for b in bonds {
            if b.src == b.dst || !seen.insert((b.src, b.dst)) {
                msg = Some(format!("self-loop or duplicate {}-{}", b.src, b.dst));
                break;
            }
            let paired = bonds.iter().any(|r| r.src == b.dst && r.dst == b.src && r.features == b.features);
            if !paired {
                msg = Some(format!("bond {}-{} has no paired reverse", b.src, b.dst));
                break;
            }
        }
        t.record::<String>(Ok(msg));
    }
    t.finish()
}

pub fn mirror_involution(seed: u64, scale: Scale) -> PropertyResult {
    let name = "molgraph.mirror_involution";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let g = apply_rigid(&random_mol(&mut rng, 12, 4), &RigidTransform::random(&mut rng, 5.0)).expect("proper motion");
        let twice = mirror(&mirror(&g));
        t.record::<String>(Ok(check(twice.atoms() == g.atoms(), || "coordinates changed".into())));
    }
    t.finish()
}

pub fn rigid_preserves_distances(seed: u64, scale: Scale) -> PropertyResult {
    let name = "molgraph.rigid_preserves_distances";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let g = random_mol(&mut rng, 12, 4);
        let moved = apply_rigid(&g, &RigidTransform::random(&mut rng, 10.0)).expect("proper motion");
        let mut worst: f64 = 0.0;
        for a in 0..g.atom_count() {
            for b in a + 1..g.atom_count() {
                let d0 = dist(g.coords(a), g.coords(b));
                let d1 = dist(moved.coords(a), moved.coords(b));
                worst = worst.max((d0 - d1).abs() / d0);
            }
        }
        t.record::<String>(Ok(check(worst <= 1e-9, || format!("relative distance change {worst:e}"))));
    }
    t.finish()
}

pub fn edge_node_count(seed: u64, scale: Scale) -> PropertyResult {
    let name = "edgegraph.node_count";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let g = random_mol(&mut rng, 12, 4);
        let mut directed = 0;
        for i in 0..g.atom_count() {
            for j in 0..g.atom_count() {
                directed += usize::from(g.has_bond(i, j));
            }
        }
        let eg = to_edge_graph(&g);
        t.record::<String>(Ok(check(eg.len() == directed, || format!("{} nodes, {directed} bonds", eg.len()))));
    }
    t.finish()
}

pub fn incoming_neighbors_oracle(seed: u64, scale: Scale) -> PropertyResult {
    let name = "edgegraph.incoming_neighbors";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let g = random_mol(&mut rng, 12, 5);
        let eg = to_edge_graph(&g);
        let outcome = (|| {
            for b in g.bonds() {
                let (j, k) = (b.src, b.dst);
                let mut expect: Vec<NodeKey> = (0..g.atom_count())
                    .filter(|&i| i != k && g.has_bond(i, j))
                    .map(|i| NodeKey::new(i, j))
                    .collect();
                expect.sort();
                let mut got = eg.incoming_neighbors(NodeKey::new(j, k))?;
                got.sort();
                if got != expect {
                    return Ok(Some(format!("node {j}->{k}: {got:?} vs {expect:?}")));
                }
            }
            Ok::<_, crate::edgegraph::EdgeGraphError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn relabeling_commutes(seed: u64, scale: Scale) -> PropertyResult {
    let name = "edgegraph.relabeling_commutes";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(200) {
        let g = random_mol(&mut rng, 12, 4);
        let mut perm: Vec<usize> = (0..g.atom_count()).collect();
        perm.shuffle(&mut rng);
        let outcome = (|| {
            let eg0 = to_edge_graph(&g);
            let eg1 = to_edge_graph(&g.relabeled(&perm)?);
            if eg0.len() != eg1.len() || eg0.edges().len() != eg1.edges().len() {
                return Ok(Some("sizes differ".to_string()));
            }
            let map = |k: NodeKey| NodeKey::new(perm[k.src], perm[k.dst]);
            for node in eg0.nodes() {
                let image = eg1.node(map(node.key))?;
                if image.features != node.features || image.coord != node.coord {
                    return Ok(Some(format!("node {} differs", node.key)));
                }
                let mut a: Vec<NodeKey> = eg0.incoming_neighbors(node.key)?.into_iter().map(map).collect();
                let mut b = eg1.incoming_neighbors(map(node.key))?;
                a.sort();
                b.sort();
                if a != b {
                    return Ok(Some(format!("incoming of {} differ", node.key)));
                }
            }
            Ok::<_, Box<dyn std::error::Error>>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn canonical_frame(seed: u64, scale: Scale) -> PropertyResult {
    let name = "ordering.canonical_frame";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        let cj: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        let ck: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        let outcome = canonical_transform(cj, ck).map(|tr| {
            let (a, b) = (tr.apply(cj), tr.apply(ck));
            let len = dist(cj, ck);
            let tol = 1e-9 * (1.0 + len);
            check(
                a.iter().all(|v| v.abs() <= tol)
                    && b[1].abs() <= tol
                    && b[2].abs() <= tol
                    && (b[0] - len).abs() <= tol
                    && tr.validate().is_ok(),
                || format!("c_j -> {a:?}, c_k -> {b:?}"),
            )
        });
        t.record(outcome);
    }
    t.finish()
}

fn orders_equivalent(g0: &MolecularGraph, g1: &MolecularGraph) -> Result<Option<String>, crate::ordering::OrderingError> {
    let o0 = all_orders(&to_edge_graph(g0), ParallelPolicy::Reject)?;
    let o1 = all_orders(&to_edge_graph(g1), ParallelPolicy::Reject)?;
    for (a, b) in o0.iter().zip(&o1) {
        if !cyclic_equivalent(a, b)? {
            return Ok(Some(format!("node {}: {:?} vs {:?}", a.node, a.sequence, b.sequence)));
        }
    }
    Ok(None)
}

pub fn se3_invariance(seed: u64, scale: Scale) -> PropertyResult {
    let name = "ordering.se3_invariance";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        let g = random_mol(&mut rng, 12, 5);
        let moved = apply_rigid(&g, &RigidTransform::random(&mut rng, 10.0)).expect("proper motion");
        t.record(orders_equivalent(&g, &moved));
    }
    t.finish()
}

pub fn conformer_invariance(seed: u64, scale: Scale) -> PropertyResult {
    let name = "ordering.conformer_invariance";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        let g = random_mol(&mut rng, 12, 5);
        let bonds = g.undirected_bonds();
        let (a, b, _) = bonds[rng.random_range(0..bonds.len())];
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let outcome = perturb_conformer(&g, (a, b), angle)
            .map_err(|e| e.to_string())
            .and_then(|moved| orders_equivalent(&g, &moved).map_err(|e| e.to_string()));
        t.record(outcome);
    }
    t.finish()
}

pub fn mirror_reversal(seed: u64, scale: Scale) -> PropertyResult {
    let name = "ordering.mirror_reversal";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(1000) {
        // Resample until some node has at least three neighbors.
        let g = loop {
            let g = random_mol(&mut rng, 12, 5);
            if g.adjacency().iter().any(|a| a.len() >= 4) {
                break g;
            }
        };
        let outcome = (|| {
            let o0 = all_orders(&to_edge_graph(&g), ParallelPolicy::Reject)?;
            let o1 = all_orders(&to_edge_graph(&mirror(&g)), ParallelPolicy::Reject)?;
            for (a, b) in o0.iter().zip(&o1) {
                if a.len() < 3 {
                    continue;
                }
                let rev = a.reversed();
                if !is_cyclic_shift(&rev.sequence, &b.sequence) || cyclic_equivalent(a, b)? {
                    return Ok(Some(format!("node {}: {:?} vs mirror {:?}", a.node, a.sequence, b.sequence)));
                }
            }
            Ok::<_, crate::ordering::OrderingError>(None)
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn ordering_determinism(seed: u64, scale: Scale) -> PropertyResult {
    let name = "ordering.determinism";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(100) {
        let g = random_mol(&mut rng, 12, 5);
        let bytes = serde_json::to_string(&g).expect("graph serializes");
        let outcome = (|| {
            let dump = |text: &str| -> Result<String, Box<dyn std::error::Error>> {
                let parsed: MolecularGraph = serde_json::from_str(text)?;
                Ok(format_orders(&all_orders(&to_edge_graph(&parsed), ParallelPolicy::Reject)?))
            };
            let (a, b) = (dump(&bytes)?, dump(&bytes)?);
            Ok::<_, Box<dyn std::error::Error>>(check(a == b, || "dumps differ".into()))
        })();
        t.record(outcome);
    }
    t.finish()
}

pub fn oracle_antisymmetry(seed: u64, scale: Scale) -> PropertyResult {
    let name = "datagen.oracle_antisymmetry";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    let n = scale.trials(10_000);
    while t_trials(&t) < n {
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let mut ranks = [1, 2, 3, 4];
        ranks.shuffle(&mut rng);
        let subs: [(usize, [f64; 3]); 4] =
            std::array::from_fn(|i| (ranks[i], std::array::from_fn(|_| rng.random_range(-3.0..3.0))));
        let Ok(label) = chirality_oracle(center, subs) else { continue };
        let flip = |p: [f64; 3]| [-p[0], p[1], p[2]];
        let mirrored = chirality_oracle(flip(center), subs.map(|(r, p)| (r, flip(p))));
        t.record(mirrored.map(|m| check(m == label.opposite(), || format!("{label:?} and mirror {m:?}"))));
    }
    t.finish()
}

fn t_trials(t: &Tally) -> usize {
    t.result.trials
}

pub fn dataset_balance(seed: u64, scale: Scale) -> PropertyResult {
    let name = "datagen.balance";
    let mut rng = substream(seed, name);
    let mut t = Tally::new(name, 0);
    for _ in 0..scale.trials(50) {
        let count = rng.random_range(1..=200);
        let outcome = gen_tetrahedral(rng.random(), count).map(|samples| {
            let s = samples.iter().filter(|x| x.meta.chirality == Chirality::S).count() as i64;
            let r = samples.len() as i64 - s;
            check((r - s).abs() <= 1 && samples.len() == count, || format!("{r} R vs {s} S of {count}"))
        });
        t.record(outcome);
    }
    t.finish()
}

pub fn oracle_order_agreement(seed: u64, scale: Scale) -> PropertyResult {
    let name = "datagen.oracle_order_agreement";
    let mut t = Tally::new(name, 0);
    match gen_tetrahedral(substream(seed, name).random(), scale.trials(10_000)) {
        Ok(samples) => {
            for s in &samples {
                let outcome = oracle_chirality(&s.graph, s.meta.center).and_then(|oracle| {
                    let from_order = order_chirality(&s.graph, s.meta.center)?;
                    Ok(check(oracle == from_order, || format!("oracle {oracle:?}, order {from_order:?}")))
                });
                t.record(outcome);
            }
        }
        Err(e) => t.record::<String>(Err(e.to_string())),
    }
    t.finish()
}

pub fn center_mirror_reversal(seed: u64, scale: Scale) -> PropertyResult {
    let name = "datagen.center_mirror_reversal";
    let mut t = Tally::new(name, 0);
    match gen_tetrahedral(substream(seed, name).random(), 2 * scale.trials(500)) {
        Ok(samples) => {
            for pair in samples.chunks(2) {
                let outcome = (|| {
                    let center = pair[0].meta.center;
                    let subs = ranked_substituents(&pair[0].graph, center)?;
                    let key = NodeKey::new(center, subs[3]);
                    let o0 = crate::ordering::neighbor_order(&to_edge_graph(&pair[0].graph), key, ParallelPolicy::Reject)?;
                    let o1 = crate::ordering::neighbor_order(&to_edge_graph(&pair[1].graph), key, ParallelPolicy::Reject)?;
                    Ok::<_, crate::datagen::DatagenError>(check(
                        is_cyclic_shift(&o0.reversed().sequence, &o1.sequence) && !cyclic_equivalent(&o0, &o1)?,
                        || format!("{:?} vs mirror {:?}", o0.sequence, o1.sequence),
                    ))
                })();
                t.record(outcome);
            }
        }
        Err(e) => t.record::<String>(Err(e.to_string())),
    }
    t.finish()
}

pub fn pair_target_gap(seed: u64, scale: Scale) -> PropertyResult {
    let name = "datagen.pair_target_gap";
    let mut t = Tally::new(name, 0);
    let cfg = RankingConfig::default();
    match gen_ranking_pairs_with(substream(seed, name).random(), scale.trials(1000), &cfg) {
        Ok(pairs) => {
            for p in &pairs {
                let ok = match (p.a.label, p.b.label) {
                    (Label::Value(a), Label::Value(b)) => ((a - b).abs() - 2.0 * DEFAULT_DELTA).abs() <= 1e-12,
                    _ => false,
                };
                t.record::<String>(Ok(check(ok, || format!("labels {:?}, {:?}", p.a.label, p.b.label))));
            }
        }
        Err(e) => t.record::<String>(Err(e.to_string())),
    }
    t.finish()
}
