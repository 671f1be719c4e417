//! Synthetic chiral datasets labeled by a signed-volume oracle.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edgegraph::{to_edge_graph, EdgeGraphError, NodeKey};
use crate::geometry::RigidTransform;
use crate::molgraph::{apply_rigid, mirror, BondOrder, MolError, MolecularGraph, Vocabulary, STANDARD_ELEMENTS};
use crate::ordering::{neighbor_order, OrderingError, ParallelPolicy};
use crate::seeding::derive_seed;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
/// Default chiral effect size in regression targets.
pub const DEFAULT_DELTA: f64 = 0.5;
/// Oracle inputs with `|det| ≤` this are rejected as coplanar.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("coplanar or degenerate substituents (det = {det:e})")]
    Degenerate { det: f64 },
    #[error("priority ranks must be 1, 2, 3, 4 in some order, got {0:?}")]
    InvalidRanks([usize; 4]),
    #[error("atom {0} is not a center with four distinct substituent elements")]
    NotAChiralCenter(usize),
    #[error("bond {src}-{dst} is not a rotatable bond")]
    NotRotatable { src: usize, dst: usize },
    #[error("no bond {src}-{dst}")]
    UnknownBond { src: usize, dst: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported dataset schema version {found} (expected {DATASET_SCHEMA_VERSION})")]
    SchemaVersion { found: u64 },
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    EdgeGraph(#[from] EdgeGraphError),
}

/// Binary configuration label. `R` is class 0, `S` is class 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chirality {
    R,
    S,
}

impl Chirality {
    pub fn class_index(self) -> usize {
        match self {
            Self::R => 0,
            Self::S => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::R),
            1 => Some(Self::S),
            _ => None,
        }
    }

    /// `+1` for `S`, `−1` for `R`.
    pub fn sign(self) -> f64 {
        match self {
            Self::R => -1.0,
            Self::S => 1.0,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Self::R => Self::S,
            Self::S => Self::R,
        }
    }
}

/// Signed-volume chirality label.
///
/// `substituents` are `(priority rank, position)` with ranks 1 (highest) to 4.
/// With `v_i` the rank-`i` position, `det[v1 − v4, v2 − v4, v3 − v4] > 0` is
/// `S` and `< 0` is `R`: a negative determinant means 1 → 2 → 3 runs
/// clockwise when viewed with the rank-4 substituent pointing away.
pub fn chirality_oracle(center: [f64; 3], substituents: [(usize, [f64; 3]); 4]) -> Result<Chirality, DatagenError> {
    let mut ranks = substituents.map(|s| s.0);
    let given = ranks;
    ranks.sort_unstable();
    if ranks != [1, 2, 3, 4] {
        return Err(DatagenError::InvalidRanks(given));
    }
    let mut by_rank = [Vector3::zeros(); 4];
    for (rank, pos) in substituents {
        by_rank[rank - 1] = Vector3::from(pos) - Vector3::from(center);
    }
    let v4 = by_rank[3];
    let det = Matrix3::from_columns(&[by_rank[0] - v4, by_rank[1] - v4, by_rank[2] - v4]).determinant();
    if !det.is_finite() || det.abs() <= ORACLE_TOLERANCE {
        return Err(DatagenError::Degenerate { det });
    }
    Ok(if det > 0.0 { Chirality::S } else { Chirality::R })
}

/// Neighbors of `center` from highest to lowest priority, where priority is
/// the element's index in the standard vocabulary (later = higher).
pub fn ranked_substituents(g: &MolecularGraph, center: usize) -> Result<[usize; 4], DatagenError> {
    let vocab = Vocabulary::standard();
    let adj = g.adjacency();
    let nbs = adj.get(center).ok_or(DatagenError::NotAChiralCenter(center))?;
    if nbs.len() != 4 {
        return Err(DatagenError::NotAChiralCenter(center));
    }
    let mut keyed = nbs
        .iter()
        .map(|&a| Ok((vocab.index_of(&g.atoms()[a].element)?, a)))
        .collect::<Result<Vec<_>, MolError>>()?;
    keyed.sort_unstable_by(|a, b| b.0.cmp(&a.0));
    if keyed.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(DatagenError::NotAChiralCenter(center));
    }
    Ok([keyed[0].1, keyed[1].1, keyed[2].1, keyed[3].1])
}

/// [`chirality_oracle`] applied to atom `center` of `g`.
pub fn oracle_chirality(g: &MolecularGraph, center: usize) -> Result<Chirality, DatagenError> {
    let subs = ranked_substituents(g, center)?;
    let input = [0, 1, 2, 3].map(|r| (r + 1, g.coords(subs[r])));
    chirality_oracle(g.coords(center), input)
}

/// Label read off the cyclic neighbor order of the edge-graph node
/// `center → rank-4 substituent`.
///
/// Ascending projection angle runs clockwise for a viewer looking along the
/// reference bond, so rank 2 directly after rank 1 means `R`.
pub fn order_chirality(g: &MolecularGraph, center: usize) -> Result<Chirality, DatagenError> {
    let subs = ranked_substituents(g, center)?;
    let eg = to_edge_graph(g);
    let order = neighbor_order(&eg, NodeKey::new(center, subs[3]), ParallelPolicy::Reject)?;
    let atoms: Vec<usize> = order.sequence.iter().map(|k| k.src).collect();
    let first = atoms
        .iter()
        .position(|&a| a == subs[0])
        .ok_or(DatagenError::NotAChiralCenter(center))?;
    let next = atoms[(first + 1) % atoms.len()];
    Ok(if next == subs[1] { Chirality::R } else { Chirality::S })
}

/// Target of a synthetic sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Seed the sample's geometry was drawn from.
    pub seed: u64,
    pub is_mirror: bool,
    pub pair_id: u64,
    pub chirality: Chirality,
    pub center: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub graph: MolecularGraph,
    pub label: Label,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TetraConfig {
    pub center_element: String,
    /// Substituent elements; each sample draws four distinct ones.
    pub substituent_elements: Vec<String>,
    /// Maximum deviation of each substituent from its ideal tetrahedral direction.
    pub jitter_deg: f64,
    /// Probability that a non-hydrogen substituent carries one extra atom.
    pub branch_prob: f64,
    pub branch_elements: Vec<String>,
    /// Translation range of the random rigid motion.
    pub translation_scale: f64,
}

impl Default for TetraConfig {
    fn default() -> Self {
        Self {
            center_element: "C".into(),
            substituent_elements: ["H", "N", "O", "F", "Cl", "Br"].map(String::from).to_vec(),
            jitter_deg: 15.0,
            branch_prob: 0.3,
            branch_elements: ["H", "C"].map(String::from).to_vec(),
            translation_scale: 5.0,
        }
    }
}

impl TetraConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let vocab = Vocabulary::standard();
        let mut idx = self
            .substituent_elements
            .iter()
            .map(|e| vocab.index_of(e))
            .collect::<Result<Vec<_>, _>>()?;
        idx.sort_unstable();
        idx.dedup();
        if idx.len() < 4 || idx.len() != self.substituent_elements.len() {
            return Err(DatagenError::InvalidConfig(
                "need at least four substituent elements with distinct vocabulary slots".into(),
            ));
        }
        vocab.index_of(&self.center_element)?;
        for e in &self.branch_elements {
            vocab.index_of(e)?;
        }
        if self.branch_prob > 0.0 && self.branch_elements.is_empty() {
            return Err(DatagenError::InvalidConfig("branching needs branch elements".into()));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(DatagenError::InvalidConfig("branch_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=30.0).contains(&self.jitter_deg) {
            return Err(DatagenError::InvalidConfig("jitter_deg must lie in [0, 30]".into()));
        }
        Ok(())
    }
}

/// Covalent radius in Ångström; bond lengths are sums of radii.
pub fn covalent_radius(element: &str) -> f64 {
    match element {
        "H" => 0.31,
        "C" => 0.76,
        "N" => 0.71,
        "O" => 0.66,
        "F" => 0.57,
        "P" => 1.07,
        "S" => 1.05,
        "Cl" => 1.02,
        "Br" => 1.20,
        "I" => 1.39,
        _ => 1.0,
    }
}

fn bond_length(a: &str, b: &str) -> f64 {
    covalent_radius(a) + covalent_radius(b)
}

/// Unit vector at angle `theta` from `u`, in a uniformly random azimuth.
fn tilt<R: Rng + ?Sized>(rng: &mut R, u: Vector3<f64>, theta: f64) -> Vector3<f64> {
    let helper = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let axis = Unit::new_normalize(u.cross(&helper));
    let tilted = UnitQuaternion::from_axis_angle(&axis, theta) * u;
    let spin = UnitQuaternion::from_axis_angle(&Unit::new_normalize(u), rng.random_range(0.0..std::f64::consts::TAU));
    (spin * tilted).normalize()
}

const TETRAHEDRON: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

/// One center (atom 0) with four substituents (atoms 1–4) and optional
/// one-atom branches, in a random orientation.
fn build_center<R: Rng + ?Sized>(rng: &mut R, cfg: &TetraConfig, name: String) -> Result<MolecularGraph, DatagenError> {
    let mut pool: Vec<&str> = cfg.substituent_elements.iter().map(String::as_str).collect();
    pool.shuffle(rng);
    let subs = &pool[..4];
    let center = cfg.center_element.as_str();
    let mut elements = vec![center];
    let mut coords = vec![[0.0; 3]];
    let mut bonds = Vec::new();
    let mut dirs = Vec::with_capacity(4);
    for (slot, &e) in subs.iter().enumerate() {
        let ideal = Vector3::from(TETRAHEDRON[slot]).normalize();
        let jitter = rng.random_range(0.0..=cfg.jitter_deg).to_radians();
        let dir = tilt(rng, ideal, jitter);
        elements.push(e);
        coords.push((dir * bond_length(center, e)).into());
        bonds.push((0, slot + 1, BondOrder::Single));
        dirs.push(dir);
    }
    for (slot, &e) in subs.iter().enumerate() {
        if e == "H" || !rng.random_bool(cfg.branch_prob) {
            continue;
        }
        let be = cfg.branch_elements[rng.random_range(0..cfg.branch_elements.len())].as_str();
        let theta = rng.random_range(50.0f64..70.0).to_radians();
        let dir = tilt(rng, dirs[slot], theta);
        let pos = Vector3::from(coords[slot + 1]) + dir * bond_length(e, be);
        elements.push(be);
        coords.push(pos.into());
        bonds.push((slot + 1, elements.len() - 1, BondOrder::Single));
    }
    let g = MolecularGraph::from_topology(name, Vocabulary::standard(), &elements, &coords, &bonds)?;
    let motion = RigidTransform::random(rng, cfg.translation_scale);
    Ok(apply_rigid(&g, &motion)?)
}

/// Mirror-image pair `(A, mirror(A))` drawn from the per-pair seed.
fn tetra_pair(seed: u64, pair: u64, cfg: &TetraConfig) -> Result<[(MolecularGraph, Chirality, u64); 2], DatagenError> {
    let pair_seed = derive_seed(seed, "tetrahedral", pair);
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
    let a = build_center(&mut rng, cfg, format!("tetra-{pair}"))?;
    let b = mirror(&a).with_name(format!("tetra-{pair}-mirror"));
    let la = oracle_chirality(&a, 0)?;
    let lb = oracle_chirality(&b, 0)?;
    Ok([(a, la, pair_seed), (b, lb, pair_seed)])
}

/// `count` tetrahedral samples with R/S class labels, mirror pairs adjacent.
pub fn gen_tetrahedral_with(seed: u64, count: usize, cfg: &TetraConfig) -> Result<Vec<SyntheticSample>, DatagenError> {
    cfg.validate()?;
    if count == 0 {
        return Err(DatagenError::InvalidConfig("count must be at least 1".into()));
    }
    if count % 2 == 1 {
        log::warn!("odd sample count {count}: the last sample has no mirror partner");
    }
    let mut out = Vec::with_capacity(count);
    for pair in 0..count.div_ceil(2) as u64 {
        for (is_mirror, (graph, chirality, s)) in tetra_pair(seed, pair, cfg)?.into_iter().enumerate() {
            if out.len() == count {
                break;
            }
            out.push(SyntheticSample {
                graph,
                label: Label::Class(chirality.class_index()),
                meta: SampleMeta {
                    seed: s,
                    is_mirror: is_mirror == 1,
                    pair_id: pair,
                    chirality,
                    center: 0,
                },
            });
        }
    }
    Ok(out)
}

pub fn gen_tetrahedral(seed: u64, count: usize) -> Result<Vec<SyntheticSample>, DatagenError> {
    gen_tetrahedral_with(seed, count, &TetraConfig::default())
}

/// Smooth chirality-blind descriptor: mean atom weight plus the mean bond
/// length's offset from 1.5 Å. Atom weight is 0.2 per vocabulary slot, minus 0.5.
pub fn f_achiral(g: &MolecularGraph) -> f64 {
    let vocab = Vocabulary::standard();
    let n = g.atom_count().max(1) as f64;
    let weight: f64 = g
        .atoms()
        .iter()
        .map(|a| 0.2 * vocab.index_of(&a.element).unwrap_or(vocab.len() - 1) as f64 - 0.5)
        .sum::<f64>()
        / n;
    let bonds = g.bonds();
    let mean_len = if bonds.is_empty() {
        1.5
    } else {
        bonds
            .iter()
            .map(|b| {
                let (p, q) = (Vector3::from(g.coords(b.src)), Vector3::from(g.coords(b.dst)));
                (p - q).norm()
            })
            .sum::<f64>()
            / bonds.len() as f64
    };
    weight + mean_len - 1.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Member {
    A,
    B,
}

/// Enantiomer pair with real targets; `smaller` names the member with the lower target.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingPair {
    pub a: SyntheticSample,
    pub b: SyntheticSample,
    pub smaller: Member,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    pub delta: f64,
    pub tetra: TetraConfig,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            tetra: TetraConfig::default(),
        }
    }
}

/// `count` enantiomer pairs with targets `f_achiral(g) + s·δ`, `s = +1` for `S`.
pub fn gen_ranking_pairs_with(seed: u64, count: usize, cfg: &RankingConfig) -> Result<Vec<RankingPair>, DatagenError> {
    cfg.tetra.validate()?;
    if count == 0 {
        return Err(DatagenError::InvalidConfig("count must be at least 1".into()));
    }
    if !(cfg.delta.is_finite() && cfg.delta >= 0.0) {
        return Err(DatagenError::InvalidConfig("delta must be finite and non-negative".into()));
    }
    (0..count as u64)
        .map(|pair| {
            let [a, b] = tetra_pair(seed, pair, &cfg.tetra)?;
            let base = f_achiral(&a.0);
            let mk = |(graph, chirality, s): (MolecularGraph, Chirality, u64), is_mirror| SyntheticSample {
                graph,
                label: Label::Value(base + chirality.sign() * cfg.delta),
                meta: SampleMeta {
                    seed: s,
                    is_mirror,
                    pair_id: pair,
                    chirality,
                    center: 0,
                },
            };
            let smaller = if a.1 == Chirality::R { Member::A } else { Member::B };
            Ok(RankingPair {
                a: mk(a, false),
                b: mk(b, true),
                smaller,
            })
        })
        .collect()
}

pub fn gen_ranking_pairs(seed: u64, count: usize) -> Result<Vec<RankingPair>, DatagenError> {
    gen_ranking_pairs_with(seed, count, &RankingConfig::default())
}

/// Both members of every pair, in pair order.
pub fn flatten_pairs(pairs: Vec<RankingPair>) -> Vec<SyntheticSample> {
    pairs.into_iter().flat_map(|p| [p.a, p.b]).collect()
}

/// Rotates the smaller side of bridge bond `src–dst` by `angle` radians about
/// the bond axis. Ties rotate the `dst` side.
pub fn perturb_conformer(g: &MolecularGraph, bond: (usize, usize), angle: f64) -> Result<MolecularGraph, DatagenError> {
    let (src, dst) = bond;
    if !g.has_bond(src, dst) {
        return Err(DatagenError::UnknownBond { src, dst });
    }
    let adj = g.adjacency();
    let mut on_dst_side = vec![false; g.atom_count()];
    on_dst_side[dst] = true;
    let mut queue = VecDeque::from([dst]);
    while let Some(a) = queue.pop_front() {
        for &b in &adj[a] {
            if a == dst && b == src {
                continue;
            }
            if b == src {
                return Err(DatagenError::NotRotatable { src, dst });
            }
            if !on_dst_side[b] {
                on_dst_side[b] = true;
                queue.push_back(b);
            }
        }
    }
    let dst_count = on_dst_side.iter().filter(|&&s| s).count();
    let rotate_dst = 2 * dst_count <= g.atom_count();
    let (p, q) = (g.coords(src), g.coords(dst));
    let axis = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
    let t = RigidTransform::about_axis(p, axis, angle);
    let coords: Vec<[f64; 3]> = (0..g.atom_count())
        .map(|a| {
            let c = g.coords(a);
            if on_dst_side[a] == rotate_dst {
                t.apply(c)
            } else {
                c
            }
        })
        .collect();
    Ok(g.with_coords(&coords)?)
}

/// Random tree-shaped molecule with `n_atoms` atoms, valence ≤ 4, bond
/// lengths in [1.0, 1.6] Å and no two atoms closer than 0.9 Å.
pub fn gen_random_molecule<R: Rng + ?Sized>(rng: &mut R, n_atoms: usize) -> Result<MolecularGraph, DatagenError> {
    gen_random_molecule_with(rng, n_atoms, 4)
}

/// [`gen_random_molecule`] with a custom valence cap.
pub fn gen_random_molecule_with<R: Rng + ?Sized>(
    rng: &mut R,
    n_atoms: usize,
    max_degree: usize,
) -> Result<MolecularGraph, DatagenError> {
    if n_atoms == 0 {
        return Err(DatagenError::InvalidConfig("a molecule needs at least one atom".into()));
    }
    if n_atoms > 2 && max_degree < 2 {
        return Err(DatagenError::InvalidConfig("max_degree must be at least 2".into()));
    }
    let mut elements = vec![STANDARD_ELEMENTS[rng.random_range(0..STANDARD_ELEMENTS.len())]];
    let mut coords: Vec<Vector3<f64>> = vec![Vector3::zeros()];
    let mut degree = vec![0usize];
    let mut bonds = Vec::new();
    let mut attempts = 0;
    while elements.len() < n_atoms {
        attempts += 1;
        if attempts > 100_000 {
            return Err(DatagenError::InvalidConfig("could not place atoms without clashes".into()));
        }
        let parent = rng.random_range(0..elements.len());
        if degree[parent] >= max_degree {
            continue;
        }
        let dir: Vector3<f64> = loop {
            let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                break v / n;
            }
        };
        let pos = coords[parent] + dir * rng.random_range(1.0..1.6);
        if coords.iter().any(|c| (c - pos).norm() < 0.9) {
            continue;
        }
        let order = if rng.random_bool(0.8) { BondOrder::Single } else { BondOrder::Double };
        bonds.push((parent, elements.len(), order));
        degree[parent] += 1;
        degree.push(1);
        coords.push(pos);
        elements.push(STANDARD_ELEMENTS[rng.random_range(1..STANDARD_ELEMENTS.len())]);
    }
    let coords: Vec<[f64; 3]> = coords.into_iter().map(Into::into).collect();
    Ok(MolecularGraph::from_topology(
        "random",
        Vocabulary::standard(),
        &elements,
        &coords,
        &bonds,
    )?)
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    schema_version: u32,
    graph: MolecularGraph,
    label: Label,
    meta: SampleMeta,
}

/// One JSON object per line, each carrying `schema_version`.
pub fn to_jsonl(samples: &[SyntheticSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let line = SampleLine {
            schema_version: DATASET_SCHEMA_VERSION,
            graph: s.graph.clone(),
            label: s.label,
            meta: s.meta.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<SyntheticSample>, DatagenError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| DatagenError::Format {
            line,
            message: e.to_string(),
        })?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == DATASET_SCHEMA_VERSION as u64 => {}
            Some(found) => return Err(DatagenError::SchemaVersion { found }),
            None => {
                return Err(DatagenError::Format {
                    line,
                    message: "missing schema_version".into(),
                })
            }
        }
        let parsed: SampleLine = serde_json::from_value(value).map_err(|e| DatagenError::Format {
            line,
            message: e.to_string(),
        })?;
        out.push(SyntheticSample {
            graph: parsed.graph,
            label: parsed.label,
            meta: parsed.meta,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ordering::{all_orders, cyclic_equivalent};

    const SQRT3: f64 = 1.732_050_807_568_877_2;

    #[test]
    fn oracle_golden() {
        let v4 = [-1.0 / SQRT3, -1.0 / SQRT3, -1.0 / SQRT3];
        // det[v1−v4, v2−v4, v3−v4] = 1 + 3/√3 > 0
        let subs = [(1, [1.0, 0.0, 0.0]), (2, [0.0, 1.0, 0.0]), (3, [0.0, 0.0, 1.0]), (4, v4)];
        assert_eq!(chirality_oracle([0.0; 3], subs).unwrap(), Chirality::S);
        let mirrored = subs.map(|(r, p)| (r, [-p[0], p[1], p[2]]));
        assert_eq!(chirality_oracle([0.0; 3], mirrored).unwrap(), Chirality::R);
    }

    #[test]
    fn oracle_rejects_coplanar_and_bad_ranks() {
        let flat = [(1, [1.0, 0.0, 0.0]), (2, [0.0, 1.0, 0.0]), (3, [-1.0, 0.0, 0.0]), (4, [0.0, -1.0, 0.0])];
        assert!(matches!(chirality_oracle([0.0; 3], flat), Err(DatagenError::Degenerate { .. })));
        let dup = [(1, [1.0, 0.0, 0.0]), (1, [0.0, 1.0, 0.0]), (3, [0.0, 0.0, 1.0]), (4, [-1.0, -1.0, -1.0])];
        assert!(matches!(chirality_oracle([0.0; 3], dup), Err(DatagenError::InvalidRanks(_))));
    }

    #[test]
    fn pair_has_opposite_labels() {
        let s = gen_tetrahedral(3, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].meta.pair_id, s[1].meta.pair_id);
        assert_eq!(s[0].meta.chirality.opposite(), s[1].meta.chirality);
        assert_eq!(mirror(&s[0].graph).atoms(), s[1].graph.atoms());
    }

    #[test]
    fn odd_count_leaves_one_unpaired() {
        let s = gen_tetrahedral(3, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert!(!s[0].meta.is_mirror);
        assert_eq!(gen_tetrahedral(3, 5).unwrap().len(), 5);
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_tetrahedral(11, 40).unwrap();
        assert_eq!(a, gen_tetrahedral(11, 40).unwrap());
        let s_count = a.iter().filter(|s| s.meta.chirality == Chirality::S).count();
        assert_eq!(s_count, 20);
    }

    #[test]
    fn order_label_agrees_with_oracle() {
        for s in gen_tetrahedral(5, 200).unwrap() {
            assert_eq!(order_chirality(&s.graph, 0).unwrap(), s.meta.chirality);
        }
    }

    #[test]
    fn ranking_targets_differ_by_two_delta() {
        for p in gen_ranking_pairs(2, 20).unwrap() {
            let (Label::Value(a), Label::Value(b)) = (p.a.label, p.b.label) else { panic!() };
            assert!(((a - b).abs() - 1.0).abs() < 1e-12);
            let smaller_is_a = a < b;
            assert_eq!(smaller_is_a, p.smaller == Member::A);
        }
        let zero = RankingConfig {
            delta: 0.0,
            ..RankingConfig::default()
        };
        for p in gen_ranking_pairs_with(2, 5, &zero).unwrap() {
            assert_eq!(p.a.label, p.b.label);
        }
    }

    #[test]
    fn f_achiral_is_mirror_blind() {
        let s = gen_tetrahedral(8, 2).unwrap();
        assert!((f_achiral(&s[0].graph) - f_achiral(&s[1].graph)).abs() < 1e-12);
    }

    #[test]
    fn conformer_rotation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = gen_random_molecule(&mut rng, 8).unwrap();
        let (a, b, _) = g.undirected_bonds()[2];
        let same = perturb_conformer(&g, (a, b), 0.0).unwrap();
        assert_eq!(same.atoms(), g.atoms());
        let full = perturb_conformer(&g, (a, b), std::f64::consts::TAU).unwrap();
        for i in 0..g.atom_count() {
            for d in 0..3 {
                assert!((full.coords(i)[d] - g.coords(i)[d]).abs() < 1e-9);
            }
        }
        let eg0 = to_edge_graph(&g);
        let o0 = all_orders(&eg0, ParallelPolicy::Reject).unwrap();
        let moved = perturb_conformer(&g, (a, b), 1.1).unwrap();
        let o1 = all_orders(&to_edge_graph(&moved), ParallelPolicy::Reject).unwrap();
        for (x, y) in o0.iter().zip(&o1) {
            assert!(cyclic_equivalent(x, y).unwrap());
        }
    }

    #[test]
    fn ring_bond_is_not_rotatable() {
        let coords = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.75, 1.3, 0.0]];
        let g = MolecularGraph::from_topology(
            "ring",
            Vocabulary::standard(),
            &["C", "C", "C"],
            &coords,
            &[(0, 1, BondOrder::Single), (1, 2, BondOrder::Single), (0, 2, BondOrder::Single)],
        )
        .unwrap();
        let err = perturb_conformer(&g, (0, 1), 0.3).unwrap_err();
        assert_eq!(err.to_string(), "bond 0-1 is not a rotatable bond");
    }

    #[test]
    fn jsonl_round_trip_and_version() {
        let s = gen_tetrahedral(1, 4).unwrap();
        let text = to_jsonl(&s);
        assert_eq!(text.lines().count(), 4);
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back.len(), 4);
        for (x, y) in s.iter().zip(&back) {
            assert_eq!(x.graph.atoms(), y.graph.atoms());
            assert_eq!(x.label, y.label);
            assert_eq!(x.meta, y.meta);
        }
        let bad = text.replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        assert_eq!(from_jsonl(&bad), Err(DatagenError::SchemaVersion { found: 7 }));
    }
}
