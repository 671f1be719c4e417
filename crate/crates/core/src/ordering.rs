//! Chirality-sensitive cyclic order of incoming neighbors.
//!
//! For a node `j → k` the frame is moved so that `c_j` is the origin and the
//! bond points along `+x`. Each neighbor `i → j` is then placed by the angle of
//! its source atom's `(y, z)` projection, measured from `+y` toward `+z` over
//! the full circle. Rigid motions only rotate that circle, so the resulting
//! order is defined up to a cyclic shift; a reflection reverses it.
//!
//! Rotations are right-handed: a rotation about `x` by `θ` carries `+y` toward `+z`.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::edgegraph::{EdgeGraph, EdgeGraphError, NodeKey};
pub use crate::geometry::RigidTransform;

/// Minimum bond length and minimum yz-projection norm.
pub const DEGENERACY_TOLERANCE: f64 = 1e-9;
/// Angles closer than this are ordered by source-atom index.
pub const ANGLE_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrderingError {
    #[error("zero-length bond")]
    ZeroLengthBond,
    #[error("neighbor parallel to reference bond")]
    ParallelProjection,
    #[error("zero-length bond at node {node}")]
    DegenerateNode { node: NodeKey },
    #[error("neighbor {neighbor} parallel to reference bond at node {node}")]
    ParallelNeighbor { node: NodeKey, neighbor: NodeKey },
    #[error("orders for {0} and {1} cover different neighbor sets")]
    KeySetMismatch(NodeKey, NodeKey),
    #[error(transparent)]
    EdgeGraph(#[from] EdgeGraphError),
}

/// Handling of neighbors whose source atom lies on the reference bond axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ParallelPolicy {
    /// Fail with [`OrderingError::ParallelNeighbor`].
    #[default]
    Reject,
    /// Append such neighbors after the angular ones, by source-atom index,
    /// with a NaN angle.
    AppendAtEnd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborOrder {
    pub node: NodeKey,
    pub sequence: Vec<NodeKey>,
    /// Radians in `[0, 2π)`, aligned with `sequence`.
    pub angles: Vec<f64>,
}

impl NeighborOrder {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// Same neighbors in the opposite cyclic direction.
    pub fn reversed(&self) -> NeighborOrder {
        NeighborOrder {
            node: self.node,
            sequence: self.sequence.iter().rev().copied().collect(),
            angles: self.angles.iter().rev().copied().collect(),
        }
    }
}

/// Rigid motion taking `c_j` to the origin and `c_k` to `(‖c_k − c_j‖, 0, 0)`.
///
/// Built as a translation by `−c_j`, a rotation about `x` that moves the
/// bond's yz-projection onto `+z`, then a rotation about `y` onto `+x`.
pub fn canonical_transform(c_j: [f64; 3], c_k: [f64; 3]) -> Result<RigidTransform, OrderingError> {
    let v = Vector3::from(c_k) - Vector3::from(c_j);
    let len = v.norm();
    if !(len > DEGENERACY_TOLERANCE) {
        return Err(OrderingError::ZeroLengthBond);
    }
    let r = v.y.hypot(v.z);
    let theta = v.y.atan2(v.z);
    let phi = r.atan2(v.x);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let rot_x = Matrix3::new(1.0, 0.0, 0.0, 0.0, ct, -st, 0.0, st, ct);
    let rot_y = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rotation = rot_y * rot_x;
    Ok(RigidTransform {
        translation: -(rotation * Vector3::from(c_j)),
        rotation,
    })
}

/// Full-circle angle of `(p_y, p_z)` from `+y` toward `+z`, in `[0, 2π)`.
pub fn projection_angle(p: [f64; 3]) -> Result<f64, OrderingError> {
    if !(p[1].hypot(p[2]) > DEGENERACY_TOLERANCE) {
        return Err(OrderingError::ParallelProjection);
    }
    let a = p[2].atan2(p[1]);
    let a = if a < 0.0 { a + TAU } else { a };
    // atan2 can return a value that rounds up to 2π after the shift.
    Ok(if a >= TAU { 0.0 } else { a })
}

/// Incoming neighbors of `key` sorted by projection angle around the bond.
pub fn neighbor_order(
    eg: &EdgeGraph,
    key: NodeKey,
    policy: ParallelPolicy,
) -> Result<NeighborOrder, OrderingError> {
    let node = eg.node(key)?;
    let frame = canonical_transform(node.src_coord(), node.dst_coord())
        .map_err(|_| OrderingError::DegenerateNode { node: key })?;

    let mut placed: Vec<(f64, NodeKey)> = Vec::new();
    let mut parallel: Vec<NodeKey> = Vec::new();
    for nb in eg.incoming_neighbors(key)? {
        let c_i = eg.node(nb)?.src_coord();
        match projection_angle(frame.apply(c_i)) {
            Ok(angle) => placed.push((angle, nb)),
            Err(_) if policy == ParallelPolicy::AppendAtEnd => parallel.push(nb),
            Err(_) => return Err(OrderingError::ParallelNeighbor { node: key, neighbor: nb }),
        }
    }
    placed.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= ANGLE_TIE_TOLERANCE {
            a.1.src.cmp(&b.1.src)
        } else {
            a.0.total_cmp(&b.0)
        }
    });
    parallel.sort_by_key(|k| k.src);

    let mut sequence: Vec<NodeKey> = placed.iter().map(|p| p.1).collect();
    let mut angles: Vec<f64> = placed.iter().map(|p| p.0).collect();
    sequence.extend(&parallel);
    angles.extend(std::iter::repeat_n(f64::NAN, parallel.len()));
    Ok(NeighborOrder {
        node: key,
        sequence,
        angles,
    })
}

/// Orders for every node, indexed like [`EdgeGraph::nodes`].
pub fn all_orders(eg: &EdgeGraph, policy: ParallelPolicy) -> Result<Vec<NeighborOrder>, OrderingError> {
    eg.nodes().iter().map(|n| neighbor_order(eg, n.key, policy)).collect()
}

/// `true` iff `b` is a rotation of `a`.
pub fn is_cyclic_shift<T: PartialEq>(a: &[T], b: &[T]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    if a.is_empty() {
        return true;
    }
    (0..a.len()).any(|s| (0..a.len()).all(|i| a[(i + s) % a.len()] == b[i]))
}

/// Whether two orders over the same neighbor set differ only by a shift.
pub fn cyclic_equivalent(a: &NeighborOrder, b: &NeighborOrder) -> Result<bool, OrderingError> {
    let mut ka = a.sequence.clone();
    let mut kb = b.sequence.clone();
    ka.sort();
    kb.sort();
    if ka != kb {
        return Err(OrderingError::KeySetMismatch(a.node, b.node));
    }
    Ok(is_cyclic_shift(&a.sequence, &b.sequence))
}

/// One line per node: `j->k: [i1->j, i2->j] angles=[a1, a2]`, six decimals.
pub fn format_orders(orders: &[NeighborOrder]) -> String {
    let mut out = String::new();
    for o in orders {
        let seq: Vec<String> = o.sequence.iter().map(|k| k.to_string()).collect();
        let angles: Vec<String> = o.angles.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(out, "{}: [{}] angles=[{}]", o.node, seq.join(", "), angles.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edgegraph::to_edge_graph;
    use crate::molgraph::{mirror, BondOrder, MolecularGraph, Vocabulary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn canonical_is_identity_when_aligned() {
        let t = canonical_transform([0.0; 3], [2.0, 0.0, 0.0]).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-15);
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn canonical_maps_z_bond_onto_x() {
        let t = canonical_transform([1.0, 1.0, 1.0], [1.0, 1.0, 2.0]).unwrap();
        let img = t.apply([1.0, 1.0, 2.0]);
        assert!((img[0] - 1.0).abs() < 1e-12 && img[1].abs() < 1e-12 && img[2].abs() < 1e-12);
        t.validate().unwrap();
    }

    #[test]
    fn canonical_random_bonds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let cj: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
            let ck: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
            let t = canonical_transform(cj, ck).unwrap();
            t.validate().unwrap();
            let o = t.apply(cj);
            let k = t.apply(ck);
            assert!(o.iter().all(|v| v.abs() < 1e-9));
            assert!(k[1].abs() < 1e-9 && k[2].abs() < 1e-9 && k[0] > 0.0);
        }
    }

    #[test]
    fn canonical_rejects_zero_bond() {
        assert_eq!(canonical_transform([1.0; 3], [1.0; 3]).unwrap_err(), OrderingError::ZeroLengthBond);
    }

    #[test]
    fn projection_angles() {
        assert_eq!(projection_angle([5.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((projection_angle([0.0, 0.0, 1.0]).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((projection_angle([0.0, -1.0, 0.0]).unwrap() - PI).abs() < 1e-15);
        assert!((projection_angle([0.0, 0.0, -1.0]).unwrap() - 3.0 * FRAC_PI_2).abs() < 1e-15);
        assert_eq!(projection_angle([3.0, 0.0, 0.0]), Err(OrderingError::ParallelProjection));
    }

    fn star(neighbors: &[[f64; 3]]) -> MolecularGraph {
        let mut coords = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        coords.extend_from_slice(neighbors);
        let elements: Vec<&str> = std::iter::repeat_n("C", coords.len()).collect();
        let bonds: Vec<_> = (1..coords.len()).map(|i| (0, i, BondOrder::Single)).collect();
        MolecularGraph::from_topology("star", Vocabulary::standard(), &elements, &coords, &bonds).unwrap()
    }

    fn at_angle(deg: f64) -> [f64; 3] {
        let a = deg.to_radians();
        [-0.4, a.cos(), a.sin()]
    }

    #[test]
    fn explicit_center_and_mirror_reversal() {
        // neighbors of 0->1 at yz-angles 130°, 10°, 250° (atoms 2, 3, 4)
        let g = star(&[at_angle(130.0), at_angle(10.0), at_angle(250.0)]);
        let key = NodeKey::new(0, 1);
        let o = neighbor_order(&to_edge_graph(&g), key, ParallelPolicy::Reject).unwrap();
        let srcs: Vec<usize> = o.sequence.iter().map(|k| k.src).collect();
        assert_eq!(srcs, vec![3, 2, 4]);
        assert!((o.angles[0] - 10f64.to_radians()).abs() < 1e-12);

        let m = neighbor_order(&to_edge_graph(&mirror(&g)), key, ParallelPolicy::Reject).unwrap();
        assert!(is_cyclic_shift(&o.reversed().sequence, &m.sequence));
        assert!(!cyclic_equivalent(&o, &m).unwrap());
    }

    #[test]
    fn small_orders() {
        let g = star(&[at_angle(40.0)]);
        let eg = to_edge_graph(&g);
        assert_eq!(neighbor_order(&eg, NodeKey::new(0, 1), ParallelPolicy::Reject).unwrap().len(), 1);
        assert!(neighbor_order(&eg, NodeKey::new(1, 0), ParallelPolicy::Reject).unwrap().is_empty());
    }

    #[test]
    fn parallel_neighbor_policies() {
        let g = star(&[at_angle(40.0), [-2.0, 0.0, 0.0]]);
        let eg = to_edge_graph(&g);
        let key = NodeKey::new(0, 1);
        assert_eq!(
            neighbor_order(&eg, key, ParallelPolicy::Reject).unwrap_err(),
            OrderingError::ParallelNeighbor { node: key, neighbor: NodeKey::new(3, 0) }
        );
        let o = neighbor_order(&eg, key, ParallelPolicy::AppendAtEnd).unwrap();
        assert_eq!(o.sequence, vec![NodeKey::new(2, 0), NodeKey::new(3, 0)]);
        assert!(o.angles[1].is_nan());
    }

    #[test]
    fn ties_break_by_source_index() {
        let g = star(&[[-0.5, 1.0, 0.0], [-1.5, 2.0, 0.0]]);
        let o = neighbor_order(&to_edge_graph(&g), NodeKey::new(0, 1), ParallelPolicy::Reject).unwrap();
        assert_eq!(o.sequence, vec![NodeKey::new(2, 0), NodeKey::new(3, 0)]);
    }

    #[test]
    fn cyclic_equivalence_cases() {
        let mk = |s: &[usize]| NeighborOrder {
            node: NodeKey::new(0, 9),
            sequence: s.iter().map(|&i| NodeKey::new(i, 0)).collect(),
            angles: vec![0.0; s.len()],
        };
        assert!(cyclic_equivalent(&mk(&[1, 2, 3]), &mk(&[3, 1, 2])).unwrap());
        assert!(!cyclic_equivalent(&mk(&[1, 2, 3]), &mk(&[1, 3, 2])).unwrap());
        assert!(cyclic_equivalent(&mk(&[4]), &mk(&[4])).unwrap());
        assert!(matches!(
            cyclic_equivalent(&mk(&[1, 2]), &mk(&[1, 3])),
            Err(OrderingError::KeySetMismatch(..))
        ));
    }

    #[test]
    fn dump_format() {
        let g = star(&[at_angle(90.0)]);
        let orders = all_orders(&to_edge_graph(&g), ParallelPolicy::Reject).unwrap();
        let text = format_orders(&orders);
        assert!(text.contains("0->1: [2->0] angles=[1.570796]"), "{text}");
        assert!(text.contains("1->0: [] angles=[]"));
    }
}
