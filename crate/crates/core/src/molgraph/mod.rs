//! Featurized 3D molecular graphs with paired directed bonds.

mod features;
mod sdf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, RigidTransform};

pub use features::{
    bond_one_hot, featurize, featurize_with, normalize_symbol, Vocabulary, BOND_FEATURES,
    STANDARD_ELEMENTS,
};
pub use sdf::{parse_sdf, parse_sdf_records, parse_sdf_records_with};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MolError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown element {0:?}")]
    UnknownElement(String),
    #[error("unsupported bond order {0}")]
    UnsupportedBondOrder(u8),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// File code: 1, 2, 3, or 4 (aromatic).
    pub fn from_code(code: u8) -> Result<Self, MolError> {
        match code {
            1 => Ok(Self::Single),
            2 => Ok(Self::Double),
            3 => Ok(Self::Triple),
            4 => Ok(Self::Aromatic),
            other => Err(MolError::UnsupportedBondOrder(other)),
        }
    }

    pub fn code(self) -> u8 {
        self.slot() as u8 + 1
    }

    fn slot(self) -> usize {
        match self {
            Self::Single => 0,
            Self::Double => 1,
            Self::Triple => 2,
            Self::Aromatic => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub element: String,
    pub features: Vec<f64>,
    /// Ångström.
    pub coords: [f64; 3],
}

/// One direction of a bond; every `src → dst` has a matching `dst → src`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bond {
    pub src: usize,
    pub dst: usize,
    pub order: BondOrder,
    pub features: Vec<f64>,
}

/// Atoms with coordinates plus paired directed bonds. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GraphJson", try_from = "GraphJson")]
pub struct MolecularGraph {
    name: String,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

impl MolecularGraph {
    /// Validates bond pairing, self-loops, duplicates, finiteness and feature widths.
    pub fn new(name: impl Into<String>, atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, MolError> {
        let invalid = |m: String| Err(MolError::InvalidGraph(m));
        if let Some(first) = atoms.first() {
            let n = first.features.len();
            for (i, a) in atoms.iter().enumerate() {
                if a.features.len() != n {
                    return invalid(format!("atom {i} has {} features, expected {n}", a.features.len()));
                }
                if !a.coords.iter().all(|c| c.is_finite()) {
                    return invalid(format!("atom {i} has non-finite coordinates"));
                }
            }
        }
        let mut seen = std::collections::HashMap::new();
        for (b_idx, b) in bonds.iter().enumerate() {
            if b.src >= atoms.len() || b.dst >= atoms.len() {
                return invalid(format!("bond {}->{} references a missing atom", b.src, b.dst));
            }
            if b.src == b.dst {
                return invalid(format!("self-loop on atom {}", b.src));
            }
            if b.features.len() != bonds[0].features.len() {
                return invalid(format!("bond {}->{} has a different feature width", b.src, b.dst));
            }
            if seen.insert((b.src, b.dst), b_idx).is_some() {
                return invalid(format!("duplicate bond {}->{}", b.src, b.dst));
            }
        }
        for b in &bonds {
            match seen.get(&(b.dst, b.src)) {
                Some(&r) if bonds[r].features == b.features && bonds[r].order == b.order => {}
                Some(_) => return invalid(format!("bond {}->{} differs from its reverse", b.src, b.dst)),
                None => return invalid(format!("bond {}->{} has no reverse", b.src, b.dst)),
            }
        }
        Ok(Self {
            name: name.into(),
            atoms,
            bonds,
        })
    }

    /// Featurizes `elements` with `vocab` and expands each undirected bond
    /// into the pair `a → b`, `b → a`.
    pub fn from_topology(
        name: impl Into<String>,
        vocab: &Vocabulary,
        elements: &[&str],
        coords: &[[f64; 3]],
        bonds: &[(usize, usize, BondOrder)],
    ) -> Result<Self, MolError> {
        if elements.len() != coords.len() {
            return Err(MolError::InvalidGraph(format!(
                "{} elements but {} coordinates",
                elements.len(),
                coords.len()
            )));
        }
        let atoms = elements
            .iter()
            .zip(coords)
            .map(|(e, c)| {
                Ok(Atom {
                    element: normalize_symbol(e).unwrap_or(e).to_string(),
                    features: vocab.one_hot(e)?,
                    coords: *c,
                })
            })
            .collect::<Result<Vec<_>, MolError>>()?;
        let mut directed = Vec::with_capacity(2 * bonds.len());
        for &(a, b, order) in bonds {
            let features = bond_one_hot(order);
            directed.push(Bond { src: a, dst: b, order, features: features.clone() });
            directed.push(Bond { src: b, dst: a, order, features });
        }
        Self::new(name, atoms, directed)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn coords(&self, atom: usize) -> [f64; 3] {
        self.atoms[atom].coords
    }

    /// Atom feature width `N` (0 for an empty graph).
    pub fn atom_feature_len(&self) -> usize {
        self.atoms.first().map_or(0, |a| a.features.len())
    }

    /// Bond feature width `M` (0 when there are no bonds).
    pub fn bond_feature_len(&self) -> usize {
        self.bonds.first().map_or(0, |b| b.features.len())
    }

    pub fn has_bond(&self, src: usize, dst: usize) -> bool {
        self.bonds.iter().any(|b| b.src == src && b.dst == dst)
    }

    /// Sorted neighbor lists per atom.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.src].push(b.dst);
        }
        adj.iter_mut().for_each(|v| v.sort_unstable());
        adj
    }

    /// Each bond once, as `(min, max, order)`, in first-appearance order.
    pub fn undirected_bonds(&self) -> Vec<(usize, usize, BondOrder)> {
        self.bonds
            .iter()
            .filter(|b| b.src < b.dst)
            .map(|b| (b.src, b.dst, b.order))
            .collect()
    }

    /// Same topology and features with new coordinates.
    pub fn with_coords(&self, coords: &[[f64; 3]]) -> Result<Self, MolError> {
        if coords.len() != self.atoms.len() {
            return Err(MolError::InvalidGraph(format!(
                "{} coordinates for {} atoms",
                coords.len(),
                self.atoms.len()
            )));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(MolError::InvalidGraph("non-finite coordinates".into()));
        }
        let mut out = self.clone();
        for (a, c) in out.atoms.iter_mut().zip(coords) {
            a.coords = *c;
        }
        Ok(out)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Permutes atom indices: atom `i` becomes atom `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self, MolError> {
        let n = self.atoms.len();
        let mut check = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut check[p], true)) {
            return Err(MolError::InvalidGraph("relabeling is not a permutation".into()));
        }
        let mut atoms = self.atoms.clone();
        for (i, a) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = a.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond { src: perm[b.src], dst: perm[b.dst], ..b.clone() })
            .collect();
        Self::new(self.name.clone(), atoms, bonds)
    }
}

/// Reflection through the yz-plane: `(x, y, z) ↦ (−x, y, z)`.
pub fn mirror(g: &MolecularGraph) -> MolecularGraph {
    let mut out = g.clone();
    for a in &mut out.atoms {
        a.coords[0] = -a.coords[0];
    }
    out
}

/// Applies `c ↦ R·c + t` to every atom; rejects improper or non-orthonormal `R`.
pub fn apply_rigid(g: &MolecularGraph, t: &RigidTransform) -> Result<MolecularGraph, MolError> {
    t.validate()?;
    let mut out = g.clone();
    for a in &mut out.atoms {
        a.coords = t.apply(a.coords);
    }
    Ok(out)
}

/// JSON form: `{"name", "atoms": [{"element", "xyz"}], "bonds": [{"src", "dst", "order"}]}`.
///
/// Bonds are listed once per undirected pair (`src < dst`); features are
/// rebuilt from the standard vocabulary on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphJson {
    #[serde(default)]
    pub name: String,
    pub atoms: Vec<AtomJson>,
    pub bonds: Vec<BondJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomJson {
    pub element: String,
    pub xyz: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BondJson {
    pub src: usize,
    pub dst: usize,
    pub order: u8,
}

impl From<MolecularGraph> for GraphJson {
    fn from(g: MolecularGraph) -> Self {
        GraphJson {
            bonds: g
                .undirected_bonds()
                .into_iter()
                .map(|(src, dst, order)| BondJson { src, dst, order: order.code() })
                .collect(),
            atoms: g
                .atoms
                .into_iter()
                .map(|a| AtomJson { element: a.element, xyz: a.coords })
                .collect(),
            name: g.name,
        }
    }
}

impl TryFrom<GraphJson> for MolecularGraph {
    type Error = MolError;

    fn try_from(j: GraphJson) -> Result<Self, Self::Error> {
        let elements: Vec<&str> = j.atoms.iter().map(|a| a.element.as_str()).collect();
        let coords: Vec<[f64; 3]> = j.atoms.iter().map(|a| a.xyz).collect();
        let bonds = j
            .bonds
            .iter()
            .map(|b| Ok((b.src, b.dst, BondOrder::from_code(b.order)?)))
            .collect::<Result<Vec<_>, MolError>>()?;
        MolecularGraph::from_topology(j.name, Vocabulary::standard(), &elements, &coords, &bonds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn path3() -> MolecularGraph {
        MolecularGraph::from_topology(
            "path",
            Vocabulary::standard(),
            &["C", "O", "N"],
            &[[1.0, 2.0, 3.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            &[(0, 1, BondOrder::Single), (1, 2, BondOrder::Double)],
        )
        .unwrap()
    }

    #[test]
    fn bonds_are_paired() {
        let g = path3();
        assert_eq!(g.bonds().len(), 4);
        for b in g.bonds() {
            assert!(g.bonds().iter().any(|r| r.src == b.dst && r.dst == b.src && r.features == b.features));
        }
    }

    #[test]
    fn unpaired_bond_is_rejected() {
        let g = path3();
        let mut bonds = g.bonds().to_vec();
        bonds.pop();
        assert!(MolecularGraph::new("x", g.atoms().to_vec(), bonds).is_err());
    }

    #[test]
    fn self_loop_and_duplicate_are_rejected() {
        let v = Vocabulary::standard();
        let c = [[0.0; 3], [1.0, 0.0, 0.0]];
        let self_loop = MolecularGraph::from_topology("x", v, &["C", "C"], &c, &[(0, 0, BondOrder::Single)]);
        assert!(self_loop.is_err());
        let dup = MolecularGraph::from_topology(
            "x",
            v,
            &["C", "C"],
            &c,
            &[(0, 1, BondOrder::Single), (1, 0, BondOrder::Single)],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn mirror_negates_x() {
        let g = path3();
        assert_eq!(mirror(&g).coords(0), [-1.0, 2.0, 3.0]);
        assert_eq!(mirror(&mirror(&g)), g);
    }

    #[test]
    fn mirror_fixes_yz_plane() {
        let g = path3();
        let planar: Vec<[f64; 3]> = g.atoms().iter().map(|a| [0.0, a.coords[1], a.coords[2]]).collect();
        let g = g.with_coords(&planar).unwrap();
        assert_eq!(mirror(&g), g);
    }

    #[test]
    fn rigid_identity_and_translation() {
        let g = path3();
        assert_eq!(apply_rigid(&g, &RigidTransform::identity()).unwrap(), g);
        let shifted = apply_rigid(&g, &RigidTransform::from_translation([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(shifted.coords(1), [1.0, 1.0, 0.0]);
    }

    #[test]
    fn rigid_quarter_turn_about_z() {
        let g = path3().with_coords(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let out = apply_rigid(&g, &RigidTransform::from_rotation(rz).unwrap()).unwrap();
        let p = out.coords(0);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn rigid_rejects_non_orthonormal() {
        let t = RigidTransform {
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 1e-6, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        };
        assert!(matches!(apply_rigid(&path3(), &t), Err(MolError::Geometry(_))));
    }

    #[test]
    fn json_round_trip() {
        let g = path3();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"xyz\""));
        let back: MolecularGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #[test]
        fn rigid_motion_preserves_distances(seed in any::<u64>(), coords in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 3)) {
            use rand::SeedableRng;
            let g = path3().with_coords(&coords).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = RigidTransform::random(&mut rng, 10.0);
            let moved = apply_rigid(&g, &t).unwrap();
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let d0 = dist(g.coords(i), g.coords(j));
                    let d1 = dist(moved.coords(i), moved.coords(j));
                    prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1e-12));
                }
            }
        }
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}
