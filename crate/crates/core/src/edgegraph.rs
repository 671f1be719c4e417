//! Edge (dual) graph: one node per directed bond, one edge per pair of bonds
//! meeting head-to-tail at a shared atom.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::molgraph::MolecularGraph;

/// Directed bond `src → dst`, used as an edge-graph node key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub src: usize,
    pub dst: usize,
}

impl NodeKey {
    pub fn new(src: usize, dst: usize) -> Self {
        Self { src, dst }
    }

    /// The reverse bond `dst → src`.
    pub fn parallel(self) -> Self {
        Self::new(self.dst, self.src)
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdgeGraphError {
    #[error("no edge-graph node {0}")]
    UnknownNode(NodeKey),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeNode {
    pub key: NodeKey,
    /// Copy of the bond features `e_ij`.
    pub features: Vec<f64>,
    /// `c_i | c_j`.
    pub coord: [f64; 6],
}

impl EdgeNode {
    pub fn src_coord(&self) -> [f64; 3] {
        [self.coord[0], self.coord[1], self.coord[2]]
    }

    pub fn dst_coord(&self) -> [f64; 3] {
        [self.coord[3], self.coord[4], self.coord[5]]
    }
}

/// Dual edge `(i→j) ⇒ (j→k)` with features `e_ij | x_j | e_jk`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEdge {
    pub from: usize,
    pub to: usize,
    pub features: Vec<f64>,
}

/// Dual of a [`MolecularGraph`]. Structure is fixed at construction; only
/// `states` changes during a forward pass.
#[derive(Clone, Debug)]
pub struct EdgeGraph {
    nodes: Vec<EdgeNode>,
    index: HashMap<NodeKey, usize>,
    edges: Vec<DualEdge>,
    incoming: Vec<Vec<usize>>,
    /// `x_i | x_j` per node, kept for the initial embedding.
    endpoint_features: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
}

/// Builds the dual graph. Node `n` corresponds to `g.bonds()[n]`.
///
/// Every head-to-tail pair is materialized, including `(i→j) ⇒ (j→i)`;
/// the parallel node is filtered at query time by [`EdgeGraph::incoming_neighbors`].
pub fn to_edge_graph(g: &MolecularGraph) -> EdgeGraph {
    let bonds = g.bonds();
    let mut nodes = Vec::with_capacity(bonds.len());
    let mut index = HashMap::with_capacity(bonds.len());
    let mut endpoint_features = Vec::with_capacity(bonds.len());
    let mut out_of = vec![Vec::new(); g.atom_count()];
    for (n, b) in bonds.iter().enumerate() {
        let (ci, cj) = (g.coords(b.src), g.coords(b.dst));
        let key = NodeKey::new(b.src, b.dst);
        nodes.push(EdgeNode {
            key,
            features: b.features.clone(),
            coord: [ci[0], ci[1], ci[2], cj[0], cj[1], cj[2]],
        });
        index.insert(key, n);
        let mut ends = g.atoms()[b.src].features.clone();
        ends.extend_from_slice(&g.atoms()[b.dst].features);
        endpoint_features.push(ends);
        out_of[b.src].push(n);
    }

    let mut edges = Vec::new();
    let mut incoming = vec![Vec::new(); nodes.len()];
    for (from, b) in bonds.iter().enumerate() {
        for &to in &out_of[b.dst] {
            let mut features = b.features.clone();
            features.extend_from_slice(&g.atoms()[b.dst].features);
            features.extend_from_slice(&bonds[to].features);
            incoming[to].push(from);
            edges.push(DualEdge { from, to, features });
        }
    }
    for list in &mut incoming {
        list.sort_by_key(|&n| nodes[n].key);
    }

    EdgeGraph {
        nodes,
        index,
        edges,
        incoming,
        endpoint_features,
        states: Vec::new(),
    }
}

impl EdgeGraph {
    pub fn nodes(&self) -> &[EdgeNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[DualEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, key: NodeKey) -> Result<usize, EdgeGraphError> {
        self.index.get(&key).copied().ok_or(EdgeGraphError::UnknownNode(key))
    }

    pub fn node(&self, key: NodeKey) -> Result<&EdgeNode, EdgeGraphError> {
        Ok(&self.nodes[self.node_index(key)?])
    }

    /// Index of the reverse bond's node.
    pub fn parallel_index(&self, node: usize) -> usize {
        self.index[&self.nodes[node].key.parallel()]
    }

    /// Initial-embedding input `e_ij | x_i | x_j` for node index `n`.
    pub fn init_input(&self, n: usize) -> Vec<f64> {
        let mut v = self.nodes[n].features.clone();
        v.extend_from_slice(&self.endpoint_features[n]);
        v
    }

    /// Width of [`EdgeGraph::init_input`]: `M + 2N`.
    pub fn init_input_len(&self) -> usize {
        self.nodes
            .first()
            .map_or(0, |n| n.features.len() + self.endpoint_features[0].len())
    }

    /// Node indices with an edge into `node`, parallel node included, sorted by key.
    pub fn incoming_indices(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    /// All `(i, j)` with an edge into `(j, k)`, excluding the parallel `(k, j)`.
    pub fn incoming_neighbors(&self, key: NodeKey) -> Result<Vec<NodeKey>, EdgeGraphError> {
        let n = self.node_index(key)?;
        Ok(self.incoming[n]
            .iter()
            .map(|&m| self.nodes[m].key)
            .filter(|k| *k != key.parallel())
            .collect())
    }

    /// Deterministic debug dump: keys as `"i->j"`, adjacency sorted lexicographically.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct NodeOut {
            key: String,
            features: Vec<f64>,
            coord: [f64; 6],
            incoming: Vec<String>,
        }
        #[derive(Serialize)]
        struct EdgeOut {
            from: String,
            to: String,
            features: Vec<f64>,
        }
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| self.nodes[a].key.to_string().cmp(&self.nodes[b].key.to_string()));
        let nodes: Vec<NodeOut> = order
            .iter()
            .map(|&n| {
                let mut incoming: Vec<String> =
                    self.incoming[n].iter().map(|&m| self.nodes[m].key.to_string()).collect();
                incoming.sort();
                NodeOut {
                    key: self.nodes[n].key.to_string(),
                    features: self.nodes[n].features.clone(),
                    coord: self.nodes[n].coord,
                    incoming,
                }
            })
            .collect();
        let mut edges: Vec<EdgeOut> = self
            .edges
            .iter()
            .map(|e| EdgeOut {
                from: self.nodes[e.from].key.to_string(),
                to: self.nodes[e.to].key.to_string(),
                features: e.features.clone(),
            })
            .collect();
        edges.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));
        serde_json::json!({ "nodes": nodes, "edges": edges })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{BondOrder, Vocabulary};

    fn graph(elements: &[&str], bonds: &[(usize, usize)]) -> MolecularGraph {
        let coords: Vec<[f64; 3]> = (0..elements.len()).map(|i| [i as f64, (i * i) as f64, 0.5 * i as f64]).collect();
        let bonds: Vec<_> = bonds.iter().map(|&(a, b)| (a, b, BondOrder::Single)).collect();
        MolecularGraph::from_topology("t", Vocabulary::standard(), elements, &coords, &bonds).unwrap()
    }

    fn k(a: usize, b: usize) -> NodeKey {
        NodeKey::new(a, b)
    }

    #[test]
    fn path_of_three() {
        let eg = to_edge_graph(&graph(&["C", "C", "C"], &[(0, 1), (1, 2)]));
        assert_eq!(eg.len(), 4);
        let into_bc = eg.incoming_indices(eg.node_index(k(1, 2)).unwrap());
        let keys: Vec<NodeKey> = into_bc.iter().map(|&n| eg.nodes()[n].key).collect();
        assert_eq!(keys, vec![k(0, 1), k(2, 1)]);
        assert_eq!(eg.incoming_neighbors(k(1, 2)).unwrap(), vec![k(0, 1)]);
    }

    #[test]
    fn single_bond() {
        let eg = to_edge_graph(&graph(&["C", "O"], &[(0, 1)]));
        assert_eq!(eg.len(), 2);
        let pairs: Vec<(NodeKey, NodeKey)> =
            eg.edges().iter().map(|e| (eg.nodes()[e.from].key, eg.nodes()[e.to].key)).collect();
        assert_eq!(pairs.len(), 2);
        assert!(pairs.contains(&(k(0, 1), k(1, 0))));
        assert!(pairs.contains(&(k(1, 0), k(0, 1))));
        assert!(eg.incoming_neighbors(k(0, 1)).unwrap().is_empty());
    }

    #[test]
    fn methane_star() {
        let eg = to_edge_graph(&graph(&["C", "H", "H", "H", "H"], &[(0, 1), (0, 2), (0, 3), (0, 4)]));
        assert_eq!(eg.len(), 8);
        for h in 1..=4 {
            let n = eg.node_index(k(0, h)).unwrap();
            assert_eq!(eg.incoming_indices(n).len(), 4);
        }
        assert_eq!(eg.incoming_neighbors(k(0, 1)).unwrap(), vec![k(2, 0), k(3, 0), k(4, 0)]);
    }

    #[test]
    fn coords_and_edge_features() {
        let g = graph(&["C", "O", "N"], &[(0, 1), (1, 2)]);
        let eg = to_edge_graph(&g);
        let node = eg.node(k(0, 1)).unwrap();
        assert_eq!(node.src_coord(), g.coords(0));
        assert_eq!(node.dst_coord(), g.coords(1));
        let e = eg
            .edges()
            .iter()
            .find(|e| eg.nodes()[e.from].key == k(0, 1) && eg.nodes()[e.to].key == k(1, 2))
            .unwrap();
        let m = g.bond_feature_len();
        let n = g.atom_feature_len();
        assert_eq!(e.features.len(), 2 * m + n);
        assert_eq!(&e.features[m..m + n], &g.atoms()[1].features[..]);
        assert_eq!(eg.init_input_len(), m + 2 * n);
    }

    #[test]
    fn unknown_node() {
        let eg = to_edge_graph(&graph(&["C", "O"], &[(0, 1)]));
        assert_eq!(eg.incoming_neighbors(k(0, 5)), Err(EdgeGraphError::UnknownNode(k(0, 5))));
    }

    #[test]
    fn json_dump_is_sorted() {
        let eg = to_edge_graph(&graph(&["C", "H", "H", "H", "H"], &[(0, 1), (0, 2), (0, 3), (0, 4)]));
        let v = eg.to_json();
        let keys: Vec<&str> = v["nodes"].as_array().unwrap().iter().map(|n| n["key"].as_str().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), 8);
    }
}
