use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    cyclic_windows, embed_init, layer_forward, layer_norm_row, readout, ChiennError, ChiennParams,
    Embedding, PsiActivation, ReadoutHead, StateTable, LAYER_NORM_EPS,
};
use crate::autonn::{Tape, Tensor, Var};
use crate::edgegraph::{to_edge_graph, EdgeGraph};
use crate::molgraph::MolecularGraph;
use crate::ordering::{all_orders, NeighborOrder, OrderingError, ParallelPolicy};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub k: usize,
    pub hidden: usize,
    pub hidden_mid: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub outputs: usize,
    pub residual: bool,
    pub layer_norm: bool,
    pub psi: PsiActivation,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            k: 3,
            hidden: 64,
            hidden_mid: 64,
            layers: 3,
            head_hidden: 64,
            outputs: 2,
            residual: true,
            layer_norm: true,
            psi: PsiActivation::Elu,
        }
    }
}

/// Precomputed structure of one molecule: its edge graph, neighbor orders,
/// and the index form of both.
#[derive(Clone, Debug)]
pub struct GraphPlan {
    eg: EdgeGraph,
    orders: Vec<NeighborOrder>,
    init: Tensor,
    parallel: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

impl GraphPlan {
    pub fn new(g: &MolecularGraph, policy: ParallelPolicy) -> Result<Self, ChiennError> {
        Self::from_edge_graph(to_edge_graph(g), policy)
    }

    pub fn from_edge_graph(eg: EdgeGraph, policy: ParallelPolicy) -> Result<Self, ChiennError> {
        if eg.is_empty() {
            return Err(ChiennError::EmptyGraph);
        }
        let orders = all_orders(&eg, policy)?;
        let width = eg.init_input_len();
        let mut data = Vec::with_capacity(eg.len() * width);
        for n in 0..eg.len() {
            data.extend(eg.init_input(n));
        }
        let init = Tensor::new(vec![eg.len(), width], data)?;
        let parallel = (0..eg.len()).map(|n| eg.parallel_index(n)).collect();
        let neighbors = orders
            .iter()
            .map(|o| {
                o.sequence
                    .iter()
                    .map(|k| eg.node_index(*k).map_err(OrderingError::from))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            eg,
            orders,
            init,
            parallel,
            neighbors,
        })
    }

    pub fn edge_graph(&self) -> &EdgeGraph {
        &self.eg
    }

    pub fn orders(&self) -> &[NeighborOrder] {
        &self.orders
    }

    pub fn node_count(&self) -> usize {
        self.eg.len()
    }

    pub fn input_dim(&self) -> usize {
        self.init.cols()
    }
}

/// Several graphs laid out as one disjoint union for batched evaluation.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    k: usize,
    n_graphs: usize,
    init: Tensor,
    parallel: Vec<Option<usize>>,
    windows: Vec<Option<usize>>,
    window_owner: Vec<usize>,
    node_graph: Vec<usize>,
}

impl BatchPlan {
    pub fn new(plans: &[&GraphPlan], k: usize) -> Result<Self, ChiennError> {
        if k == 0 {
            return Err(ChiennError::InvalidArity);
        }
        let width = plans.first().map_or(0, |p| p.input_dim());
        let mut init = Vec::new();
        let (mut parallel, mut windows, mut window_owner, mut node_graph) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (gi, plan) in plans.iter().enumerate() {
            if plan.input_dim() != width {
                return Err(ChiennError::DimensionMismatch(format!(
                    "graph {gi} has input width {}, batch has {width}",
                    plan.input_dim()
                )));
            }
            init.extend_from_slice(plan.init.data());
            for (n, nbs) in plan.neighbors.iter().enumerate() {
                parallel.push(Some(offset + plan.parallel[n]));
                node_graph.push(gi);
                for window in cyclic_windows(nbs.len(), k) {
                    windows.extend(window.iter().map(|s| s.map(|i| offset + nbs[i])));
                    window_owner.push(offset + n);
                }
            }
            offset += plan.node_count();
        }
        Ok(Self {
            k,
            n_graphs: plans.len(),
            init: Tensor::new(vec![offset, width], init)?,
            parallel,
            windows,
            window_owner,
            node_graph,
        })
    }

    pub fn graph_count(&self) -> usize {
        self.n_graphs
    }

    pub fn node_count(&self) -> usize {
        self.node_graph.len()
    }
}

/// Embedding, ChiENN layers and readout head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub config: StackConfig,
    pub input_dim: usize,
    pub embed: Embedding,
    pub layers: Vec<ChiennParams>,
    pub head: ReadoutHead,
}

/// Serialized form of a [`LayerStack`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub k: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "H_mid")]
    pub hidden_mid: usize,
    pub config: StackConfig,
    pub input_dim: usize,
    pub embed: Embedding,
    pub layers: Vec<ChiennParams>,
    pub head: ReadoutHead,
}

impl LayerStack {
    /// Draws embedding, layers and head in that order from `rng`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: StackConfig, input_dim: usize) -> Result<Self, ChiennError> {
        let embed = Embedding::init(rng, input_dim, config.hidden);
        let layers = (0..config.layers)
            .map(|_| {
                let mut p = ChiennParams::init(rng, config.k, config.hidden, config.hidden_mid)?;
                p.psi = config.psi;
                Ok(p)
            })
            .collect::<Result<Vec<_>, ChiennError>>()?;
        let head = ReadoutHead::init(rng, config.hidden, config.head_hidden, config.outputs);
        Ok(Self {
            config,
            input_dim,
            embed,
            layers,
            head,
        })
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed.w, &self.embed.b];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.head.w1, &self.head.b1, &self.head.w2, &self.head.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed.w, &mut self.embed.b];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.head.w1, &mut self.head.b1, &mut self.head.w2, &mut self.head.b2]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every tensor as a leaf, in [`LayerStack::tensors`] order.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>, ChiennError> {
        self.tensors()
            .into_iter()
            .map(|t| Ok(tape.leaf(t.clone())?))
            .collect()
    }

    fn check_vars(&self, vars: &[Var]) -> Result<(), ChiennError> {
        let expected = 2 + 8 * self.layers.len() + 4;
        if vars.len() != expected {
            return Err(ChiennError::DimensionMismatch(format!(
                "{} parameter handles, stack has {expected}",
                vars.len()
            )));
        }
        Ok(())
    }

    /// Node states after the last layer, `[nodes, H]`.
    pub fn node_states_tape(&self, tape: &mut Tape, vars: &[Var], batch: &BatchPlan) -> Result<Var, ChiennError> {
        self.check_vars(vars)?;
        if batch.k != self.config.k {
            return Err(ChiennError::DimensionMismatch(format!(
                "batch built for k={}, stack has k={}",
                batch.k, self.config.k
            )));
        }
        let x0 = tape.leaf(batch.init.clone())?;
        let mut x = tape.linear(x0, vars[0], Some(vars[1]))?;
        for (li, params) in self.layers.iter().enumerate() {
            let v = &vars[2 + 8 * li..10 + 8 * li];
            let (w1, b1, w2, b2, w3, b3, w4, b4) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
            let mut next = tape.linear(x, w1, Some(b1))?;
            let par = tape.gather_rows(x, batch.parallel.clone(), 1)?;
            let par = tape.linear(par, w2, Some(b2))?;
            next = tape.add(next, par)?;
            if !batch.window_owner.is_empty() {
                let windows = tape.gather_rows(x, batch.windows.clone(), params.k)?;
                let mut mid = tape.linear(windows, w4, Some(b4))?;
                if params.psi == PsiActivation::Elu {
                    mid = tape.elu(mid)?;
                }
                let psi = tape.linear(mid, w3, Some(b3))?;
                let summed = tape.segment_sum(psi, batch.window_owner.clone(), batch.node_count())?;
                next = tape.add(next, summed)?;
            }
            if self.config.residual {
                next = tape.add(next, x)?;
            }
            if self.config.layer_norm {
                next = tape.layer_norm(next, LAYER_NORM_EPS)?;
            }
            x = next;
        }
        Ok(x)
    }

    /// Mean-pooled graph embeddings, `[graphs, H]`.
    pub fn pooled_tape(&self, tape: &mut Tape, vars: &[Var], batch: &BatchPlan) -> Result<Var, ChiennError> {
        let x = self.node_states_tape(tape, vars, batch)?;
        Ok(tape.segment_mean(x, batch.node_graph.clone(), batch.n_graphs)?)
    }

    /// Head outputs, `[graphs, outputs]`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], batch: &BatchPlan) -> Result<Var, ChiennError> {
        let pooled = self.pooled_tape(tape, vars, batch)?;
        let n = vars.len();
        let h = tape.linear(pooled, vars[n - 4], Some(vars[n - 3]))?;
        let h = tape.elu(h)?;
        Ok(tape.linear(h, vars[n - 2], Some(vars[n - 1]))?)
    }

    /// Batched evaluation without keeping gradients.
    pub fn predict(&self, batch: &BatchPlan) -> Result<Tensor, ChiennError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape)?;
        let out = self.forward_tape(&mut tape, &vars, batch)?;
        Ok(tape.value(out)?.clone())
    }

    /// Per-node reference evaluation of all layers.
    pub fn node_states(&self, plan: &GraphPlan) -> Result<StateTable, ChiennError> {
        let mut eg = plan.eg.clone();
        eg.states = embed_init(&self.embed, &eg)?;
        for params in &self.layers {
            let mut next = layer_forward(params, &eg, &plan.orders)?;
            for (new, old) in next.iter_mut().zip(&eg.states) {
                if self.config.residual {
                    new.iter_mut().zip(old).for_each(|(a, b)| *a += b);
                }
                if self.config.layer_norm {
                    layer_norm_row(new);
                }
            }
            eg.states = next;
        }
        Ok(eg.states)
    }

    /// Mean-pooled embedding via the reference path.
    pub fn graph_embedding(&self, plan: &GraphPlan) -> Result<Vec<f64>, ChiennError> {
        super::mean_pool(&self.node_states(plan)?)
    }

    /// Head output via the reference path.
    pub fn forward(&self, plan: &GraphPlan) -> Result<Vec<f64>, ChiennError> {
        readout(&self.node_states(plan)?, &self.head)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            k: self.config.k,
            hidden: self.config.hidden,
            hidden_mid: self.config.hidden_mid,
            config: self.config.clone(),
            input_dim: self.input_dim,
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            head: self.head.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ChiennError> {
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(ChiennError::Checkpoint(format!(
                "schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        let c = &ck.config;
        if ck.k != c.k || ck.hidden != c.hidden || ck.hidden_mid != c.hidden_mid || ck.layers.len() != c.layers {
            return Err(ChiennError::Checkpoint("header disagrees with config".into()));
        }
        let shape_err = |name: &str, t: &Tensor, want: &[usize]| -> Result<(), ChiennError> {
            if t.shape() != want {
                return Err(ChiennError::Checkpoint(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        shape_err("embed.A", &ck.embed.w, &[c.hidden, ck.input_dim])?;
        shape_err("embed.b", &ck.embed.b, &[c.hidden])?;
        for l in &ck.layers {
            if l.k != c.k || l.hidden != c.hidden || l.hidden_mid != c.hidden_mid {
                return Err(ChiennError::Checkpoint("layer header disagrees with config".into()));
            }
            l.validate().map_err(|e| ChiennError::Checkpoint(e.to_string()))?;
        }
        shape_err("head.W1", &ck.head.w1, &[c.head_hidden, c.hidden])?;
        shape_err("head.b1", &ck.head.b1, &[c.head_hidden])?;
        shape_err("head.W2", &ck.head.w2, &[c.outputs, c.head_hidden])?;
        shape_err("head.b2", &ck.head.b2, &[c.outputs])?;
        Ok(Self {
            config: ck.config,
            input_dim: ck.input_dim,
            embed: ck.embed,
            layers: ck.layers,
            head: ck.head,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ChiennError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ChiennError::Checkpoint(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(ChiennError::Checkpoint(format!(
                    "schema version {v} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
                )))
            }
            None => return Err(ChiennError::Checkpoint("missing schema_version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| ChiennError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}
