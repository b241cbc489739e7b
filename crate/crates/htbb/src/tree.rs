//! Dimension tree topology, per-node cores, and tensor entry evaluation.
//!
//! A `d`-way tensor is represented on a binary tree: every node has exactly
//! two or zero children, leaves carry tensor modes, and each node holds a
//! dense core. Entries are evaluated by a bottom-up contraction of small
//! vectors. Trees are balanced over the next power of two of `d`; surplus
//! leaves are inactive padding with mode size one and never take part in
//! index search.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tensor dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("mode size must be at least 1 (mode {0})")]
    InvalidModeSize(usize),
    #[error("inconsistent cores: {0}")]
    InconsistentCores(String),
    #[error("index {0:?} is invalid for this tensor")]
    InvalidIndex(Vec<usize>),
    #[error("dense tensor with {size} entries exceeds the cap of {cap}")]
    TooLarge { size: u128, cap: u128 },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Option<(NodeId, NodeId)>,
    /// Depth, root at 1.
    pub level: usize,
    /// Inactive nodes are padding for non-power-of-two dimensions.
    pub active: bool,
    /// Tensor mode carried by an active leaf.
    pub mode: Option<usize>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Binary dimension tree over `d` tensor modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTopology {
    pub nodes: Vec<Node>,
    pub root: NodeId,
    pub dim: usize,
    pub mode_sizes: Vec<usize>,
    /// Leaf node carrying mode `k`, for `k` in `0..dim`.
    pub mode_leaf: Vec<NodeId>,
}

impl TreeTopology {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn nodes_at_level(&self, level: usize) -> usize {
        self.nodes.iter().filter(|n| n.level == level).count()
    }

    pub fn sibling(&self, id: NodeId) -> Option<NodeId> {
        let parent = self.nodes[id].parent?;
        let (a, b) = self.nodes[parent].children.expect("parent has children");
        Some(if a == id { b } else { a })
    }

    /// Mode size seen by a leaf node; inactive padding leaves have size 1.
    pub fn leaf_size(&self, id: NodeId) -> usize {
        match self.nodes[id].mode {
            Some(m) => self.mode_sizes[m],
            None => 1,
        }
    }

    /// Neighbors (parent and children) that are active, in a fixed order:
    /// parent first, then children.
    pub fn active_neighbors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(3);
        if let Some(p) = self.nodes[id].parent {
            out.push(p);
        }
        if let Some((a, b)) = self.nodes[id].children {
            if self.nodes[a].active {
                out.push(a);
            }
            if self.nodes[b].active {
                out.push(b);
            }
        }
        out
    }

    /// Modes carried by the subtree under `id`, ascending.
    pub fn subtree_modes(&self, id: NodeId) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            match self.nodes[n].children {
                None => {
                    if let Some(m) = self.nodes[n].mode {
                        out.push(m);
                    }
                }
                Some((a, b)) => {
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Checks structural invariants; used after deserialization and by the
    /// injectable-topology constructor.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.nodes.len();
        if self.root >= n {
            return Err(TreeError::InvalidTopology("root id out of range".into()));
        }
        if self.nodes[self.root].parent.is_some() {
            return Err(TreeError::InvalidTopology("root has a parent".into()));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if seen[id] {
                return Err(TreeError::InvalidTopology("cycle detected".into()));
            }
            seen[id] = true;
            if let Some((a, b)) = self.nodes[id].children {
                for c in [a, b] {
                    if c >= n || self.nodes[c].parent != Some(id) {
                        return Err(TreeError::InvalidTopology(format!(
                            "child {c} does not point back to parent {id}"
                        )));
                    }
                    if self.nodes[c].level != self.nodes[id].level + 1 {
                        return Err(TreeError::InvalidTopology("level bookkeeping broken".into()));
                    }
                    stack.push(c);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(TreeError::InvalidTopology("disconnected node".into()));
        }
        let mut modes: Vec<usize> = self
            .nodes
            .iter()
            .filter(|nd| nd.is_leaf())
            .filter_map(|nd| nd.mode)
            .collect();
        modes.sort_unstable();
        if modes != (0..self.dim).collect::<Vec<_>>() {
            return Err(TreeError::InvalidTopology(
                "leaf modes are not a bijection onto 0..dim".into(),
            ));
        }
        if self.mode_sizes.len() != self.dim {
            return Err(TreeError::InvalidTopology("mode_sizes length mismatch".into()));
        }
        for (k, &id) in self.mode_leaf.iter().enumerate() {
            if self.nodes[id].mode != Some(k) {
                return Err(TreeError::InvalidTopology("mode_leaf table mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Builds a balanced tree over `2^ceil(log2 d)` leaves. The first `d` leaves
/// carry modes `0..d` in order; surplus leaves are inactive with mode size 1.
pub fn build_balanced_tree(dim: usize, mode_sizes: &[usize]) -> Result<TreeTopology, TreeError> {
    if dim < 2 {
        return Err(TreeError::InvalidDimension(dim));
    }
    if mode_sizes.len() != dim {
        return Err(TreeError::InvalidTopology(format!(
            "expected {} mode sizes, got {}",
            dim,
            mode_sizes.len()
        )));
    }
    for (k, &s) in mode_sizes.iter().enumerate() {
        if s == 0 {
            return Err(TreeError::InvalidModeSize(k));
        }
    }
    let n_leaf = dim.next_power_of_two();
    let total = 2 * n_leaf - 1;
    // Heap layout: node i has children 2i+1 and 2i+2; leaves occupy the
    // last n_leaf slots in order.
    let mut nodes = Vec::with_capacity(total);
    for id in 0..total {
        let level = (usize::BITS - (id + 1).leading_zeros()) as usize;
        let children = if 2 * id + 2 < total {
            Some((2 * id + 1, 2 * id + 2))
        } else {
            None
        };
        let parent = if id == 0 { None } else { Some((id - 1) / 2) };
        let mode = if children.is_none() {
            let pos = id - (n_leaf - 1);
            if pos < dim {
                Some(pos)
            } else {
                None
            }
        } else {
            None
        };
        nodes.push(Node {
            id,
            parent,
            children,
            level,
            active: true, // fixed up below
            mode,
        });
    }
    // A node is active when its subtree contains an active leaf.
    for id in (0..total).rev() {
        nodes[id].active = match nodes[id].children {
            None => nodes[id].mode.is_some(),
            Some((a, b)) => nodes[a].active || nodes[b].active,
        };
    }
    let mode_leaf: Vec<NodeId> = (0..dim).map(|k| n_leaf - 1 + k).collect();
    let topo = TreeTopology {
        nodes,
        root: 0,
        dim,
        mode_sizes: mode_sizes.to_vec(),
        mode_leaf,
    };
    debug_assert!(topo.validate().is_ok());
    Ok(topo)
}

/// Dense core attached to one node: a matrix `(rank, mode size)` at leaves,
/// a 3-way array `(left child rank, rank, right child rank)` elsewhere.
/// The root uses rank 1 in the middle.
#[derive(Debug, Clone, PartialEq)]
pub enum Core {
    Leaf(Array2<f64>),
    Inner(Array3<f64>),
}

impl Core {
    pub fn leaf(&self) -> Option<&Array2<f64>> {
        match self {
            Core::Leaf(a) => Some(a),
            Core::Inner(_) => None,
        }
    }

    pub fn inner(&self) -> Option<&Array3<f64>> {
        match self {
            Core::Inner(a) => Some(a),
            Core::Leaf(_) => None,
        }
    }

    /// Length of the axis bound to the link toward the parent.
    pub fn rank(&self) -> usize {
        match self {
            Core::Leaf(a) => a.nrows(),
            Core::Inner(a) => a.dim().1,
        }
    }
}

/// Contracts one inner core with the two child vectors; child-1 axis first,
/// then child-2, in a fixed order for reproducible floating point.
pub(crate) fn contract_inner(core: &Array3<f64>, b1: &[f64], b2: &[f64]) -> Vec<f64> {
    let (r1, r, r2) = core.dim();
    debug_assert_eq!(r1, b1.len());
    debug_assert_eq!(r2, b2.len());
    let mut out = vec![0.0; r];
    for (m, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..r2 {
            let mut inner = 0.0;
            for i in 0..r1 {
                inner += core[[i, m, k]] * b1[i];
            }
            acc += inner * b2[k];
        }
        *o = acc;
    }
    out
}

fn eval_node(
    topo: &TreeTopology,
    cores: &[Core],
    id: NodeId,
    index: &[usize],
) -> Result<Vec<f64>, TreeError> {
    let node = topo.node(id);
    match node.children {
        None => {
            let a = cores[id].leaf().ok_or_else(|| {
                TreeError::InconsistentCores(format!("node {id} is a leaf but core is 3-way"))
            })?;
            let col = match node.mode {
                Some(m) => index[m],
                None => 0,
            };
            if col >= a.ncols() {
                return Err(TreeError::InconsistentCores(format!(
                    "leaf {id} core has {} columns, index asks for {col}",
                    a.ncols()
                )));
            }
            Ok((0..a.nrows()).map(|r| a[[r, col]]).collect())
        }
        Some((c1, c2)) => {
            let b1 = eval_node(topo, cores, c1, index)?;
            let b2 = eval_node(topo, cores, c2, index)?;
            let g = cores[id].inner().ok_or_else(|| {
                TreeError::InconsistentCores(format!("node {id} is inner but core is 2-way"))
            })?;
            let (r1, _, r2) = g.dim();
            if r1 != b1.len() || r2 != b2.len() {
                return Err(TreeError::InconsistentCores(format!(
                    "node {id} core is {:?} but children produced {} and {}",
                    g.dim(),
                    b1.len(),
                    b2.len()
                )));
            }
            Ok(contract_inner(g, &b1, &b2))
        }
    }
}

fn check_index(topo: &TreeTopology, index: &[usize]) -> Result<(), TreeError> {
    if index.len() != topo.dim
        || index.iter().zip(&topo.mode_sizes).any(|(&i, &n)| i >= n)
    {
        return Err(TreeError::InvalidIndex(index.to_vec()));
    }
    Ok(())
}

/// Evaluates one tensor entry by the bottom-up contraction.
pub fn evaluate(topo: &TreeTopology, cores: &[Core], index: &[usize]) -> Result<f64, TreeError> {
    check_index(topo, index)?;
    let b = eval_node(topo, cores, topo.root, index)?;
    if b.len() != 1 {
        return Err(TreeError::InconsistentCores(format!(
            "root produced a vector of length {}",
            b.len()
        )));
    }
    Ok(b[0])
}

/// Evaluates a batch of entries; order-preserving and elementwise equal to
/// [`evaluate`].
pub fn evaluate_batch(
    topo: &TreeTopology,
    cores: &[Core],
    indices: &[Vec<usize>],
) -> Result<Vec<f64>, TreeError> {
    indices.iter().map(|ix| evaluate(topo, cores, ix)).collect()
}

pub const MATERIALIZE_CAP: u128 = 1_000_000;

/// Materializes the full tensor; only valid when the entry count does not
/// exceed `cap` (default [`MATERIALIZE_CAP`]).
pub fn materialize(
    topo: &TreeTopology,
    cores: &[Core],
    cap: Option<u128>,
) -> Result<ArrayD<f64>, TreeError> {
    let cap = cap.unwrap_or(MATERIALIZE_CAP);
    let size: u128 = topo.mode_sizes.iter().map(|&n| n as u128).product();
    if size > cap {
        return Err(TreeError::TooLarge { size, cap });
    }
    let shape: Vec<usize> = topo.mode_sizes.clone();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let mut index = vec![0usize; topo.dim];
    loop {
        let v = evaluate(topo, cores, &index)?;
        out[IxDyn(&index)] = v;
        // odometer step, last mode fastest
        let mut k = topo.dim;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            index[k] += 1;
            if index[k] < topo.mode_sizes[k] {
                break;
            }
            index[k] = 0;
        }
    }
}

/// An evaluable model: a topology together with one core per node.
#[derive(Debug, Clone)]
pub struct HtModel {
    pub topology: TreeTopology,
    pub cores: Vec<Core>,
}

impl HtModel {
    pub fn evaluate(&self, index: &[usize]) -> Result<f64, TreeError> {
        evaluate(&self.topology, &self.cores, index)
    }

    pub fn evaluate_batch(&self, indices: &[Vec<usize>]) -> Result<Vec<f64>, TreeError> {
        evaluate_batch(&self.topology, &self.cores, indices)
    }

    pub fn materialize(&self, cap: Option<u128>) -> Result<ArrayD<f64>, TreeError> {
        materialize(&self.topology, &self.cores, cap)
    }

    /// Ranks along each link, indexed by child node id.
    pub fn link_ranks(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.rank()).collect()
    }

    pub fn to_json(&self) -> Result<String, TreeError> {
        let record = ModelRecord::from_model(self);
        serde_json::to_string_pretty(&record).map_err(|e| TreeError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let record: ModelRecord =
            serde_json::from_str(text).map_err(|e| TreeError::Serialization(e.to_string()))?;
        record.into_model()
    }
}

/// Self-describing on-disk form: header (dimension, mode sizes, tree edges,
/// leaf order), then per-node core shapes with row-major values.
#[derive(Debug, Serialize, Deserialize)]
struct ModelRecord {
    dim: usize,
    mode_sizes: Vec<usize>,
    root: NodeId,
    nodes: Vec<Node>,
    mode_leaf: Vec<NodeId>,
    cores: Vec<CoreRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CoreRecord {
    node: NodeId,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ModelRecord {
    fn from_model(model: &HtModel) -> Self {
        let cores = model
            .cores
            .iter()
            .enumerate()
            .map(|(node, core)| match core {
                Core::Leaf(a) => CoreRecord {
                    node,
                    shape: vec![a.nrows(), a.ncols()],
                    data: a.iter().copied().collect(),
                },
                Core::Inner(a) => {
                    let (r1, r, r2) = a.dim();
                    CoreRecord {
                        node,
                        shape: vec![r1, r, r2],
                        data: a.iter().copied().collect(),
                    }
                }
            })
            .collect();
        ModelRecord {
            dim: model.topology.dim,
            mode_sizes: model.topology.mode_sizes.clone(),
            root: model.topology.root,
            nodes: model.topology.nodes.clone(),
            mode_leaf: model.topology.mode_leaf.clone(),
            cores,
        }
    }

    fn into_model(self) -> Result<HtModel, TreeError> {
        let topology = TreeTopology {
            nodes: self.nodes,
            root: self.root,
            dim: self.dim,
            mode_sizes: self.mode_sizes,
            mode_leaf: self.mode_leaf,
        };
        topology.validate()?;
        let mut cores: Vec<Option<Core>> = vec![None; topology.nodes.len()];
        for rec in self.cores {
            let core = match rec.shape.len() {
                2 => Core::Leaf(
                    Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data)
                        .map_err(|e| TreeError::Serialization(e.to_string()))?,
                ),
                3 => Core::Inner(
                    Array3::from_shape_vec((rec.shape[0], rec.shape[1], rec.shape[2]), rec.data)
                        .map_err(|e| TreeError::Serialization(e.to_string()))?,
                ),
                n => {
                    return Err(TreeError::Serialization(format!(
                        "core of order {n} is not supported"
                    )))
                }
            };
            if rec.node >= cores.len() {
                return Err(TreeError::Serialization("core node id out of range".into()));
            }
            cores[rec.node] = Some(core);
        }
        let cores: Option<Vec<Core>> = cores.into_iter().collect();
        let cores =
            cores.ok_or_else(|| TreeError::Serialization("missing core for some node".into()))?;
        Ok(HtModel { topology, cores })
    }
}
