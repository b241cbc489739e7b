//! Core construction from final index values.
//!
//! The raw per-node operations mirror the update machinery: a small value
//! matrix is sampled through the oracle and orthonormalized, and the root
//! holds the block of raw values at the crossing of its children's upper
//! index lists. The full assembly normalizes every non-root basis to be
//! cardinal at its selected anchors (each factor times the inverse of its
//! anchor rows), which makes the surrogate interpolate the sampled cross,
//! keeps every contraction bounded through the maxvol dominance of the
//! anchor rows, and lets the root carry the function's scale directly. An
//! assembly that kept all factors orthonormal instead would have to store
//! the inverse of the basis magnitude in the root core; that magnitude
//! shrinks like `N^{-d/2}` with the dimension, which leaves IEEE doubles
//! long before a thousand modes.

use crate::bench::{BenchError, Oracle};
use crate::linalg::{qr_unpivoted, solve_matrix};
use crate::state::IndexState;
use crate::tree::{Core, HtModel, NodeId, TreeTopology};
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("evaluation budget exhausted during core construction")]
    BudgetExhausted,
    #[error("rank {rank} is infeasible for a value matrix with {rows} rows")]
    InfeasibleRank { rank: usize, rows: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn oracle_value(oracle: &Oracle, point: &[usize]) -> Result<f64, BuildError> {
    oracle.eval(point).map_err(|e| match e {
        BenchError::BudgetExhausted => BuildError::BudgetExhausted,
        other => BuildError::InvalidInput(other.to_string()),
    })
}

/// Value matrix of a leaf: the full mode fiber at every down value. Shape
/// `(mode size, r)`.
fn leaf_value_matrix(
    oracle: &Oracle,
    topo: &TreeTopology,
    leaf: NodeId,
    down_set: &[usize],
    down_values: &[Vec<usize>],
) -> Result<Array2<f64>, BuildError> {
    let mode = topo.nodes[leaf]
        .mode
        .ok_or_else(|| BuildError::InvalidInput(format!("node {leaf} carries no mode")))?;
    let n = topo.mode_sizes[mode];
    let r = down_values.len();
    let mut v = Array2::zeros((n, r));
    let mut point = vec![0usize; topo.dim];
    for (k, dv) in down_values.iter().enumerate() {
        for (slot, &m) in down_set.iter().enumerate() {
            point[m] = dv[slot];
        }
        for i in 0..n {
            point[mode] = i;
            v[[i, k]] = oracle_value(oracle, &point)?;
        }
    }
    Ok(v)
}

/// Leaf core: transposed orthonormal factor of the leaf value matrix,
/// shape `(r, mode size)`.
pub fn build_leaf_core(
    oracle: &Oracle,
    topo: &TreeTopology,
    leaf: NodeId,
    down_set: &[usize],
    down_values: &[Vec<usize>],
) -> Result<Array2<f64>, BuildError> {
    let v = leaf_value_matrix(oracle, topo, leaf, down_set, down_values)?;
    let (n, r) = v.dim();
    if r > n {
        return Err(BuildError::InfeasibleRank { rank: r, rows: n });
    }
    let q = qr_unpivoted(&v).q;
    Ok(q.t().to_owned())
}

fn inner_value_matrix(
    oracle: &Oracle,
    dim: usize,
    in1_set: &[usize],
    in1_values: &[Vec<usize>],
    in2_set: &[usize],
    in2_values: &[Vec<usize>],
    down_set: &[usize],
    down_values: &[Vec<usize>],
) -> Result<Array2<f64>, BuildError> {
    let (r1, r2, r) = (in1_values.len(), in2_values.len(), down_values.len());
    let mut v = Array2::zeros((r1 * r2, r));
    let mut point = vec![0usize; dim];
    for (i, v1) in in1_values.iter().enumerate() {
        for (n, v2) in in2_values.iter().enumerate() {
            for (slot, &m) in in1_set.iter().enumerate() {
                point[m] = v1[slot];
            }
            for (slot, &m) in in2_set.iter().enumerate() {
                point[m] = v2[slot];
            }
            for (k, dv) in down_values.iter().enumerate() {
                for (slot, &m) in down_set.iter().enumerate() {
                    point[m] = dv[slot];
                }
                v[[i * r2 + n, k]] = oracle_value(oracle, &point)?;
            }
        }
    }
    Ok(v)
}

fn fold_rows_to_core(q: &Array2<f64>, r1: usize, r2: usize) -> Array3<f64> {
    let r = q.ncols();
    let mut core = Array3::zeros((r1, r, r2));
    for i in 0..r1 {
        for n in 0..r2 {
            for k in 0..r {
                core[[i, k, n]] = q[[i * r2 + n, k]];
            }
        }
    }
    core
}

/// Inner core from raw oracle values: orthonormal factor of the
/// `(r1 * r2, r)` value matrix with rows ordered first-child major, folded
/// to shape `(r1, r, r2)`.
#[allow(clippy::too_many_arguments)]
pub fn build_inner_core(
    oracle: &Oracle,
    in1_set: &[usize],
    in1_values: &[Vec<usize>],
    in2_set: &[usize],
    in2_values: &[Vec<usize>],
    down_set: &[usize],
    down_values: &[Vec<usize>],
) -> Result<Array3<f64>, BuildError> {
    let v = inner_value_matrix(
        oracle,
        oracle.dim(),
        in1_set,
        in1_values,
        in2_set,
        in2_values,
        down_set,
        down_values,
    )?;
    let (rows, r) = v.dim();
    if r > rows {
        return Err(BuildError::InfeasibleRank { rank: r, rows });
    }
    let q = qr_unpivoted(&v).q;
    Ok(fold_rows_to_core(&q, in1_values.len(), in2_values.len()))
}

/// Root core holding the raw black-box values at the crossing of the two
/// children's upper values; no orthogonalization.
pub fn build_root_core(
    oracle: &Oracle,
    dim: usize,
    left_set: &[usize],
    left_values: &[Vec<usize>],
    right_set: &[usize],
    right_values: &[Vec<usize>],
) -> Result<Array3<f64>, BuildError> {
    let (r1, r2) = (left_values.len(), right_values.len());
    let mut core = Array3::zeros((r1, 1, r2));
    let mut point = vec![0usize; dim];
    for (i, vl) in left_values.iter().enumerate() {
        for (n, vr) in right_values.iter().enumerate() {
            for (slot, &m) in left_set.iter().enumerate() {
                point[m] = vl[slot];
            }
            for (slot, &m) in right_set.iter().enumerate() {
                point[m] = vr[slot];
            }
            core[[i, 0, n]] = oracle_value(oracle, &point)?;
        }
    }
    Ok(core)
}

/// Per-node construction record: the anchors the parent will sample at.
/// The subtree basis is cardinal there, so no further bookkeeping is needed.
struct NodeBasis {
    /// Index vectors over the node's upper mode set.
    anchors: Vec<Vec<usize>>,
}

fn merge_child_vectors(
    set1: &[usize],
    v1: &[usize],
    set2: &[usize],
    v2: &[usize],
) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = set1
        .iter()
        .zip(v1)
        .chain(set2.iter().zip(v2))
        .map(|(&m, &v)| (m, v))
        .collect();
    pairs.sort_unstable_by_key(|&(m, _)| m);
    pairs.into_iter().map(|(_, v)| v).collect()
}

/// Number of leading pivoted-QR diagonal entries within `eps` of the first.
fn revealed_rank(diag: &[f64], eps: f64) -> usize {
    if diag.is_empty() || diag[0] == 0.0 {
        return 0;
    }
    let mut k = 0;
    for &m in diag {
        if m / diag[0] >= eps {
            k += 1;
        } else {
            break;
        }
    }
    k
}

/// Rank-truncates a sampled value matrix and returns the interpolation
/// basis `Q * inv(Q[sel, :])` together with the selected anchor rows. The
/// basis is exactly the identity on the selected rows and its remaining
/// entries are bounded by the maxvol dominance tolerance.
fn cardinal_basis(v: &Array2<f64>, eps: f64) -> Result<(Array2<f64>, Vec<usize>), BuildError> {
    let qr = crate::linalg::qr_pivoted(v);
    let k = revealed_rank(&qr.diag_magnitudes(), eps).max(1);
    let q = qr.q.slice(ndarray::s![.., ..k]).to_owned();
    let sel = crate::linalg::maxvol_square(&q, 1.01, 100)
        .map_err(|e| BuildError::InvalidInput(e.to_string()))?;
    let rows = q.nrows();
    let mut q_sel_t = Array2::zeros((k, k));
    for (t, &i) in sel.iter().enumerate() {
        for j in 0..k {
            q_sel_t[[j, t]] = q[[i, j]];
        }
    }
    // b = q * inv(q_sel): solve q_sel^T b^T = q^T.
    let bt = solve_matrix(&q_sel_t, &q.t().to_owned());
    let mut b = Array2::zeros((rows, k));
    for i in 0..rows {
        for j in 0..k {
            b[[i, j]] = bt[[j, i]];
        }
    }
    // Snap the anchor rows to the exact identity; they are within rounding
    // of it already and downstream interpolation identities rely on it.
    for (t, &i) in sel.iter().enumerate() {
        for j in 0..k {
            b[[i, j]] = if j == t { 1.0 } else { 0.0 };
        }
    }
    Ok((b, sel))
}

/// Builds every core bottom-up from the final link state and assembles an
/// evaluable model. Oracle values are drawn through the shared cache, so
/// entries already visited during the index search are free.
///
/// While climbing, the builder re-selects each link's upper anchors by a
/// maxvol pass over the link's own factor (the same selection rule the
/// index search applies) and normalizes the factor to be cardinal at those
/// anchors, so every block it hands upward is well conditioned even on
/// links the search never reached. Rank is truncated at `eps` relative
/// pivot decay. The refreshed upper values are written back into the state,
/// so the link state after construction names the cross the surrogate
/// interpolates; the root core holds the raw values of that cross.
pub fn build_model(
    oracle: &Oracle,
    topo: &TreeTopology,
    state: &mut IndexState,
    eps: f64,
) -> Result<HtModel, BuildError> {
    let n = topo.nodes.len();
    let mut cores: Vec<Option<Core>> = vec![None; n];
    let mut bases: Vec<Option<NodeBasis>> = (0..n).map(|_| None).collect();
    let (root_left, root_right) = topo.nodes[topo.root].children.expect("root has children");
    let mut refreshed: Vec<Option<Vec<Vec<usize>>>> = vec![None; n];
    // Post-order: children before parents, root last.
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![(topo.root, false)];
    while let Some((id, expanded)) = stack.pop() {
        if expanded {
            order.push(id);
            continue;
        }
        stack.push((id, true));
        if let Some((c1, c2)) = topo.nodes[id].children {
            stack.push((c2, false));
            stack.push((c1, false));
        }
    }

    for &id in &order {
        let node = &topo.nodes[id];
        if !node.active {
            cores[id] = Some(match node.children {
                None => Core::Leaf(Array2::ones((1, 1))),
                Some(_) => Core::Inner(Array3::ones((1, 1, 1))),
            });
            bases[id] = Some(NodeBasis {
                anchors: vec![Vec::new()],
            });
            continue;
        }
        if id == topo.root {
            let b1 = bases[root_left].as_ref().expect("left basis built");
            let b2 = bases[root_right].as_ref().expect("right basis built");
            let (s1, s2) = (state.link(root_left), state.link(root_right));
            // The children's bases are cardinal at these anchors, so the
            // raw cross values already are the interpolating root core.
            let raw = build_root_core(
                oracle,
                topo.dim,
                &s1.upper_set,
                &b1.anchors,
                &s2.upper_set,
                &b2.anchors,
            )?;
            cores[id] = Some(Core::Inner(raw));
            continue;
        }

        let link = state.link(id);
        match node.children {
            None => {
                let v = leaf_value_matrix(oracle, topo, id, &link.down_set, &link.down_values)?;
                let (b, sel) = cardinal_basis(&v, eps)?;
                cores[id] = Some(Core::Leaf(b.t().to_owned()));
                let anchors: Vec<Vec<usize>> = sel.iter().map(|&i| vec![i]).collect();
                refreshed[id] = Some(anchors.clone());
                bases[id] = Some(NodeBasis { anchors });
            }
            Some((c1, c2)) => {
                let (s1, s2) = (state.link(c1), state.link(c2));
                let (b1, b2) = {
                    let b1 = bases[c1].take().expect("child basis built");
                    let b2 = bases[c2].take().expect("child basis built");
                    (b1, b2)
                };
                let v = inner_value_matrix(
                    oracle,
                    topo.dim,
                    &s1.upper_set,
                    &b1.anchors,
                    &s2.upper_set,
                    &b2.anchors,
                    &link.down_set,
                    &link.down_values,
                )?;
                let r2 = b2.anchors.len();
                let (b, sel) = cardinal_basis(&v, eps)?;
                cores[id] = Some(Core::Inner(fold_rows_to_core(
                    &b,
                    b1.anchors.len(),
                    r2,
                )));
                let anchors: Vec<Vec<usize>> = sel
                    .iter()
                    .map(|&flat_row| {
                        let (i, nn) = (flat_row / r2, flat_row % r2);
                        merge_child_vectors(
                            &s1.upper_set,
                            &b1.anchors[i],
                            &s2.upper_set,
                            &b2.anchors[nn],
                        )
                    })
                    .collect();
                refreshed[id] = Some(anchors.clone());
                bases[id] = Some(NodeBasis { anchors });
            }
        }
    }

    // Publish the anchors the model actually interpolates at.
    for id in 0..n {
        if let Some(anchors) = refreshed[id].take() {
            state.link_mut(id).upper_values = anchors;
        }
    }
    let left_upper = state.link(root_left).upper_values.clone();
    let right_upper = state.link(root_right).upper_values.clone();
    state.link_mut(root_left).down_values = right_upper;
    state.link_mut(root_right).down_values = left_upper;

    let cores: Vec<Core> = cores.into_iter().map(|c| c.expect("core built")).collect();
    Ok(HtModel {
        topology: topo.clone(),
        cores,
    })
}
