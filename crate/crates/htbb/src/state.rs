//! Per-link index bookkeeping and the index values update step.
//!
//! Every link (identified by its child node) carries two fixed mode sets:
//! the upper set collects the modes of the subtree below the link, the down
//! set is its complement. Their dynamic values are lists of concrete index
//! vectors, one list entry per unit of link rank. An update rebuilds a tall
//! matrix of tensor values whose rows enumerate candidate combinations and
//! whose columns are pinned by the opposite side, then reselects the rows of
//! quasi-maximal volume after an optional point-wise transform.
//!
//! The two links below the root mirror each other: the down values of one
//! are the upper values of the other. Leaf links are special only in that
//! their row candidates enumerate the whole mode rather than a previously
//! selected list.

use crate::bench::{BenchError, Oracle};
use crate::linalg::{self, LinalgError};
use crate::transform::TransformKind;
use crate::tree::{NodeId, TreeTopology};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};
use std::sync::RwLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("rank {rank} exceeds the {available} distinct index vectors available")]
    RankTooLarge { rank: usize, available: u128 },
    #[error("the root has no link")]
    NoRootLink,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("evaluation budget exhausted")]
    BudgetExhausted,
    #[error("value block is identically zero")]
    DegenerateBlock,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Shared value cache keyed by full multi-indices. Reads are concurrent,
/// writes exclusive.
#[derive(Debug, Default)]
pub struct EvalCache {
    map: RwLock<HashMap<Vec<u16>, f64>>,
}

fn cache_key(index: &[usize]) -> Vec<u16> {
    index.iter().map(|&i| i as u16).collect()
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        self.map.read().unwrap().get(&cache_key(index)).copied()
    }

    pub fn insert(&self, index: &[usize], value: f64) {
        self.map.write().unwrap().insert(cache_key(index), value);
    }

    /// Allocation-free membership probe against a prebuilt key.
    pub fn contains_key_u16(&self, key: &[u16]) -> bool {
        self.map.read().unwrap().contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV export: one row per cached entry, index components then the
    /// value, rows sorted by index for reproducible files. Floats carry 17
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let map = self.map.read().unwrap();
        let mut keys: Vec<&Vec<u16>> = map.keys().collect();
        keys.sort();
        let d = keys.first().map_or(0, |k| k.len());
        let mut out = String::new();
        for k in 0..d {
            out.push_str(&format!("i{k},"));
        }
        out.push_str("value\n");
        for key in keys {
            for part in key.iter() {
                out.push_str(&format!("{part},"));
            }
            out.push_str(&format!("{:.16e}\n", map[key]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, StateError> {
        let cache = EvalCache::new();
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| StateError::InvalidInput("empty cache file".into()))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(StateError::InvalidInput("cache header too short".into()));
        }
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != cols {
                return Err(StateError::InvalidInput(format!(
                    "line {}: expected {cols} fields, got {}",
                    lineno + 2,
                    parts.len()
                )));
            }
            let mut index = Vec::with_capacity(cols - 1);
            for p in &parts[..cols - 1] {
                index.push(p.parse::<usize>().map_err(|e| {
                    StateError::InvalidInput(format!("line {}: {e}", lineno + 2))
                })?);
            }
            let value: f64 = parts[cols - 1]
                .parse()
                .map_err(|e| StateError::InvalidInput(format!("line {}: {e}", lineno + 2)))?;
            cache.insert(&index, value);
        }
        Ok(cache)
    }
}

/// Dynamic state of one link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkState {
    pub node: NodeId,
    pub upper_set: Vec<usize>,
    pub down_set: Vec<usize>,
    pub upper_values: Vec<Vec<usize>>,
    pub down_values: Vec<Vec<usize>>,
}

impl LinkState {
    pub fn rank(&self) -> usize {
        self.upper_values.len()
    }
}

/// Link states for every non-root node, indexed by node id.
#[derive(Debug, Clone)]
pub struct IndexState {
    links: Vec<Option<LinkState>>,
}

impl IndexState {
    pub fn link(&self, node: NodeId) -> &LinkState {
        self.links[node].as_ref().expect("no link state at node")
    }

    pub fn link_mut(&mut self, node: NodeId) -> &mut LinkState {
        self.links[node].as_mut().expect("no link state at node")
    }

    pub fn has_link(&self, node: NodeId) -> bool {
        self.links[node].is_some()
    }
}

/// Fixed upper and down mode sets per link, derived from the topology.
/// Upper of a leaf is its own mode; upper of an inner node is the union of
/// its children's uppers; down is always the complement.
pub fn init_index_sets(topo: &TreeTopology) -> Vec<Option<(Vec<usize>, Vec<usize>)>> {
    let mut out: Vec<Option<(Vec<usize>, Vec<usize>)>> = vec![None; topo.nodes.len()];
    for id in 0..topo.nodes.len() {
        if id == topo.root {
            continue;
        }
        let upper = topo.subtree_modes(id);
        let down: Vec<usize> = (0..topo.dim).filter(|m| !upper.contains(m)).collect();
        out[id] = Some((upper, down));
    }
    out
}

fn domain_size(topo: &TreeTopology, modes: &[usize]) -> u128 {
    modes
        .iter()
        .map(|&m| topo.mode_sizes[m] as u128)
        .fold(1u128, |acc, n| acc.saturating_mul(n))
}

fn sample_distinct(
    topo: &TreeTopology,
    modes: &[usize],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, StateError> {
    let available = domain_size(topo, modes);
    if (count as u128) > available {
        return Err(StateError::RankTooLarge {
            rank: count,
            available,
        });
    }
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<usize> = modes
            .iter()
            .map(|&m| rng.gen_range(0..topo.mode_sizes[m]))
            .collect();
        if seen.insert(v.clone()) {
            out.push(v);
        }
    }
    Ok(out)
}

fn extend_distinct(
    topo: &TreeTopology,
    modes: &[usize],
    values: &mut Vec<Vec<usize>>,
    target_len: usize,
    rng: &mut ChaCha8Rng,
) {
    let available = domain_size(topo, modes);
    let mut seen: HashSet<Vec<usize>> = values.iter().cloned().collect();
    while values.len() < target_len && (seen.len() as u128) < available {
        let v: Vec<usize> = modes
            .iter()
            .map(|&m| rng.gen_range(0..topo.mode_sizes[m]))
            .collect();
        if seen.insert(v.clone()) {
            values.push(v);
        }
    }
}

/// Seeds every link with `r0` distinct uniformly sampled index vectors on
/// both sides. The root children share their two lists so the mirror
/// invariant holds from the start. Inactive links get rank 1 with an empty
/// upper vector.
pub fn init_index_values(
    topo: &TreeTopology,
    r0: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IndexState, StateError> {
    if r0 == 0 {
        return Err(StateError::InvalidInput("rank must be at least 1".into()));
    }
    let sets = init_index_sets(topo);
    let mut links: Vec<Option<LinkState>> = vec![None; topo.nodes.len()];
    let (root_left, root_right) = topo.nodes[topo.root]
        .children
        .expect("root of a dimension tree has children");
    for id in 0..topo.nodes.len() {
        if id == topo.root {
            continue;
        }
        let (upper_set, down_set) = sets[id].clone().expect("non-root link has sets");
        if !topo.nodes[id].active {
            links[id] = Some(LinkState {
                node: id,
                upper_set,
                down_set,
                upper_values: vec![Vec::new()],
                down_values: Vec::new(),
            });
            continue;
        }
        if id == root_right {
            continue; // filled together with the left sibling
        }
        if id == root_left {
            let upper = sample_distinct(topo, &upper_set, r0, rng)?;
            let down = sample_distinct(topo, &down_set, r0, rng)?;
            let (r_upper, r_down) = sets[root_right].clone().expect("root right has sets");
            links[root_right] = Some(LinkState {
                node: root_right,
                upper_set: r_upper,
                down_set: r_down,
                upper_values: down.clone(),
                down_values: upper.clone(),
            });
            links[id] = Some(LinkState {
                node: id,
                upper_set,
                down_set,
                upper_values: upper,
                down_values: down,
            });
            continue;
        }
        let upper_values = sample_distinct(topo, &upper_set, r0, rng)?;
        let down_values = sample_distinct(topo, &down_set, r0, rng)?;
        links[id] = Some(LinkState {
            node: id,
            upper_set,
            down_set,
            upper_values,
            down_values,
        });
    }
    Ok(IndexState { links })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Inputs assembled for one update: the two row factors, the column side,
/// and where the result lands.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    pub out_set: Vec<usize>,
    pub out_values: Vec<Vec<usize>>,
    pub in1_set: Vec<usize>,
    pub in1_values: Vec<Vec<usize>>,
    pub in2_set: Vec<usize>,
    pub in2_values: Vec<Vec<usize>>,
    pub target: NodeId,
    pub side: Side,
    /// For root children: the sibling whose opposite list mirrors the result.
    pub mirror: Option<NodeId>,
}

fn leaf_enumeration(topo: &TreeTopology, leaf: NodeId) -> Vec<Vec<usize>> {
    (0..topo.leaf_size(leaf)).map(|n| vec![n]).collect()
}

/// Collects the update inputs for crossing the given link.
///
/// Going up at a node feeds the children's upper values (or the full mode
/// enumeration at a leaf, which has no selection below it) against the
/// node's down values and rewrites the node's upper values. Going down to a
/// child feeds the parent's down values and the sibling's upper values
/// against the child's upper values and rewrites the child's down values.
/// Down moves from the root are the mirror image of an up move at the
/// sibling and are routed there.
pub fn gather_inputs(
    state: &IndexState,
    topo: &TreeTopology,
    link: NodeId,
    direction: Direction,
) -> Result<GatherPlan, StateError> {
    match direction {
        Direction::Up => {
            if link == topo.root {
                return Err(StateError::NoRootLink);
            }
            let st = state.link(link);
            let parent = topo.nodes[link].parent.expect("non-root has a parent");
            let mirror = if parent == topo.root {
                topo.sibling(link)
            } else {
                None
            };
            let (in1_set, in1_values, in2_set, in2_values) = match topo.nodes[link].children {
                None => {
                    let mode = topo.nodes[link].mode.map(|m| vec![m]).unwrap_or_default();
                    (
                        mode,
                        leaf_enumeration(topo, link),
                        Vec::new(),
                        vec![Vec::new()],
                    )
                }
                Some((c1, c2)) => {
                    let s1 = state.link(c1);
                    let s2 = state.link(c2);
                    (
                        s1.upper_set.clone(),
                        s1.upper_values.clone(),
                        s2.upper_set.clone(),
                        s2.upper_values.clone(),
                    )
                }
            };
            Ok(GatherPlan {
                out_set: st.down_set.clone(),
                out_values: st.down_values.clone(),
                in1_set,
                in1_values,
                in2_set,
                in2_values,
                target: link,
                side: Side::Upper,
                mirror,
            })
        }
        Direction::Down => {
            let parent = topo.nodes[link]
                .parent
                .ok_or(StateError::NoRootLink)?;
            if parent == topo.root {
                // Mirrored: updating the down values of a root child is the
                // upper update of its sibling.
                let sibling = topo.sibling(link).expect("root child has a sibling");
                let mut plan = gather_inputs(state, topo, sibling, Direction::Up)?;
                plan.mirror = Some(link);
                return Ok(plan);
            }
            let st = state.link(link);
            let parent_st = state.link(parent);
            let sibling = topo.sibling(link).expect("non-root has a sibling");
            let sib_st = state.link(sibling);
            Ok(GatherPlan {
                out_set: st.upper_set.clone(),
                out_values: st.upper_values.clone(),
                in1_set: parent_st.down_set.clone(),
                in1_values: parent_st.down_values.clone(),
                in2_set: sib_st.upper_set.clone(),
                in2_values: sib_st.upper_values.clone(),
                target: link,
                side: Side::Down,
                mirror: None,
            })
        }
    }
}

/// New values for the index `in1 ∪ in2` plus whether an epsilon truncation
/// happened.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub values: Vec<Vec<usize>>,
    pub truncated: bool,
}

/// How the merged row vectors interleave the two input factors.
fn merge_layout(in1_set: &[usize], in2_set: &[usize]) -> (Vec<usize>, Vec<(bool, usize)>) {
    let mut union: Vec<usize> = in1_set.iter().chain(in2_set.iter()).copied().collect();
    union.sort_unstable();
    let layout = union
        .iter()
        .map(|m| {
            if let Some(p) = in1_set.iter().position(|x| x == m) {
                (true, p)
            } else {
                let p = in2_set.iter().position(|x| x == m).expect("mode in union");
                (false, p)
            }
        })
        .collect();
    (union, layout)
}

/// One index values update: builds the value matrix over the row candidates
/// `in1 x in2` and columns `out`, caches every entry, applies the transform,
/// runs pivoted QR with epsilon rank truncation (which also freezes rank
/// growth for this call), then keeps the rectangular-maxvol rows.
#[allow(clippy::too_many_arguments)]
pub fn update_index_values(
    oracle: &Oracle,
    out_set: &[usize],
    out_values: &[Vec<usize>],
    in1_set: &[usize],
    in1_values: &[Vec<usize>],
    in2_set: &[usize],
    in2_values: &[Vec<usize>],
    delta_r: usize,
    eps: f64,
    transform: TransformKind,
) -> Result<UpdateOutcome, UpdateError> {
    let d = oracle.dim();
    let mut covered = vec![false; d];
    for (name, set) in [("out", out_set), ("in1", in1_set), ("in2", in2_set)] {
        for &m in set {
            if m >= d {
                return Err(UpdateError::InvalidInput(format!(
                    "{name} contains mode {m} outside 0..{d}"
                )));
            }
            if covered[m] {
                return Err(UpdateError::InvalidInput(format!(
                    "mode {m} appears in more than one input set"
                )));
            }
            covered[m] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(UpdateError::InvalidInput(
            "input sets do not cover all modes".into(),
        ));
    }
    let (r1, r2, r) = (in1_values.len(), in2_values.len(), out_values.len());
    if r1 == 0 || r2 == 0 || r == 0 {
        return Err(UpdateError::InvalidInput("empty value list".into()));
    }
    for (set, values, name) in [
        (out_set, out_values, "out"),
        (in1_set, in1_values, "in1"),
        (in2_set, in2_values, "in2"),
    ] {
        if values.iter().any(|v| v.len() != set.len()) {
            return Err(UpdateError::InvalidInput(format!(
                "{name} value length does not match its set"
            )));
        }
    }

    let (_union, layout) = merge_layout(in1_set, in2_set);
    let mut matrix = Array2::<f64>::zeros((r1 * r2, r));
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(r1 * r2);
    let mut point = vec![0usize; d];
    for (j1, v1) in in1_values.iter().enumerate() {
        for (j2, v2) in in2_values.iter().enumerate() {
            let merged: Vec<usize> = layout
                .iter()
                .map(|&(from1, pos)| if from1 { v1[pos] } else { v2[pos] })
                .collect();
            rows.push(merged);
            for (slot, &m) in in1_set.iter().enumerate() {
                point[m] = v1[slot];
            }
            for (slot, &m) in in2_set.iter().enumerate() {
                point[m] = v2[slot];
            }
            for (j, vo) in out_values.iter().enumerate() {
                for (slot, &m) in out_set.iter().enumerate() {
                    point[m] = vo[slot];
                }
                let value = oracle.eval(&point).map_err(|e| match e {
                    BenchError::BudgetExhausted => UpdateError::BudgetExhausted,
                    other => UpdateError::InvalidInput(other.to_string()),
                })?;
                matrix[[j1 * r2 + j2, j]] = value;
            }
        }
    }

    if matrix.iter().all(|&v| v == 0.0) {
        return Err(UpdateError::DegenerateBlock);
    }
    transform.apply(&mut matrix);

    // Drop bitwise-duplicate rows before selection. Candidate products over
    // symmetric functions routinely contain distinct index vectors with
    // identical value rows; keeping them would let the selection return
    // value-degenerate anchors.
    let mut kept: Vec<usize> = Vec::with_capacity(rows.len());
    {
        let mut seen: HashSet<Vec<u64>> = HashSet::new();
        for i in 0..rows.len() {
            let bits: Vec<u64> = (0..r).map(|j| matrix[[i, j]].to_bits()).collect();
            if seen.insert(bits) {
                kept.push(i);
            }
        }
    }
    let deduped = if kept.len() == rows.len() {
        matrix
    } else {
        let mut m = Array2::zeros((kept.len(), r));
        for (row, &src) in kept.iter().enumerate() {
            for j in 0..r {
                m[[row, j]] = matrix[[src, j]];
            }
        }
        m
    };

    let qr = linalg::qr_pivoted(&deduped);
    let diag = qr.diag_magnitudes();
    if diag[0] == 0.0 {
        return Err(UpdateError::DegenerateBlock);
    }
    let mut r_eps = 0;
    for &m in &diag {
        if m / diag[0] >= eps {
            r_eps += 1;
        } else {
            break;
        }
    }
    let truncated = r_eps < r;
    let delta_eff = if truncated { 0 } else { delta_r };
    // A selection that fell to a single row may regrow when growth is
    // allowed; the dominant row blocks the volume-gain criterion on its own.
    let min_rows = if !truncated && delta_eff > 0 { 2 } else { 0 };
    let q = qr.q.slice(ndarray::s![.., ..r_eps]).to_owned();
    let selected = linalg::maxvol_rect_min(&q, delta_eff, 1.0, min_rows)?;
    let values = selected.iter().map(|&i| rows[kept[i]].clone()).collect();
    Ok(UpdateOutcome { values, truncated })
}

/// Rank-growth allowance for an update landing on `plan.target`: never past
/// what the opposite side's index domain can hold distinct vectors for.
/// Growth after an epsilon truncation is suppressed inside the update call
/// itself, so a link that collapsed on one visit may still regrow later.
pub fn effective_delta_r(
    state: &IndexState,
    topo: &TreeTopology,
    plan: &GatherPlan,
    delta_r: usize,
) -> usize {
    let counterpart_set = match plan.side {
        Side::Upper => &state.link(plan.target).down_set,
        Side::Down => &state.link(plan.target).upper_set,
    };
    let available = domain_size(topo, counterpart_set);
    let cols = plan.out_values.len() as u128;
    let headroom = available.saturating_sub(cols).min(delta_r as u128);
    headroom as usize
}

/// Writes an update result back into the state: replaces the named side,
/// mirrors across the root when needed, and truncates or extends the
/// opposite list so both sides share the new rank.
pub fn apply_update(
    state: &mut IndexState,
    topo: &TreeTopology,
    plan: &GatherPlan,
    outcome: UpdateOutcome,
    rng: &mut ChaCha8Rng,
) {
    let rank = outcome.values.len();
    debug_assert!(rank > 0);
    {
        let link = state.link_mut(plan.target);
        match plan.side {
            Side::Upper => link.upper_values = outcome.values.clone(),
            Side::Down => link.down_values = outcome.values.clone(),
        }
    }
    if let Some(sibling) = plan.mirror {
        debug_assert_eq!(plan.side, Side::Upper);
        // Shared root lists: sibling's down is the target's upper; the
        // second shared list (target down == sibling upper) is resized to
        // keep the root core square.
        state.link_mut(sibling).down_values = outcome.values.clone();
        let mut other = state.link(sibling).upper_values.clone();
        other.truncate(rank);
        let set = state.link(sibling).upper_set.clone();
        extend_distinct(topo, &set, &mut other, rank, rng);
        state.link_mut(sibling).upper_values = other.clone();
        state.link_mut(plan.target).down_values = other;
    } else {
        let (set, mut counterpart) = {
            let link = state.link(plan.target);
            match plan.side {
                Side::Upper => (link.down_set.clone(), link.down_values.clone()),
                Side::Down => (link.upper_set.clone(), link.upper_values.clone()),
            }
        };
        counterpart.truncate(rank);
        extend_distinct(topo, &set, &mut counterpart, rank, rng);
        let link = state.link_mut(plan.target);
        match plan.side {
            Side::Upper => link.down_values = counterpart,
            Side::Down => link.upper_values = counterpart,
        }
    }
}

/// Structural health check used by tests: set partitions, value lengths,
/// bounds, distinctness, and the root mirror.
pub fn check_invariants(state: &IndexState, topo: &TreeTopology) -> Result<(), String> {
    for id in 0..topo.nodes.len() {
        if id == topo.root || !state.has_link(id) {
            continue;
        }
        let link = state.link(id);
        let mut all: Vec<usize> = link
            .upper_set
            .iter()
            .chain(link.down_set.iter())
            .copied()
            .collect();
        all.sort_unstable();
        if all != (0..topo.dim).collect::<Vec<_>>() {
            return Err(format!("link {id}: upper and down sets do not partition"));
        }
        if !topo.nodes[id].active {
            continue;
        }
        if link.upper_values.is_empty() || link.upper_values.len() != link.down_values.len() {
            return Err(format!(
                "link {id}: value lists have lengths {} and {}",
                link.upper_values.len(),
                link.down_values.len()
            ));
        }
        for (set, values, name) in [
            (&link.upper_set, &link.upper_values, "upper"),
            (&link.down_set, &link.down_values, "down"),
        ] {
            let mut seen = HashSet::new();
            for v in values.iter() {
                if v.len() != set.len() {
                    return Err(format!("link {id}: {name} vector length mismatch"));
                }
                for (&m, &val) in set.iter().zip(v.iter()) {
                    if val >= topo.mode_sizes[m] {
                        return Err(format!("link {id}: {name} value out of bounds"));
                    }
                }
                if !seen.insert(v.clone()) {
                    return Err(format!("link {id}: duplicate {name} vector"));
                }
            }
        }
    }
    let (l, r) = topo.nodes[topo.root].children.expect("root children");
    let (sl, sr) = (state.link(l), state.link(r));
    if sl.down_values != sr.upper_values || sl.upper_values != sr.down_values {
        return Err("root mirror invariant broken".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::build_balanced_tree;
    use rand::SeedableRng;

    fn modes(v: &[usize]) -> Vec<usize> {
        v.to_vec()
    }

    #[test]
    fn index_sets_for_four_modes() {
        let topo = build_balanced_tree(4, &[2, 2, 2, 2]).unwrap();
        let sets = init_index_sets(&topo);
        // heap layout: leaves are nodes 3..=6 carrying modes 0..=3
        assert_eq!(sets[3].as_ref().unwrap().0, modes(&[0]));
        assert_eq!(sets[4].as_ref().unwrap().0, modes(&[1]));
        assert_eq!(sets[5].as_ref().unwrap().0, modes(&[2]));
        assert_eq!(sets[6].as_ref().unwrap().0, modes(&[3]));
        assert_eq!(sets[1].as_ref().unwrap().0, modes(&[0, 1]));
        assert_eq!(sets[2].as_ref().unwrap().0, modes(&[2, 3]));
        assert_eq!(sets[1].as_ref().unwrap().1, modes(&[2, 3]));
        assert!(sets[0].is_none());
    }

    #[test]
    fn index_sets_for_two_modes_cross_over() {
        let topo = build_balanced_tree(2, &[3, 4]).unwrap();
        let sets = init_index_sets(&topo);
        assert_eq!(sets[1].as_ref().unwrap(), &(modes(&[0]), modes(&[1])));
        assert_eq!(sets[2].as_ref().unwrap(), &(modes(&[1]), modes(&[0])));
    }

    #[test]
    fn index_sets_for_eight_modes_follow_the_recursion() {
        let sizes = [2, 2, 3, 3, 2, 2, 2, 10];
        let topo = build_balanced_tree(8, &sizes).unwrap();
        let sets = init_index_sets(&topo);
        for id in 0..topo.nodes.len() {
            if id == topo.root {
                continue;
            }
            let (upper, down) = sets[id].as_ref().unwrap();
            match topo.nodes[id].children {
                None => assert_eq!(upper, &vec![topo.nodes[id].mode.unwrap()]),
                Some((c1, c2)) => {
                    let mut union = sets[c1].as_ref().unwrap().0.clone();
                    union.extend(sets[c2].as_ref().unwrap().0.iter());
                    union.sort_unstable();
                    assert_eq!(upper, &union);
                }
            }
            let mut both = upper.clone();
            both.extend(down.iter());
            both.sort_unstable();
            assert_eq!(both, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn init_values_are_deterministic_distinct_and_in_bounds() {
        let topo = build_balanced_tree(4, &[8, 8, 8, 8]).unwrap();
        let state1 = init_index_values(&topo, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let state2 = init_index_values(&topo, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for id in 1..topo.nodes.len() {
            assert_eq!(state1.link(id).upper_values, state2.link(id).upper_values);
            assert_eq!(state1.link(id).down_values, state2.link(id).down_values);
        }
        check_invariants(&state1, &topo).unwrap();
    }

    #[test]
    fn init_with_rank_one_gives_singletons() {
        let topo = build_balanced_tree(3, &[4, 4, 4]).unwrap();
        let state = init_index_values(&topo, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in 1..topo.nodes.len() {
            if topo.nodes[id].active {
                assert_eq!(state.link(id).rank(), 1);
            }
        }
        check_invariants(&state, &topo).unwrap();
    }

    #[test]
    fn init_rejects_rank_past_domain() {
        // leaf upper set has a domain of 2, rank 3 cannot be distinct
        let topo = build_balanced_tree(2, &[2, 16]).unwrap();
        let err = init_index_values(&topo, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(StateError::RankTooLarge { .. })));
    }

    #[test]
    fn gather_up_at_leaf_of_two_mode_tree_enumerates_the_mode() {
        let topo = build_balanced_tree(2, &[5, 7]).unwrap();
        let state = init_index_values(&topo, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let plan = gather_inputs(&state, &topo, 1, Direction::Up).unwrap();
        assert_eq!(plan.in1_set, vec![0]);
        assert_eq!(plan.in1_values.len(), 5);
        assert!(plan.in2_set.is_empty());
        assert_eq!(plan.in2_values, vec![Vec::<usize>::new()]);
        assert_eq!(plan.out_set, vec![1]);
        assert_eq!(plan.side, Side::Upper);
        assert_eq!(plan.mirror, Some(2));
    }

    #[test]
    fn gather_up_at_inner_node_uses_children_uppers_and_own_downs() {
        let sizes = [2, 2, 3, 3, 2, 2, 2, 10];
        let topo = build_balanced_tree(8, &sizes).unwrap();
        let state = init_index_values(&topo, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // node 4 is the leaf pair (modes 2, 3) parent in the heap layout:
        // level-3 node with children 9 and 10
        let node = 4;
        let (c1, c2) = topo.nodes[node].children.unwrap();
        let plan = gather_inputs(&state, &topo, node, Direction::Up).unwrap();
        assert_eq!(plan.in1_set, state.link(c1).upper_set);
        assert_eq!(plan.in2_set, state.link(c2).upper_set);
        assert_eq!(plan.out_set, state.link(node).down_set);
        assert_eq!(plan.target, node);
        assert_eq!(plan.mirror, None);
    }

    #[test]
    fn gather_down_uses_parent_downs_and_sibling_uppers() {
        let sizes = [2, 2, 3, 3, 2, 2, 2, 10];
        let topo = build_balanced_tree(8, &sizes).unwrap();
        let state = init_index_values(&topo, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let node = 9; // leaf carrying mode 2; parent 4, sibling 10
        let plan = gather_inputs(&state, &topo, node, Direction::Down).unwrap();
        assert_eq!(plan.in1_set, state.link(4).down_set);
        assert_eq!(plan.in2_set, state.link(10).upper_set);
        assert_eq!(plan.out_set, state.link(node).upper_set);
        assert_eq!(plan.side, Side::Down);
        // out of the update falls on the node's down side
        let mut union = plan.in1_set.clone();
        union.extend(plan.in2_set.iter());
        union.sort_unstable();
        assert_eq!(union, state.link(node).down_set);
    }

    #[test]
    fn gather_down_from_root_routes_to_sibling_upper_update() {
        let topo = build_balanced_tree(4, &[4, 4, 4, 4]).unwrap();
        let state = init_index_values(&topo, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (left, right) = topo.nodes[topo.root].children.unwrap();
        let plan = gather_inputs(&state, &topo, left, Direction::Down).unwrap();
        assert_eq!(plan.target, right);
        assert_eq!(plan.side, Side::Upper);
        assert_eq!(plan.mirror, Some(left));
    }

    #[test]
    fn gather_up_at_root_is_rejected() {
        let topo = build_balanced_tree(2, &[3, 3]).unwrap();
        let state = init_index_values(&topo, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            gather_inputs(&state, &topo, topo.root, Direction::Up),
            Err(StateError::NoRootLink)
        ));
    }

    #[test]
    fn update_with_unit_ranks_returns_the_single_concatenation() {
        let oracle = Oracle::from_index_fn(
            |ix| (ix[0] + 10 * ix[1] + 100 * ix[2]) as f64 + 1.0,
            vec![4, 4, 4],
            100,
        )
        .unwrap();
        let outcome = update_index_values(
            &oracle,
            &[2],
            &[vec![3]],
            &[0],
            &[vec![1]],
            &[1],
            &[vec![2]],
            1,
            1e-8,
            TransformKind::Identity,
        )
        .unwrap();
        assert_eq!(outcome.values, vec![vec![1, 2]]);
        assert!(!outcome.truncated);
    }

    #[test]
    fn constant_oracle_truncates_to_rank_one() {
        let oracle = Oracle::from_index_fn(|_| 2.5, vec![4, 4, 4, 4], 1000).unwrap();
        let outcome = update_index_values(
            &oracle,
            &[2, 3],
            &[vec![0, 0], vec![1, 1]],
            &[0],
            &[vec![0], vec![1], vec![2]],
            &[1],
            &[vec![0], vec![2]],
            1,
            1e-8,
            TransformKind::Identity,
        )
        .unwrap();
        assert_eq!(outcome.values.len(), 1);
        assert!(outcome.truncated);
    }

    #[test]
    fn separable_oracle_selection_matches_brute_force_maxvol_rows() {
        // f = g(x0, x1) * h(x2, x3): the value matrix is rank one and the
        // kept row must be the one of largest magnitude row norm, which is
        // also the exact maximal-volume single row over all sixteen.
        let g = |a: usize, b: usize| 1.0 + (a as f64) + 2.0 * (b as f64) * (b as f64);
        let h = |c: usize, e: usize| 0.5 + ((c + e) as f64).sqrt();
        let oracle = Oracle::from_index_fn(
            move |ix| g(ix[0], ix[1]) * h(ix[2], ix[3]),
            vec![4, 4, 4, 4],
            10_000,
        )
        .unwrap();
        let in1: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let in2: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let out: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3]];
        let outcome = update_index_values(
            &oracle,
            &[2, 3],
            &out,
            &[0],
            &in1,
            &[1],
            &in2,
            1,
            1e-8,
            TransformKind::Identity,
        )
        .unwrap();
        assert!(outcome.truncated);
        assert_eq!(outcome.values.len(), 1);
        // brute force: the row (a, b) maximizing |g(a, b)|
        let mut best = (0usize, 0usize, 0.0f64);
        for a in 0..4 {
            for b in 0..4 {
                let v = g(a, b).abs();
                if v > best.2 {
                    best = (a, b, v);
                }
            }
        }
        assert_eq!(outcome.values[0], vec![best.0, best.1]);
    }

    #[test]
    fn update_propagates_budget_exhaustion_and_keeps_partial_cache() {
        let oracle = Oracle::from_index_fn(|ix| ix[0] as f64 + 1.0, vec![4, 4], 3).unwrap();
        let err = update_index_values(
            &oracle,
            &[1],
            &[vec![0], vec![1]],
            &[0],
            &[vec![0], vec![1], vec![2]],
            &[],
            &[vec![]],
            0,
            1e-8,
            TransformKind::Identity,
        );
        assert!(matches!(err, Err(UpdateError::BudgetExhausted)));
        assert_eq!(oracle.evaluations(), 3);
        assert_eq!(oracle.cache().len(), 3);
    }

    #[test]
    fn all_zero_block_is_degenerate() {
        let oracle = Oracle::from_index_fn(|_| 0.0, vec![3, 3], 100).unwrap();
        let err = update_index_values(
            &oracle,
            &[1],
            &[vec![0]],
            &[0],
            &[vec![0], vec![1]],
            &[],
            &[vec![]],
            0,
            1e-8,
            TransformKind::Identity,
        );
        assert!(matches!(err, Err(UpdateError::DegenerateBlock)));
    }

    #[test]
    fn apply_update_keeps_mirror_and_rank_reconciliation() {
        let topo = build_balanced_tree(4, &[6, 6, 6, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut state = init_index_values(&topo, 2, &mut rng).unwrap();
        let (left, _right) = topo.nodes[topo.root].children.unwrap();
        let plan = gather_inputs(&state, &topo, left, Direction::Up).unwrap();
        let outcome = UpdateOutcome {
            values: vec![vec![0, 0], vec![1, 1], vec![2, 2]],
            truncated: false,
        };
        apply_update(&mut state, &topo, &plan, outcome, &mut rng);
        check_invariants(&state, &topo).unwrap();
        assert_eq!(state.link(left).rank(), 3);
    }

    #[test]
    fn cache_csv_round_trip() {
        let cache = EvalCache::new();
        cache.insert(&[0, 2, 1], 1.5);
        cache.insert(&[3, 0, 0], -2.25e-7);
        let text = cache.to_csv();
        let back = EvalCache::from_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get(&[0, 2, 1]), Some(1.5));
        assert_eq!(back.get(&[3, 0, 0]), Some(-2.25e-7));
    }
}
