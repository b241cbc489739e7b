//! The traversal procedure and the two user-facing entry points.
//!
//! The walk moves between adjacent tree nodes, incrementing a per-node visit
//! counter. Crossing an edge from child to parent rewrites the link's upper
//! values; parent to child rewrites the child link's down values (at the
//! root this is the mirror image of the sibling's upper update). When two
//! onward moves are possible the walk cuts the incoming edge and both
//! candidate edges and compares mean visit counts over the two candidate
//! components, moving to the lighter one, with ties broken at random.
//!
//! `ht_cross` runs the walk under the evaluation budget and assembles a
//! surrogate; `ht_opt` runs it with an adaptive exponential transform and
//! reports the best raw value ever evaluated.

use crate::bench::Oracle;
use crate::build::{build_model, BuildError};
use crate::state::{
    self, apply_update, gather_inputs, init_index_values, update_index_values, GatherPlan,
    IndexState, StateError, UpdateError,
};
use crate::transform::TransformKind;
use crate::tree::{HtModel, NodeId, TreeTopology};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("index update failed: {0}")]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// How the evaluation budget is enforced.
///
/// `Strict` reserves enough of the budget during the walk for the final
/// core construction, so a whole run stays within the cap. `SearchOnly`
/// caps just the index search; construction afterwards is still counted but
/// not limited, which matches very high dimensional runs where the cores
/// alone cost more than the search budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetPolicy {
    Strict,
    SearchOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Initial rank of every link.
    pub rank: usize,
    /// Rank growth allowance per update.
    pub delta_r: usize,
    /// Relative rank-truncation threshold.
    pub eps: f64,
    /// Visit-count mean difference treated as a tie.
    pub alpha: f64,
    pub seed: u64,
    pub transform: TransformKind,
    pub budget_policy: BudgetPolicy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rank: 2,
            delta_r: 1,
            eps: 1e-12,
            alpha: 0.5,
            seed: 0,
            transform: TransformKind::Identity,
            budget_policy: BudgetPolicy::Strict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub evals: u64,
    pub value: f64,
}

/// Structured result of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub total_evaluations: u64,
    pub best_index: Vec<usize>,
    pub best_value: f64,
    pub trace: Vec<TracePoint>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Trace as CSV with columns `evals,value`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("evals,value\n");
        for p in &self.trace {
            out.push_str(&format!("{},{:.16e}\n", p.evals, p.value));
        }
        out
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub state: IndexState,
    pub counters: Vec<u64>,
    pub crossings: u64,
}

/// Mean visit count over the component hanging off `from` when all edges
/// incident to `current` are cut; only active nodes count.
fn component_mean(topo: &TreeTopology, counters: &[u64], current: NodeId, from: NodeId) -> f64 {
    let mut sum = 0u64;
    let mut count = 0u64;
    let mut stack = vec![from];
    let mut seen = vec![false; topo.nodes.len()];
    seen[current] = true;
    while let Some(id) = stack.pop() {
        if seen[id] {
            continue;
        }
        seen[id] = true;
        if topo.nodes[id].active {
            sum += counters[id];
            count += 1;
        }
        if let Some(p) = topo.nodes[id].parent {
            stack.push(p);
        }
        if let Some((a, b)) = topo.nodes[id].children {
            stack.push(a);
            stack.push(b);
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum as f64 / count as f64
    }
}

/// Picks the next node of the walk. At a leaf the only move is back to the
/// parent; otherwise the incoming edge is excluded and candidates are
/// compared by their component's mean visit count, ties within `alpha`
/// resolved uniformly at random.
pub fn next_step(
    topo: &TreeTopology,
    counters: &[u64],
    current: NodeId,
    came_from: Option<NodeId>,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let candidates: Vec<NodeId> = topo
        .active_neighbors(current)
        .into_iter()
        .filter(|&n| Some(n) != came_from)
        .collect();
    match candidates.len() {
        0 => came_from.expect("leaf walk came from somewhere"),
        1 => candidates[0],
        _ => {
            let means: Vec<f64> = candidates
                .iter()
                .map(|&c| component_mean(topo, counters, current, c))
                .collect();
            let best = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let tied: Vec<NodeId> = candidates
                .iter()
                .zip(&means)
                .filter(|(_, &m)| m - best <= alpha)
                .map(|(&c, _)| c)
                .collect();
            tied[rng.gen_range(0..tied.len())]
        }
    }
}

/// Upper bound on the oracle entries construction will still need.
///
/// Leaf fibers are predictable (full mode at the current down values) and
/// probed against the cache. Inner and root blocks are sampled at anchors
/// the builder re-selects on the fly, so they are charged in full.
fn build_deficit(topo: &TreeTopology, state: &IndexState, oracle: &Oracle) -> u64 {
    let mut misses = 0u64;
    let mut point = vec![0u16; topo.dim];
    let cache = oracle.cache();
    for id in 0..topo.nodes.len() {
        let node = &topo.nodes[id];
        if !node.active {
            continue;
        }
        if id == topo.root {
            let (c1, c2) = node.children.expect("root children");
            let (s1, s2) = (state.link(c1), state.link(c2));
            misses += (s1.upper_values.len() * s2.upper_values.len()) as u64;
            continue;
        }
        let link = state.link(id);
        match node.children {
            None => {
                let mode = node.mode.expect("active leaf carries a mode");
                for dv in &link.down_values {
                    for (slot, &m) in link.down_set.iter().enumerate() {
                        point[m] = dv[slot] as u16;
                    }
                    for i in 0..topo.mode_sizes[mode] {
                        point[mode] = i as u16;
                        if !cache.contains_key_u16(&point) {
                            misses += 1;
                        }
                    }
                }
            }
            Some((c1, c2)) => {
                let (s1, s2) = (state.link(c1), state.link(c2));
                let rows = s1.upper_values.len() * s2.upper_values.len();
                misses += (rows * link.down_values.len()) as u64;
            }
        }
    }
    misses
}

/// Safety slack on top of the construction reserve: covers the next update
/// and the deficit growth it can cause.
const RESERVE_MARGIN: u64 = 512;

fn run_sweep(
    topo: &TreeTopology,
    oracle: &Oracle,
    config: &SweepConfig,
    reserve_for_build: bool,
) -> Result<SweepOutcome, SweepError> {
    if config.rank == 0 {
        return Err(SweepError::InvalidConfig("rank must be at least 1".into()));
    }
    if oracle.dim() != topo.dim {
        return Err(SweepError::InvalidConfig(format!(
            "oracle dimension {} does not match tree dimension {}",
            oracle.dim(),
            topo.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = init_index_values(topo, config.rank, &mut rng)?;
    let mut counters = vec![0u64; topo.nodes.len()];
    let start = topo.nodes[topo.root].children.expect("root children").0;
    counters[start] += 1;
    let mut current = start;
    let mut came_from: Option<NodeId> = None;
    let mut crossings = 0u64;
    let mut stagnant = 0u64;
    let edges = (topo.nodes.len() - 1) as u64;
    let stagnation_cap = 8 * edges + 16;
    let domain = oracle.domain_size();
    let mut evals_at_last_scan: Option<u64> = None;

    loop {
        if oracle.remaining_budget() == Some(0) {
            break;
        }
        if oracle.evaluations() as u128 >= domain {
            break;
        }
        if reserve_for_build {
            if let Some(remaining) = oracle.remaining_budget() {
                // The deficit scan is not free; redo it only after enough
                // fresh evaluations could have moved it.
                let evals = oracle.evaluations();
                let stale = evals_at_last_scan.map_or(true, |e| evals - e >= 16);
                if stale {
                    evals_at_last_scan = Some(evals);
                    let deficit = build_deficit(topo, &state, oracle);
                    if remaining <= deficit + RESERVE_MARGIN {
                        break;
                    }
                }
            }
        }
        let next = next_step(topo, &counters, current, came_from, config.alpha, &mut rng);
        let plan: GatherPlan = if topo.nodes[current].parent == Some(next) {
            gather_inputs(&state, topo, current, state::Direction::Up)?
        } else {
            gather_inputs(&state, topo, next, state::Direction::Down)?
        };
        let delta_eff = state::effective_delta_r(&state, topo, &plan, config.delta_r);
        let spent_before = oracle.evaluations();
        match update_index_values(
            oracle,
            &plan.out_set,
            &plan.out_values,
            &plan.in1_set,
            &plan.in1_values,
            &plan.in2_set,
            &plan.in2_values,
            delta_eff,
            config.eps,
            config.transform,
        ) {
            Ok(outcome) => apply_update(&mut state, topo, &plan, outcome, &mut rng),
            Err(UpdateError::BudgetExhausted) => break,
            // Flat region: keep the previous values and walk on.
            Err(UpdateError::DegenerateBlock) => {}
            Err(e) => return Err(e.into()),
        }
        let spent = oracle.evaluations() - spent_before;
        stagnant = if spent == 0 { stagnant + 1 } else { 0 };
        came_from = Some(current);
        current = next;
        counters[current] += 1;
        crossings += 1;
        if stagnant >= stagnation_cap {
            break;
        }
    }

    Ok(SweepOutcome {
        state,
        counters,
        crossings,
    })
}

/// Runs the traversal until the budget is exhausted and returns the final
/// link states and visit counters.
pub fn sweep(
    topo: &TreeTopology,
    oracle: &Oracle,
    config: &SweepConfig,
) -> Result<SweepOutcome, SweepError> {
    run_sweep(topo, oracle, config, false)
}

/// Black-box approximation: index search followed by core construction.
/// Requires the identity transform.
pub fn ht_cross(
    topo: &TreeTopology,
    oracle: &Oracle,
    config: &SweepConfig,
) -> Result<(HtModel, RunReport), SweepError> {
    if config.transform != TransformKind::Identity {
        return Err(SweepError::InvalidConfig(
            "approximation runs use the identity transform".into(),
        ));
    }
    let reserve = config.budget_policy == BudgetPolicy::Strict;
    let mut outcome = run_sweep(topo, oracle, config, reserve)?;
    if config.budget_policy == BudgetPolicy::SearchOnly {
        oracle.lift_budget();
    }
    let model = build_model(oracle, topo, &mut outcome.state, config.eps)?;
    let (best_index, best_value) = oracle.best_min().unwrap_or((Vec::new(), 0.0));
    Ok((
        model,
        RunReport {
            mode: "approx".into(),
            total_evaluations: oracle.evaluations(),
            best_index,
            best_value,
            trace: oracle.trace_min(),
        },
    ))
}

/// Gradient-free optimization: the traversal with the adaptive exponential
/// transform. The reported value is the extremum over every raw evaluation
/// the oracle ever performed.
pub fn ht_opt(
    topo: &TreeTopology,
    oracle: &Oracle,
    config: &SweepConfig,
    direction: Direction,
) -> Result<RunReport, SweepError> {
    let expected = match direction {
        Direction::Min => TransformKind::ExpMin,
        Direction::Max => TransformKind::ExpMax,
    };
    if config.transform != expected {
        return Err(SweepError::InvalidConfig(format!(
            "optimization toward {direction:?} requires the {expected:?} transform"
        )));
    }
    let outcome = run_sweep(topo, oracle, config, false)?;
    let _ = outcome;
    let (best_index, best_value, trace, mode) = match direction {
        Direction::Min => {
            let (i, v) = oracle.best_min().unwrap_or((Vec::new(), 0.0));
            (i, v, oracle.trace_min(), "opt-min")
        }
        Direction::Max => {
            let (i, v) = oracle.best_max().unwrap_or((Vec::new(), 0.0));
            (i, v, oracle.trace_max(), "opt-max")
        }
    };
    Ok(RunReport {
        mode: mode.into(),
        total_evaluations: oracle.evaluations(),
        best_index,
        best_value,
        trace,
    })
}

impl SweepConfig {
    /// Convenience constructor with the transform matching the direction.
    pub fn for_direction(direction: Direction, seed: u64) -> Self {
        SweepConfig {
            transform: match direction {
                Direction::Min => TransformKind::ExpMin,
                Direction::Max => TransformKind::ExpMax,
            },
            seed,
            ..SweepConfig::default()
        }
    }

    pub fn for_approximation(seed: u64) -> Self {
        SweepConfig {
            seed,
            ..SweepConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::relative_l2_error;
    use crate::state::check_invariants;
    use crate::tree::build_balanced_tree;

    #[test]
    fn next_step_ties_are_seed_reproducible() {
        let topo = build_balanced_tree(4, &[4, 4, 4, 4]).unwrap();
        let counters = vec![0u64; topo.nodes.len()];
        let mut picks = Vec::new();
        for _ in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            picks.push(next_step(&topo, &counters, 1, None, 0.0, &mut rng));
        }
        assert_eq!(picks[0], picks[1]);
    }

    #[test]
    fn next_step_prefers_untouched_component() {
        let topo = build_balanced_tree(4, &[4, 4, 4, 4]).unwrap();
        let mut counters = vec![0u64; topo.nodes.len()];
        // left subtree (nodes 1, 3, 4) heavily visited, right untouched
        counters[1] = 4;
        counters[3] = 4;
        counters[4] = 4;
        counters[0] = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // standing at the root having come from node 1: only node 2 remains
        assert_eq!(next_step(&topo, &counters, 0, Some(1), 0.5, &mut rng), 2);
        // standing at node 1 after arriving from node 3: candidates are the
        // parent (root side, mean > 0) and node 4 (visited); with alpha 0
        // the walk must pick the smaller mean, which is the parent side
        // (2 + 0) / 2 = 1 versus 4 at node 4.
        assert_eq!(next_step(&topo, &counters, 1, Some(3), 0.0, &mut rng), 0);
    }

    #[test]
    fn walk_never_enters_inactive_padding() {
        let topo = build_balanced_tree(5, &[4, 4, 4, 4, 4]).unwrap();
        let oracle = Oracle::from_index_fn(
            |ix| ix.iter().map(|&i| (i as f64 + 0.5).ln()).sum(),
            vec![4; 5],
            2_000,
        )
        .unwrap();
        let config = SweepConfig::default();
        let outcome = sweep(&topo, &oracle, &config).unwrap();
        for node in &topo.nodes {
            if !node.active {
                assert_eq!(
                    outcome.counters[node.id], 0,
                    "inactive node {} was visited",
                    node.id
                );
            }
        }
        check_invariants(&outcome.state, &topo).unwrap();
    }

    #[test]
    fn budget_smaller_than_one_fill_terminates_cleanly() {
        let topo = build_balanced_tree(4, &[8, 8, 8, 8]).unwrap();
        let oracle =
            Oracle::from_index_fn(|ix| ix[0] as f64 + 1.0, vec![8, 8, 8, 8], 3).unwrap();
        let outcome = sweep(&topo, &oracle, &SweepConfig::default()).unwrap();
        assert!(oracle.evaluations() <= 3);
        assert!(outcome.crossings <= 2);
        assert!(oracle.cache().len() as u64 == oracle.evaluations());
    }

    #[test]
    fn two_mode_walk_alternates_and_keeps_the_mirror() {
        let topo = build_balanced_tree(2, &[8, 8]).unwrap();
        let oracle = Oracle::from_index_fn(
            |ix| (1 + ix[0] * 8 + ix[1]) as f64,
            vec![8, 8],
            64,
        )
        .unwrap();
        let config = SweepConfig {
            rank: 1,
            ..SweepConfig::default()
        };
        let outcome = sweep(&topo, &oracle, &config).unwrap();
        // both leaves and the root were walked
        assert!(outcome.counters[0] > 0);
        assert!(outcome.counters[1] > 0);
        assert!(outcome.counters[2] > 0);
        check_invariants(&outcome.state, &topo).unwrap();
    }

    #[test]
    fn sweep_cache_holds_the_grid_minimum_of_a_small_separable_problem() {
        // Exhaustive scan of the reduced instance is the oracle of truth.
        let d = 4;
        let n = 8;
        let axis: Vec<f64> = crate::bench::chebyshev_grid(n, -5.12, 5.12).unwrap();
        let sphere = {
            let axis = axis.clone();
            move |ix: &[usize]| ix.iter().map(|&i| axis[i] * axis[i]).sum::<f64>()
        };
        let brute_min = {
            let per_axis = axis.iter().map(|x| x * x).fold(f64::INFINITY, f64::min);
            per_axis * d as f64
        };
        let oracle = Oracle::from_index_fn(sphere, vec![n; d], 10_000).unwrap();
        let config = SweepConfig {
            transform: TransformKind::ExpMin,
            ..SweepConfig::default()
        };
        sweep(&topo_for(d, n), &oracle, &config).unwrap();
        let (_, best) = oracle.best_min().unwrap();
        assert!(
            best <= brute_min + 1e-9,
            "cached minimum {best} above grid optimum {brute_min}"
        );
    }

    fn topo_for(d: usize, n: usize) -> TreeTopology {
        build_balanced_tree(d, &vec![n; d]).unwrap()
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let run = || {
            let topo = topo_for(6, 6);
            let oracle = Oracle::for_benchmark("alpine", 6, 6, 800).unwrap();
            let config = SweepConfig::for_direction(Direction::Min, 3);
            ht_opt(&topo, &oracle, &config, Direction::Min).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn cross_requires_identity_transform() {
        let topo = topo_for(2, 4);
        let oracle = Oracle::for_benchmark("sphere", 2, 4, 100).unwrap();
        let config = SweepConfig {
            transform: TransformKind::ExpMin,
            ..SweepConfig::default()
        };
        assert!(matches!(
            ht_cross(&topo, &oracle, &config),
            Err(SweepError::InvalidConfig(_))
        ));
    }

    #[test]
    fn cross_reproduces_a_constant_function() {
        let topo = topo_for(6, 4);
        let oracle = Oracle::from_index_fn(|_| 3.7, vec![4; 6], 2_000).unwrap();
        let config = SweepConfig::for_approximation(1);
        let (model, report) = ht_cross(&topo, &oracle, &config).unwrap();
        assert!(report.total_evaluations <= 2_000);
        let err = relative_l2_error(
            |ix| model.evaluate(ix).unwrap(),
            |_| 3.7,
            &[4; 6],
            500,
            9,
        );
        assert!(err.value <= 1e-14, "relative error {}", err.value);
    }

    #[test]
    fn cross_is_exact_on_an_additive_function() {
        let d = 16;
        let n = 8;
        let topo = topo_for(d, n);
        let oracle = Oracle::for_benchmark("alpine", d, n, 10_000).unwrap();
        let config = SweepConfig::for_approximation(0);
        let (model, report) = ht_cross(&topo, &oracle, &config).unwrap();
        assert!(report.total_evaluations <= 10_000);
        let axis = crate::bench::chebyshev_grid(n, -10.0, 10.0).unwrap();
        let truth = move |ix: &[usize]| {
            ix.iter()
                .map(|&i| {
                    let x = axis[i];
                    (x * x.sin() + 0.1 * x).abs()
                })
                .sum::<f64>()
        };
        let err = relative_l2_error(
            |ix| model.evaluate(ix).unwrap(),
            truth,
            &vec![n; d],
            10_000,
            7,
        );
        assert!(err.value <= 1e-10, "relative error {}", err.value);
    }

    #[test]
    fn cross_recovers_an_exact_low_rank_tensor() {
        let topo = topo_for(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = HtModel {
            topology: topo.clone(),
            cores: crate::tree::testutil::random_cores(&topo, 2, &mut rng),
        };
        let dense = truth.materialize(None).unwrap();
        let oracle = {
            let dense = dense.clone();
            Oracle::from_index_fn(move |ix| dense[ndarray::IxDyn(ix)], vec![4; 4], 100_000)
                .unwrap()
        };
        let config = SweepConfig::for_approximation(2);
        let (model, _) = ht_cross(&topo, &oracle, &config).unwrap();
        let rebuilt = model.materialize(None).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in dense.iter().zip(rebuilt.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-10, "max abs deviation {worst}");
    }

    #[test]
    fn opt_finds_the_exact_grid_minimum_of_sphere() {
        let d = 16;
        let n = 8;
        let topo = topo_for(d, n);
        let oracle = Oracle::for_benchmark("sphere", d, n, 10_000).unwrap();
        let config = SweepConfig::for_direction(Direction::Min, 0);
        let report = ht_opt(&topo, &oracle, &config, Direction::Min).unwrap();
        let axis = crate::bench::chebyshev_grid(n, -5.12, 5.12).unwrap();
        let per_axis = axis.iter().map(|x| x * x).fold(f64::INFINITY, f64::min);
        let target = per_axis * d as f64;
        assert!(
            (report.best_value - target).abs() <= 1e-9,
            "found {} expected {target}",
            report.best_value
        );
        assert!(report.total_evaluations <= 10_000);
    }

    #[test]
    fn maximization_mirrors_minimization_of_the_negated_function() {
        let d = 8;
        let n = 6;
        let base = |ix: &[usize]| {
            ix.iter()
                .enumerate()
                .map(|(k, &i)| ((i + k) as f64 * 0.37).sin() + (i as f64) * 0.05)
                .sum::<f64>()
        };
        let topo = topo_for(d, n);
        let o_min = Oracle::from_index_fn(base, vec![n; d], 3_000).unwrap();
        let r_min = ht_opt(
            &topo,
            &o_min,
            &SweepConfig::for_direction(Direction::Min, 4),
            Direction::Min,
        )
        .unwrap();
        let o_max =
            Oracle::from_index_fn(move |ix| -base(ix), vec![n; d], 3_000).unwrap();
        let r_max = ht_opt(
            &topo,
            &o_max,
            &SweepConfig::for_direction(Direction::Max, 4),
            Direction::Max,
        )
        .unwrap();
        assert_eq!(r_min.best_index, r_max.best_index);
        assert_eq!(r_min.best_value, -r_max.best_value);
    }

    #[test]
    fn budget_is_never_exceeded_in_strict_runs() {
        for seed in 0..4 {
            let topo = topo_for(8, 8);
            let oracle = Oracle::for_benchmark("rastrigin", 8, 8, 1_500).unwrap();
            let config = SweepConfig::for_approximation(seed);
            let (_, report) = ht_cross(&topo, &oracle, &config).unwrap();
            assert!(
                report.total_evaluations <= 1_500,
                "seed {seed} spent {}",
                report.total_evaluations
            );
        }
    }

    #[test]
    fn transform_selected_rows_invariant_under_affine_rescaling() {
        use crate::linalg::maxvol_rect;
        use ndarray::Array2;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..100 {
            let rows = 6 + (trial % 7);
            let cols = 2 + (trial % 3);
            let raw = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-4.0..4.0));
            let a = 0.25 + rng.gen_range(0.0..5.0);
            let b = rng.gen_range(-10.0..10.0);
            let pick = |m: &Array2<f64>| {
                let mut t = m.clone();
                TransformKind::ExpMin.apply(&mut t);
                let qr = crate::linalg::qr_pivoted(&t);
                let k = qr.diag_magnitudes().len();
                let q = qr.q.slice(ndarray::s![.., ..k]).to_owned();
                let mut sel = maxvol_rect(&q, 1, 1.0).unwrap();
                sel.sort_unstable();
                sel
            };
            let scaled = raw.mapv(|x| a * x + b);
            assert_eq!(pick(&raw), pick(&scaled), "trial {trial}");
        }
    }
}
