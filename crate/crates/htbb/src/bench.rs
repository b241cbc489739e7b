//! Benchmark functions, Chebyshev grid discretization, and the budgeted,
//! caching oracle that exposes a discretized function as a tensor of values.

use crate::state::EvalCache;
use crate::sweep::{RunReport, TracePoint};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("a Chebyshev grid needs at least 2 nodes, got {0}")]
    InvalidGrid(usize),
    #[error("budget must be positive")]
    InvalidBudget,
    #[error("evaluation budget exhausted")]
    BudgetExhausted,
    #[error("mode size {0} does not fit the cache key type")]
    ModeSizeTooLarge(usize),
}

/// The fourteen benchmark functions, uniform bounds across modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Alpine,
    Chung,
    Dixon,
    Griewank,
    Pathological,
    Pinter,
    Qing,
    Rastrigin,
    Schaffer,
    Schwefel,
    Sphere,
    Squares,
    Trigonometric,
    Wavy,
}

pub const ALL_BENCHMARKS: [Benchmark; 14] = [
    Benchmark::Alpine,
    Benchmark::Chung,
    Benchmark::Dixon,
    Benchmark::Griewank,
    Benchmark::Pathological,
    Benchmark::Pinter,
    Benchmark::Qing,
    Benchmark::Rastrigin,
    Benchmark::Schaffer,
    Benchmark::Schwefel,
    Benchmark::Sphere,
    Benchmark::Squares,
    Benchmark::Trigonometric,
    Benchmark::Wavy,
];

impl Benchmark {
    pub fn from_name(name: &str) -> Result<Self, BenchError> {
        Ok(match name {
            "alpine" => Benchmark::Alpine,
            "chung" => Benchmark::Chung,
            "dixon" => Benchmark::Dixon,
            "griewank" => Benchmark::Griewank,
            "pathological" => Benchmark::Pathological,
            "pinter" => Benchmark::Pinter,
            "qing" => Benchmark::Qing,
            "rastrigin" => Benchmark::Rastrigin,
            "schaffer" => Benchmark::Schaffer,
            "schwefel" => Benchmark::Schwefel,
            "sphere" => Benchmark::Sphere,
            "squares" => Benchmark::Squares,
            "trigonometric" => Benchmark::Trigonometric,
            "wavy" => Benchmark::Wavy,
            other => return Err(BenchError::UnknownBenchmark(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::Alpine => "alpine",
            Benchmark::Chung => "chung",
            Benchmark::Dixon => "dixon",
            Benchmark::Griewank => "griewank",
            Benchmark::Pathological => "pathological",
            Benchmark::Pinter => "pinter",
            Benchmark::Qing => "qing",
            Benchmark::Rastrigin => "rastrigin",
            Benchmark::Schaffer => "schaffer",
            Benchmark::Schwefel => "schwefel",
            Benchmark::Sphere => "sphere",
            Benchmark::Squares => "squares",
            Benchmark::Trigonometric => "trigonometric",
            Benchmark::Wavy => "wavy",
        }
    }

    /// Box bounds, identical in every mode.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Benchmark::Alpine | Benchmark::Chung | Benchmark::Dixon | Benchmark::Pinter => {
                (-10.0, 10.0)
            }
            Benchmark::Squares => (-10.0, 10.0),
            Benchmark::Griewank | Benchmark::Pathological | Benchmark::Schaffer => (-100.0, 100.0),
            Benchmark::Qing | Benchmark::Schwefel => (0.0, 500.0),
            Benchmark::Rastrigin | Benchmark::Sphere => (-5.12, 5.12),
            Benchmark::Trigonometric => (0.0, PI),
            Benchmark::Wavy => (-PI, PI),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = x.len();
        match self {
            Benchmark::Alpine => x.iter().map(|&t| (t * t.sin() + 0.1 * t).abs()).sum(),
            Benchmark::Chung => {
                let s: f64 = x.iter().map(|&t| t * t).sum();
                s * s
            }
            Benchmark::Dixon => {
                let mut s = (x[0] - 1.0).powi(2);
                for i in 1..d {
                    s += (i + 1) as f64 * (2.0 * x[i] * x[i] - x[i - 1]).powi(2);
                }
                s
            }
            Benchmark::Griewank => {
                let s: f64 = x.iter().map(|&t| t * t / 4000.0).sum();
                let p: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (t / ((i + 1) as f64).sqrt()).cos())
                    .product();
                s - p + 1.0
            }
            Benchmark::Pathological => {
                let mut s = 0.0;
                for i in 0..d - 1 {
                    let (a, b) = (x[i], x[i + 1]);
                    let num = (100.0 * a * a + b * b).sqrt().sin().powi(2) - 0.5;
                    let den = 1.0 + 0.001 * (a * a - 2.0 * a * b + b * b).powi(2);
                    s += 0.5 + num / den;
                }
                s
            }
            Benchmark::Pinter => {
                // cyclic neighbors: x[-1] = x[d-1], x[d] = x[0]
                let mut s = 0.0;
                for i in 0..d {
                    let prev = x[(i + d - 1) % d];
                    let next = x[(i + 1) % d];
                    let xi = x[i];
                    let w = (i + 1) as f64;
                    let a = prev * xi.sin() + next.sin();
                    let b = prev * prev - 2.0 * xi + 3.0 * next - xi.cos() + 1.0;
                    s += w * xi * xi
                        + 20.0 * w * a.sin().powi(2)
                        + w * (1.0 + w * b * b).log10();
                }
                s
            }
            Benchmark::Qing => x
                .iter()
                .enumerate()
                .map(|(i, &t)| (t * t - (i + 1) as f64).powi(2))
                .sum(),
            Benchmark::Rastrigin => {
                let a = 10.0;
                a * d as f64
                    + x.iter()
                        .map(|&t| t * t - a * (2.0 * PI * t).cos())
                        .sum::<f64>()
            }
            Benchmark::Schaffer => {
                let mut s = 0.0;
                for i in 0..d - 1 {
                    let r2 = x[i] * x[i] + x[i + 1] * x[i + 1];
                    let num = r2.sqrt().sin().powi(2) - 0.5;
                    let den = (1.0 + 0.001 * r2).powi(2);
                    s += 0.5 + num / den;
                }
                s
            }
            Benchmark::Schwefel => {
                -x.iter().map(|&t| t * t.abs().sqrt().sin()).sum::<f64>() / d as f64
            }
            Benchmark::Sphere => x.iter().map(|&t| t * t).sum(),
            Benchmark::Squares => x
                .iter()
                .enumerate()
                .map(|(i, &t)| (i + 1) as f64 * t * t)
                .sum(),
            Benchmark::Trigonometric => {
                let cos_sum: f64 = x.iter().map(|&t| t.cos()).sum();
                let mut s = 0.0;
                for i in 0..d {
                    let w = (i + 1) as f64;
                    let term = d as f64 - cos_sum + w * (1.0 - x[i].cos() - x[i].sin());
                    s += term * term;
                }
                s
            }
            Benchmark::Wavy => {
                let k = 10.0;
                1.0 - x
                    .iter()
                    .map(|&t| (k * t).cos() * (-t * t / 2.0).exp())
                    .sum::<f64>()
                    / d as f64
            }
        }
    }

    /// A point with a known value, handy in tests. Most functions vanish at
    /// the origin; Qing vanishes at `x_i = sqrt(i+1)`.
    pub fn trivial_point(&self, d: usize) -> Option<(Vec<f64>, f64)> {
        match self {
            Benchmark::Qing => Some((
                (0..d).map(|i| ((i + 1) as f64).sqrt()).collect(),
                0.0,
            )),
            Benchmark::Dixon | Benchmark::Pinter => None,
            _ => Some((vec![0.0; d], 0.0)),
        }
    }
}

/// Chebyshev extrema nodes on `[a, b]`, endpoints included, descending:
/// `x_k = (a+b)/2 + (b-a)/2 * cos(pi k / (n-1))` for `k = 0..n`.
pub fn chebyshev_grid(n: usize, a: f64, b: f64) -> Result<Vec<f64>, BenchError> {
    if n < 2 {
        return Err(BenchError::InvalidGrid(n));
    }
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    Ok((0..n)
        .map(|k| mid + half * (PI * k as f64 / (n - 1) as f64).cos())
        .collect())
}

/// Per-mode grids mapping integer indices to coordinates.
#[derive(Debug, Clone)]
pub struct Grid {
    pub nodes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn uniform_chebyshev(d: usize, n: usize, a: f64, b: f64) -> Result<Self, BenchError> {
        let axis = chebyshev_grid(n, a, b)?;
        Ok(Grid {
            nodes: vec![axis; d],
        })
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.nodes.iter().map(|axis| axis.len()).collect()
    }

    pub fn point(&self, index: &[usize], out: &mut Vec<f64>) {
        out.clear();
        out.extend(index.iter().zip(&self.nodes).map(|(&i, axis)| axis[i]));
    }
}

struct Tracker {
    count: u64,
    best_min: Option<(Vec<usize>, f64)>,
    best_max: Option<(Vec<usize>, f64)>,
    trace_min: Vec<TracePoint>,
    trace_max: Vec<TracePoint>,
    budget: Option<u64>,
}

/// Budget-limited, caching view of a discretized black-box function.
///
/// Distinct indices count against the budget once; repeats are cache hits.
/// The running minimum and maximum over all raw evaluations are tracked and
/// sampled into a trace every `TRACE_EVERY` evaluations.
pub struct Oracle {
    f: Box<dyn Fn(&[usize]) -> f64 + Send + Sync>,
    sizes: Vec<usize>,
    cache: EvalCache,
    tracker: Mutex<Tracker>,
}

pub const TRACE_EVERY: u64 = 100;

impl Oracle {
    /// Wraps an index-space function with a budget over distinct indices.
    pub fn from_index_fn(
        f: impl Fn(&[usize]) -> f64 + Send + Sync + 'static,
        sizes: Vec<usize>,
        budget: u64,
    ) -> Result<Self, BenchError> {
        if budget == 0 {
            return Err(BenchError::InvalidBudget);
        }
        for &s in &sizes {
            if s > u16::MAX as usize {
                return Err(BenchError::ModeSizeTooLarge(s));
            }
        }
        Ok(Oracle {
            f: Box::new(f),
            sizes,
            cache: EvalCache::new(),
            tracker: Mutex::new(Tracker {
                count: 0,
                best_min: None,
                best_max: None,
                trace_min: Vec::new(),
                trace_max: Vec::new(),
                budget: Some(budget),
            }),
        })
    }

    /// A named benchmark on a Chebyshev grid with `n` nodes per mode.
    pub fn for_benchmark(
        name: &str,
        d: usize,
        n: usize,
        budget: u64,
    ) -> Result<Self, BenchError> {
        let bench = Benchmark::from_name(name)?;
        let (a, b) = bench.bounds();
        let grid = Grid::uniform_chebyshev(d, n, a, b)?;
        let sizes = grid.sizes();
        let f = move |index: &[usize]| {
            let mut x = Vec::with_capacity(index.len());
            grid.point(index, &mut x);
            bench.eval(&x)
        };
        Oracle::from_index_fn(f, sizes, budget)
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    pub fn mode_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Total number of grid points, saturating.
    pub fn domain_size(&self) -> u128 {
        self.sizes
            .iter()
            .map(|&n| n as u128)
            .fold(1u128, |acc, n| acc.saturating_mul(n))
    }

    /// Number of distinct evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.tracker.lock().unwrap().count
    }

    pub fn remaining_budget(&self) -> Option<u64> {
        let t = self.tracker.lock().unwrap();
        t.budget.map(|b| b.saturating_sub(t.count))
    }

    /// Removes the budget cap; evaluations continue to be counted.
    pub fn lift_budget(&self) {
        self.tracker.lock().unwrap().budget = None;
    }

    pub fn best_min(&self) -> Option<(Vec<usize>, f64)> {
        self.tracker.lock().unwrap().best_min.clone()
    }

    pub fn best_max(&self) -> Option<(Vec<usize>, f64)> {
        self.tracker.lock().unwrap().best_max.clone()
    }

    pub fn trace_min(&self) -> Vec<TracePoint> {
        self.tracker.lock().unwrap().trace_min.clone()
    }

    pub fn trace_max(&self) -> Vec<TracePoint> {
        self.tracker.lock().unwrap().trace_max.clone()
    }

    pub fn cache(&self) -> &EvalCache {
        &self.cache
    }

    /// Whether `index` could be answered from cache without spending budget.
    pub fn is_cached(&self, index: &[usize]) -> bool {
        self.cache.get(index).is_some()
    }

    /// Evaluates one entry. Cached indices are free; a new index past the
    /// budget fails with `BudgetExhausted` and the cache is left intact.
    pub fn eval(&self, index: &[usize]) -> Result<f64, BenchError> {
        debug_assert_eq!(index.len(), self.sizes.len());
        if let Some(v) = self.cache.get(index) {
            return Ok(v);
        }
        let mut t = self.tracker.lock().unwrap();
        // Re-check under the lock: another thread may have filled it.
        if let Some(v) = self.cache.get(index) {
            return Ok(v);
        }
        if let Some(b) = t.budget {
            if t.count >= b {
                return Err(BenchError::BudgetExhausted);
            }
        }
        let v = (self.f)(index);
        self.cache.insert(index, v);
        t.count += 1;
        let better_min = t.best_min.as_ref().map_or(true, |(_, bv)| v < *bv);
        if better_min {
            t.best_min = Some((index.to_vec(), v));
        }
        let better_max = t.best_max.as_ref().map_or(true, |(_, bv)| v > *bv);
        if better_max {
            t.best_max = Some((index.to_vec(), v));
        }
        if t.count % TRACE_EVERY == 0 {
            let min_val = t.best_min.as_ref().map(|(_, v)| *v).unwrap();
            let max_val = t.best_max.as_ref().map(|(_, v)| *v).unwrap();
            let count = t.count;
            t.trace_min.push(TracePoint {
                evals: count,
                value: min_val,
            });
            t.trace_max.push(TracePoint {
                evals: count,
                value: max_val,
            });
        }
        Ok(v)
    }
}

/// Outcome of a relative L2 error measurement on random test indices.
#[derive(Debug, Clone, Copy)]
pub struct ErrorReport {
    pub value: f64,
    /// Set when the reference norm was zero and the absolute norm of the
    /// prediction was returned instead.
    pub absolute_fallback: bool,
}

/// Samples `n_test` uniform random multi-indices and returns
/// `||y_pred - y_true||_2 / ||y_true||_2`. Test evaluations bypass any
/// budget; they never touch an [`Oracle`].
pub fn relative_l2_error(
    predict: impl Fn(&[usize]) -> f64,
    truth: impl Fn(&[usize]) -> f64,
    sizes: &[usize],
    n_test: usize,
    seed: u64,
) -> ErrorReport {
    assert!(n_test >= 1, "need at least one test point");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let mut pred2 = 0.0;
    let mut index = vec![0usize; sizes.len()];
    for _ in 0..n_test {
        for (slot, &n) in index.iter_mut().zip(sizes) {
            *slot = rng.gen_range(0..n);
        }
        let yp = predict(&index);
        let yt = truth(&index);
        diff2 += (yp - yt) * (yp - yt);
        ref2 += yt * yt;
        pred2 += yp * yp;
    }
    if ref2 == 0.0 {
        ErrorReport {
            value: pred2.sqrt(),
            absolute_fallback: true,
        }
    } else {
        ErrorReport {
            value: (diff2 / ref2).sqrt(),
            absolute_fallback: false,
        }
    }
}

/// Uniform random search over distinct indices, spending the oracle's whole
/// remaining budget. The sanity baseline for the optimizer.
pub fn random_search(oracle: &Oracle, seed: u64) -> RunReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = oracle.mode_sizes().to_vec();
    let mut index = vec![0usize; sizes.len()];
    loop {
        for (slot, &n) in index.iter_mut().zip(&sizes) {
            *slot = rng.gen_range(0..n);
        }
        if oracle.is_cached(&index) {
            // resample; duplicates carry no information here
            continue;
        }
        if oracle.eval(&index).is_err() {
            break;
        }
        if oracle.domain_size() <= oracle.evaluations() as u128 {
            break;
        }
    }
    let (best_index, best_value) = oracle.best_min().unwrap_or((Vec::new(), f64::NAN));
    RunReport {
        mode: "random-search".into(),
        total_evaluations: oracle.evaluations(),
        best_index,
        best_value,
        trace: oracle.trace_min(),
    }
}
