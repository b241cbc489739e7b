//! Dense linear algebra kernels: Householder QR (plain and column-pivoted),
//! matrix volume, and maximum-volume row selection.
//!
//! All matrices here are small (a few dozen rows, single-digit columns), so
//! everything is implemented directly on `ndarray::Array2<f64>` with no
//! external backend. Every routine is deterministic.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix with {rows} rows and {cols} columns is not tall")]
    NotTall { rows: usize, cols: usize },
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),
}

/// Column-pivoted QR factorization `A P = Q R`.
///
/// `q` has orthonormal columns, `r` is upper triangular with diagonal
/// magnitudes non-increasing, and `perm[j]` is the original column placed at
/// position `j`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    pub q: Array2<f64>,
    pub r: Array2<f64>,
    pub perm: Vec<usize>,
}

impl PivotedQr {
    /// Magnitudes of the diagonal of `R`.
    pub fn diag_magnitudes(&self) -> Vec<f64> {
        let k = self.r.nrows().min(self.r.ncols());
        (0..k).map(|i| self.r[[i, i]].abs()).collect()
    }
}

fn householder_vector(col: &[f64]) -> (Vec<f64>, f64) {
    // Returns (v, beta) with (I - beta v v^T) x = ∓ ||x|| e1.
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (col.to_vec(), 0.0);
    }
    let mut v = col.to_vec();
    let alpha = if col[0] >= 0.0 { norm } else { -norm };
    v[0] += alpha;
    let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
    if vnorm2 == 0.0 {
        return (v, 0.0);
    }
    (v, 2.0 / vnorm2)
}

fn apply_householder_left(a: &mut Array2<f64>, v: &[f64], beta: f64, from_row: usize) {
    if beta == 0.0 {
        return;
    }
    let (m, n) = a.dim();
    for j in 0..n {
        let mut dot = 0.0;
        for i in from_row..m {
            dot += v[i - from_row] * a[[i, j]];
        }
        let s = beta * dot;
        for i in from_row..m {
            a[[i, j]] -= s * v[i - from_row];
        }
    }
}

fn qr_core(a: &Array2<f64>, pivot: bool) -> PivotedQr {
    let (m, n) = a.dim();
    let k = m.min(n);
    let mut r = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    // Accumulate Q by applying the same reflections to an identity block.
    let mut q = Array2::<f64>::eye(m);
    let mut col_norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a[[i, j]] * a[[i, j]]).sum())
        .collect();

    for step in 0..k {
        if pivot {
            // Recompute residual norms; cheap at these sizes and avoids the
            // cancellation pitfalls of downdating.
            for j in step..n {
                col_norms[j] = (step..m).map(|i| r[[i, j]] * r[[i, j]]).sum();
            }
            let mut best = step;
            for j in step + 1..n {
                if col_norms[j] > col_norms[best] {
                    best = j;
                }
            }
            if best != step {
                for i in 0..m {
                    r.swap([i, step], [i, best]);
                }
                perm.swap(step, best);
                col_norms.swap(step, best);
            }
        }
        let col: Vec<f64> = (step..m).map(|i| r[[i, step]]).collect();
        let (v, beta) = householder_vector(&col);
        apply_householder_left(&mut r, &v, beta, step);
        apply_householder_left(&mut q, &v, beta, step);
        // Zero the subdiagonal explicitly to remove rounding noise.
        for i in step + 1..m {
            r[[i, step]] = 0.0;
        }
    }

    // q currently holds H_k ... H_1 (applied to I); Q = (H_1 ... H_k)^T rows.
    let q = q.t().to_owned();
    let q_thin = q.slice(ndarray::s![.., ..k]).to_owned();
    let r_thin = r.slice(ndarray::s![..k, ..]).to_owned();
    PivotedQr {
        q: q_thin,
        r: r_thin,
        perm,
    }
}

/// QR with column pivoting; diagonal magnitudes of `R` are non-increasing.
pub fn qr_pivoted(a: &Array2<f64>) -> PivotedQr {
    qr_core(a, true)
}

/// Plain (unpivoted) thin QR; `perm` is the identity.
pub fn qr_unpivoted(a: &Array2<f64>) -> PivotedQr {
    qr_core(a, false)
}

/// Volume of a tall matrix: `sqrt(det(A^T A))`, computed as the product of
/// the `R` diagonal magnitudes of a pivoted QR.
pub fn volume(a: &Array2<f64>) -> Result<f64, LinalgError> {
    let (rows, cols) = a.dim();
    if rows < cols {
        return Err(LinalgError::NotTall { rows, cols });
    }
    let qr = qr_pivoted(a);
    Ok(qr.diag_magnitudes().iter().product())
}

/// Solves the square system `M x = b` by LU with partial pivoting.
/// Returns `None` when a pivot is exactly zero.
pub fn lu_solve(m: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    debug_assert_eq!(n, b.len());
    let mut a = m.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[[row, col]].abs() > a[[piv, col]].abs() {
                piv = row;
            }
        }
        if a[[piv, col]] == 0.0 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap([col, j], [piv, j]);
            }
            x.swap(col, piv);
        }
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            if f != 0.0 {
                for j in col..n {
                    a[[row, j]] -= f * a[[col, j]];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for j in col + 1..n {
            s -= a[[col, j]] * x[j];
        }
        x[col] = s / a[[col, col]];
    }
    Some(x)
}

/// Least-squares solve of `M X = B` through pivoted QR with rank truncation
/// at `1e-12` relative to the leading diagonal. Falls back gracefully on
/// rank-deficient systems; exact for well-conditioned square ones.
pub fn solve_matrix(m: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = m.dim();
    debug_assert_eq!(rows, b.nrows());
    let qr = qr_pivoted(m);
    let k = rows.min(cols);
    let d0 = qr.r[[0, 0]].abs();
    let mut rank = 0;
    for i in 0..k {
        if d0 > 0.0 && qr.r[[i, i]].abs() >= 1e-12 * d0 {
            rank = i + 1;
        }
    }
    let nrhs = b.ncols();
    let mut x = Array2::<f64>::zeros((cols, nrhs));
    if rank == 0 {
        return x;
    }
    // y = Q^T b, then back-substitute the leading rank x rank block.
    for rhs in 0..nrhs {
        let mut y = vec![0.0; rank];
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for r in 0..rows {
                s += qr.q[[r, i]] * b[[r, rhs]];
            }
            *yi = s;
        }
        let mut z = vec![0.0; rank];
        for i in (0..rank).rev() {
            let mut s = y[i];
            for j in i + 1..rank {
                s -= qr.r[[i, j]] * z[j];
            }
            z[i] = s / qr.r[[i, i]];
        }
        for (j, &zj) in z.iter().enumerate() {
            x[[qr.perm[j], rhs]] = zj;
        }
    }
    x
}

/// Rows selected by a maxvol search, square rows first, extras appended in
/// the order they were accepted.
pub type RowSelection = Vec<usize>;

/// Square maxvol: selects `r` rows of the tall matrix `q` (n >= r, full
/// column rank) so that every entry of `q * inv(q[rows, :])` has magnitude
/// at most `tol`. Seeded from the pivoted-QR row ordering of `q^T`; one row
/// swap per iteration, at most `max_iters`.
pub fn maxvol_square(
    q: &Array2<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<RowSelection, LinalgError> {
    let (n, r) = q.dim();
    if n < r {
        return Err(LinalgError::NotTall { rows: n, cols: r });
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    if n == r {
        return Ok((0..n).collect());
    }

    // Seed: row selection from the column pivots of q^T.
    let qt = q.t().to_owned();
    let seed_qr = qr_pivoted(&qt);
    let mut rows: Vec<usize> = seed_qr.perm[..r].to_vec();

    for _ in 0..max_iters {
        let sub = select_rows(q, &rows);
        let coeff = match invert_against(&sub, q) {
            Some(c) => c,
            None => {
                return Err(LinalgError::NumericalDegeneracy(
                    "singular submatrix in maxvol iteration".into(),
                ))
            }
        };
        let mut best = (0usize, 0usize, 0.0f64);
        for i in 0..n {
            for j in 0..r {
                let v = coeff[[i, j]].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 <= tol {
            break;
        }
        rows[best.1] = best.0;
    }
    Ok(rows)
}

fn select_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let cols = a.ncols();
    let mut out = Array2::zeros((rows.len(), cols));
    for (k, &i) in rows.iter().enumerate() {
        for j in 0..cols {
            out[[k, j]] = a[[i, j]];
        }
    }
    out
}

/// Computes `q * inv(sub)` column block by column block via LU solves of
/// `sub^T x = q_row`. Returns `None` when `sub` is singular.
fn invert_against(sub: &Array2<f64>, q: &Array2<f64>) -> Option<Array2<f64>> {
    let r = sub.nrows();
    let n = q.nrows();
    let sub_t = sub.t().to_owned();
    let mut out = Array2::zeros((n, r));
    for i in 0..n {
        let rhs = Array1::from_iter((0..r).map(|j| q[[i, j]]));
        let x = lu_solve(&sub_t, &rhs)?;
        for j in 0..r {
            out[[i, j]] = x[j];
        }
    }
    Some(out)
}

/// Rectangular maxvol: starts from the square selection and greedily adds up
/// to `delta_r` rows while the squared norm of a candidate's coefficient row
/// (equivalently the factor by which the squared volume would grow, minus
/// one) exceeds `tol^2`.
pub fn maxvol_rect(
    q: &Array2<f64>,
    delta_r: usize,
    tol: f64,
) -> Result<RowSelection, LinalgError> {
    maxvol_rect_min(q, delta_r, tol, 0)
}

/// Like [`maxvol_rect`] but guarantees at least `min_rows` selected rows
/// (capped by `delta_r` and the row count), adding best-gain rows even when
/// they fail the gain criterion. Used to regrow collapsed selections.
pub(crate) fn maxvol_rect_min(
    q: &Array2<f64>,
    delta_r: usize,
    tol: f64,
    min_rows: usize,
) -> Result<RowSelection, LinalgError> {
    let (n, r) = q.dim();
    let mut rows = maxvol_square(q, 1.01, 100)?;
    if delta_r == 0 || n == r {
        return Ok(rows);
    }
    let floor = min_rows.min(n).min(r + delta_r);
    for _ in 0..delta_r {
        if rows.len() == n {
            break;
        }
        // gram = (Q_S^T Q_S) for the current selection.
        let sub = select_rows(q, &rows);
        let mut gram = Array2::zeros((r, r));
        for a in 0..r {
            for b in 0..r {
                let mut s = 0.0;
                for k in 0..sub.nrows() {
                    s += sub[[k, a]] * sub[[k, b]];
                }
                gram[[a, b]] = s;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if rows.contains(&i) {
                continue;
            }
            let rhs = Array1::from_iter((0..r).map(|j| q[[i, j]]));
            let x = match lu_solve(&gram, &rhs) {
                Some(x) => x,
                None => {
                    return Err(LinalgError::NumericalDegeneracy(
                        "singular Gram matrix in rectangular maxvol".into(),
                    ))
                }
            };
            let gain: f64 = (0..r).map(|j| rhs[j] * x[j]).sum();
            if best.map_or(true, |(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        match best {
            Some((i, gain)) if gain > tol * tol || rows.len() < floor => rows.push(i),
            _ => break,
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.clone());
            let mut i = k;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] != i + n - k {
                    break;
                }
                if i == 0 {
                    return out;
                }
            }
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    #[test]
    fn volume_of_identity_is_one() {
        let a = Array2::<f64>::eye(2);
        assert!((volume(&a).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn volume_matches_hand_computed_gram_determinant() {
        // A^T A = [[2, 1], [1, 2]], det = 3.
        let a = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert!((volume(&a).unwrap() - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn volume_zero_for_zero_column() {
        let a = array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert!(volume(&a).unwrap().abs() < 1e-14);
    }

    #[test]
    fn volume_rejects_wide_matrix() {
        let a = array![[1.0, 2.0, 3.0]];
        assert!(matches!(volume(&a), Err(LinalgError::NotTall { .. })));
    }

    #[test]
    fn qr_pivoted_identity() {
        let a = Array2::<f64>::eye(3);
        let qr = qr_pivoted(&a);
        for i in 0..3 {
            assert!((qr.q[[i, i]].abs() - 1.0).abs() < 1e-14);
            assert!((qr.r[[i, i]].abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn qr_pivoted_detects_rank_one() {
        let a = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let qr = qr_pivoted(&a);
        let d = qr.diag_magnitudes();
        assert!(d[1] <= 1e-12 * d[0]);
    }

    #[test]
    fn qr_pivoted_reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 6, 3);
        let qr = qr_pivoted(&a);
        // A[:, perm[j]] == (Q R)[:, j]
        let prod = qr.q.dot(&qr.r);
        let mut err: f64 = 0.0;
        let mut norm: f64 = 0.0;
        for j in 0..3 {
            for i in 0..6 {
                err += (a[[i, qr.perm[j]]] - prod[[i, j]]).powi(2);
                norm += a[[i, qr.perm[j]]].powi(2);
            }
        }
        assert!(err.sqrt() <= 1e-12 * norm.sqrt());
        // Q^T Q == I
        let qtq = qr.q.t().dot(&qr.q);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qr_pivoted_diagonal_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.gen_range(2..9);
            let cols = rng.gen_range(1..=rows);
            let a = random_matrix(&mut rng, rows, cols);
            let d = qr_pivoted(&a).diag_magnitudes();
            for w in d.windows(2) {
                assert!(w[0] >= w[1] - 1e-13);
            }
        }
    }

    #[test]
    fn maxvol_square_picks_identity_block() {
        let mut q = Array2::zeros((5, 3));
        for i in 0..3 {
            q[[i, i]] = 1.0;
        }
        let mut rows = maxvol_square(&q, 1.01, 100).unwrap();
        rows.sort_unstable();
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn maxvol_square_matches_brute_force_on_three_rows() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let mut rows = maxvol_square(&a, 1.01, 100).unwrap();
        rows.sort_unstable();
        assert_eq!(rows, vec![0, 1]);
        // Brute force over all pairs confirms {0, 1} is the unique maximum.
        let mut best = (vec![0, 1], 0.0);
        for pair in combinations(3, 2) {
            let v = volume(&select_rows(&a, &pair)).unwrap();
            if v > best.1 {
                best = (pair, v);
            }
        }
        assert_eq!(best.0, vec![0, 1]);
        assert!((best.1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxvol_square_is_swap_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_matrix(&mut rng, 20, 4);
        let rows = maxvol_square(&q, 1.0, 500).unwrap();
        let vol = volume(&select_rows(&q, &rows)).unwrap();
        for slot in 0..rows.len() {
            for cand in 0..20 {
                if rows.contains(&cand) {
                    continue;
                }
                let mut alt = rows.clone();
                alt[slot] = cand;
                let v = volume(&select_rows(&q, &alt)).unwrap();
                assert!(v <= vol * (1.0 + 1e-9), "swap improved volume");
            }
        }
    }

    #[test]
    fn maxvol_square_local_and_near_global_over_random_trials() {
        // 100 seeded 8x3 matrices: swap-local maximality and at least a tenth
        // of the brute-force global maximum over all 56 row triples.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let a = random_matrix(&mut rng, 8, 3);
            let rows = maxvol_square(&a, 1.01, 200).unwrap();
            let vol = volume(&select_rows(&a, &rows)).unwrap();
            let mut global: f64 = 0.0;
            for c in combinations(8, 3) {
                global = global.max(volume(&select_rows(&a, &c)).unwrap());
            }
            assert!(
                vol >= 0.1 * global,
                "trial {trial}: selected volume {vol} below 0.1 of global {global}"
            );
            for slot in 0..rows.len() {
                for cand in 0..8 {
                    if rows.contains(&cand) {
                        continue;
                    }
                    let mut alt = rows.clone();
                    alt[slot] = cand;
                    let v = volume(&select_rows(&a, &alt)).unwrap();
                    // tol = 1.01 allows one percent slack per swap.
                    assert!(v <= vol * 1.01 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxvol_rect_zero_surplus_equals_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_matrix(&mut rng, 12, 3);
        let square = maxvol_square(&q, 1.01, 100).unwrap();
        let rect = maxvol_rect(&q, 0, 1.0).unwrap();
        assert_eq!(square, rect);
    }

    #[test]
    fn maxvol_rect_adds_volume_raising_row() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let mut rows = maxvol_rect(&a, 1, 1.0).unwrap();
        rows.sort_unstable();
        assert_eq!(rows, vec![0, 1, 2]);
        let v = volume(&select_rows(&a, &rows)).unwrap();
        assert!((v - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn maxvol_rect_square_input_returns_all_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_matrix(&mut rng, 4, 4);
        let rows = maxvol_rect(&q, 3, 1.0).unwrap();
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn maxvol_rect_never_below_square_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let a = random_matrix(&mut rng, 8, 3);
            let sq = maxvol_square(&a, 1.01, 200).unwrap();
            let rc = maxvol_rect(&a, 1, 1.0).unwrap();
            let vs = volume(&select_rows(&a, &sq)).unwrap();
            let vr = volume(&select_rows(&a, &rc)).unwrap();
            assert!(vr >= vs - 1e-12);
        }
    }

    #[test]
    fn lu_solve_recovers_known_solution() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        let x_true = array![0.5, -2.0];
        let b = m.dot(&x_true);
        let x = lu_solve(&m, &b).unwrap();
        for i in 0..2 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_matrix_inverts_well_conditioned_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_matrix(&mut rng, 4, 4) + Array2::<f64>::eye(4) * 3.0;
        let b = random_matrix(&mut rng, 4, 2);
        let x = solve_matrix(&m, &b);
        let back = m.dot(&x);
        for i in 0..4 {
            for j in 0..2 {
                assert!((back[[i, j]] - b[[i, j]]).abs() < 1e-10);
            }
        }
    }
}
