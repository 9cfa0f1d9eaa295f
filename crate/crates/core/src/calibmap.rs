//! Calibration map between two race distributions.
//!
//! Finds the column-stochastic matrix `A` closest to the identity in
//! Frobenius norm with `A u_src = u_dst`. That is the Euclidean projection
//! of `I` onto the intersection of an affine set (column sums one, the
//! distribution constraint) and the nonnegative orthant, computed here with
//! Dykstra's alternating projections. Once the zero pattern has settled the
//! iterate is polished by solving the equality-constrained problem on the
//! free entries exactly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const MAX_ITERATIONS: usize = 100_000;
const KKT_TOL: f64 = 1e-8;
const CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("{what} is not a probability vector (sum {sum})")]
    NotADistribution { what: &'static str, sum: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMap {
    pub matrix: DMatrix<f64>,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    /// `‖A − I‖_F`.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl CalibrationMap {
    pub fn dim(&self) -> usize {
        self.source.len()
    }
}

fn check_distribution(what: &'static str, v: &[f64]) -> Result<(), CalibError> {
    let sum: f64 = v.iter().sum();
    if v.is_empty() || v.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(CalibError::NotADistribution { what, sum });
    }
    Ok(())
}

/// Row-major constraint system `M vec(A) = b`: first the `n` column sums,
/// then the `n` rows of `A u = v`. One row is redundant.
fn constraints(u: &[f64], v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = u.len();
    let mut m = DMatrix::zeros(2 * n, n * n);
    let mut b = DVector::zeros(2 * n);
    for j in 0..n {
        for i in 0..n {
            m[(j, i * n + j)] = 1.0;
        }
        b[j] = 1.0;
    }
    for i in 0..n {
        for j in 0..n {
            m[(n + i, i * n + j)] = u[j];
        }
        b[n + i] = v[i];
    }
    (m, b)
}

/// Projection onto `{A : 1ᵀA = 1ᵀ, A u = v}` in closed form.
fn project_affine(x: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let nf = n as f64;
    let col_sums = x.row_sum().transpose();
    let xu = x * u;
    let cu = col_sums.dot(u);
    let uu = u.dot(u);
    let ones = DVector::from_element(n, 1.0);
    let mu = (&ones - &col_sums) / nf;
    let lambda = (v - xu - &ones * ((1.0 - cu) / nf)) / uu;
    x + &ones * mu.transpose() + lambda * u.transpose()
}

fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    DVector::from_fn(n * n, |k, _| a[(k / n, k % n)])
}

/// Exact solution of the equality-constrained problem with the entries in
/// `fixed_zero` pinned at zero. Returns the matrix and the multipliers of
/// the pinned entries, which must be nonnegative at the optimum.
fn solve_on_free_set(u: &[f64], v: &[f64], fixed_zero: &[bool]) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let n = u.len();
    let (m, b) = constraints(u, v);
    let free: Vec<usize> = (0..n * n).filter(|&k| !fixed_zero[k]).collect();
    if free.is_empty() {
        return None;
    }
    let target = DVector::from_fn(n * n, |k, _| if k / n == k % n { 1.0 } else { 0.0 });
    let mf = m.select_columns(free.iter());
    let tf = DVector::from_iterator(free.len(), free.iter().map(|&k| target[k]));
    let gram = &mf * mf.transpose();
    let rhs = &b - &mf * &tf;
    let nu = gram.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let af = &tf + mf.transpose() * &nu;
    let mut a = DMatrix::zeros(n, n);
    for (idx, &k) in free.iter().enumerate() {
        a[(k / n, k % n)] = af[idx];
    }
    // Multipliers of the nonnegativity constraints on pinned entries:
    // z = A − I − Mᵀν evaluated there.
    let mt_nu = m.transpose() * &nu;
    let z = (0..n * n).filter(|&k| fixed_zero[k]).map(|k| -target[k] - mt_nu[k]).collect();
    Some((a, z))
}

/// First-order optimality residual of `a` for the calibration problem:
/// primal feasibility, stationarity on positive entries, and dual sign on
/// zero entries.
pub fn kkt_residual(a: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    let (m, b) = constraints(u, v);
    let x = vec_of(a);
    let primal = (&m * &x - &b).amax();
    let neg = x.iter().fold(0.0f64, |acc, &e| acc.max(-e));
    let target = DVector::from_fn(n * n, |k, _| if k / n == k % n { 1.0 } else { 0.0 });
    let grad = &x - &target;
    let free: Vec<usize> = (0..n * n).filter(|&k| x[k] > 1e-9).collect();
    let nu = if free.is_empty() {
        DVector::zeros(2 * n)
    } else {
        let mf = m.select_columns(free.iter());
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&k| grad[k]));
        match mf.transpose().svd(true, true).solve(&gf, 1e-12) {
            Ok(nu) => nu,
            Err(_) => return f64::INFINITY,
        }
    };
    let z = &grad - m.transpose() * nu;
    let mut dual = 0.0f64;
    for k in 0..n * n {
        if x[k] > 1e-9 {
            dual = dual.max(z[k].abs());
        } else {
            dual = dual.max(-z[k]);
        }
    }
    primal.max(neg).max(dual)
}

fn finish(a: DMatrix<f64>, u: &[f64], v: &[f64], iterations: usize) -> CalibrationMap {
    let n = u.len();
    let a = a.map(|e| if e < 0.0 && e >= -CLAMP { 0.0 } else { e });
    let objective = (&a - DMatrix::<f64>::identity(n, n)).norm();
    let kkt = kkt_residual(&a, u, v);
    CalibrationMap { matrix: a, source: u.to_vec(), target: v.to_vec(), objective, kkt_residual: kkt, iterations }
}

fn polished(u: &[f64], v: &[f64], x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = u.len();
    let fixed: Vec<bool> = (0..n * n).map(|k| x[(k / n, k % n)] == 0.0).collect();
    let (a, z) = solve_on_free_set(u, v, &fixed)?;
    let (m, b) = constraints(u, v);
    let primal = (&m * vec_of(&a) - &b).amax();
    let ok = a.iter().all(|&e| e >= -CLAMP) && z.iter().all(|&zk| zk >= -1e-10) && primal <= 1e-12;
    ok.then_some(a)
}

/// Solves for the calibration map taking `u_src` to `u_dst`. Both inputs
/// must be probability vectors of equal length.
pub fn solve_calibration_map(u_src: &[f64], u_dst: &[f64]) -> Result<CalibrationMap, CalibError> {
    if u_src.len() != u_dst.len() {
        return Err(CalibError::DimensionMismatch(u_src.len(), u_dst.len()));
    }
    check_distribution("source distribution", u_src)?;
    check_distribution("target distribution", u_dst)?;
    // Both constraint families fix the total, so the sums must agree exactly.
    let normalized = |w: &[f64]| -> Vec<f64> {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    };
    let (u_src, u_dst) = (&normalized(u_src)[..], &normalized(u_dst)[..]);
    let n = u_src.len();
    let u = DVector::from_column_slice(u_src);
    let v = DVector::from_column_slice(u_dst);

    let mut x = DMatrix::<f64>::identity(n, n);
    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut last_pattern: Vec<bool> = Vec::new();
    for iteration in 1..=MAX_ITERATIONS {
        let y = project_affine(&x, &u, &v);
        let shifted = &y + &q;
        let x_next = shifted.map(|e| e.max(0.0));
        q = shifted - &x_next;
        let step = (&x_next - &x).amax();
        x = x_next;

        if iteration % 16 == 0 || step < 1e-14 {
            let pattern: Vec<bool> = x.iter().map(|&e| e == 0.0).collect();
            let settled = pattern == last_pattern;
            last_pattern = pattern;
            if settled || step < 1e-14 {
                if let Some(a) = polished(u_src, u_dst, &x) {
                    let map = finish(a, u_src, u_dst, iteration);
                    if map.kkt_residual <= KKT_TOL {
                        return Ok(map);
                    }
                }
            }
            if step < 1e-15 && (&x - &y).amax() < 1e-13 {
                return Ok(finish(y, u_src, u_dst, iteration));
            }
        }
    }
    // Fall back on the affine-feasible iterate.
    let y = project_affine(&x, &u, &v);
    Ok(finish(y, u_src, u_dst, MAX_ITERATIONS))
}

/// `A p` for a probability vector `p`.
pub fn apply_calibration_map(map: &CalibrationMap, p: &[f64]) -> Result<Vec<f64>, CalibError> {
    if p.len() != map.dim() {
        return Err(CalibError::DimensionMismatch(map.dim(), p.len()));
    }
    check_distribution("input distribution", p)?;
    let out = &map.matrix * DVector::from_column_slice(p);
    Ok(out.iter().map(|&e| e.max(0.0)).collect())
}

/// The rank-one feasible point `u_dst 1ᵀ`.
pub fn rank_one_map(u_dst: &[f64]) -> DMatrix<f64> {
    let n = u_dst.len();
    DMatrix::from_fn(n, n, |i, _| u_dst[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn check_feasible(map: &CalibrationMap) {
        let n = map.dim();
        for j in 0..n {
            let s: f64 = (0..n).map(|i| map.matrix[(i, j)]).sum();
            assert!((s - 1.0).abs() <= 1e-8, "column {j} sums to {s}");
        }
        let au = &map.matrix * DVector::from_column_slice(&map.source);
        for i in 0..n {
            assert!((au[i] - map.target[i]).abs() <= 1e-8);
        }
        assert!(map.matrix.iter().all(|&e| e >= 0.0));
    }

    /// Grid search over the single free parameter of the 2-category problem:
    /// column one is `(a, 1 − a)`, column two is forced by `A u = v`.
    fn grid_2(u: [f64; 2], v: [f64; 2], step: f64) -> f64 {
        let mut best = f64::INFINITY;
        let k = (1.0 / step).round() as usize;
        for i in 0..=k {
            let a = i as f64 * step;
            let (c0, c1) = if u[1] > 0.0 {
                let top = (v[0] - a * u[0]) / u[1];
                (a, top)
            } else {
                (a, 1.0)
            };
            let m = [[c0, c1], [1.0 - c0, 1.0 - c1]];
            if m.iter().flatten().any(|&e| e < -1e-12) {
                continue;
            }
            if u[1] == 0.0 && ((c0 * u[0]) - v[0]).abs() > step {
                continue;
            }
            let obj = ((m[0][0] - 1.0).powi(2) + m[0][1].powi(2) + m[1][0].powi(2) + (m[1][1] - 1.0).powi(2)).sqrt();
            best = best.min(obj);
        }
        best
    }

    #[test]
    fn identical_distributions_give_identity() {
        let u = [0.1, 0.2, 0.3, 0.15, 0.2, 0.05];
        let map = solve_calibration_map(&u, &u).unwrap();
        assert!((&map.matrix - DMatrix::<f64>::identity(6, 6)).amax() < 1e-12);
        assert!(map.objective < 1e-12);
        check_feasible(&map);
    }

    #[test]
    fn two_category_hand_solution() {
        let map = solve_calibration_map(&[0.5, 0.5], &[0.6, 0.4]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.8]);
        assert!((&map.matrix - expect).amax() < 1e-6, "{}", map.matrix);
        assert!((map.objective - 0.08f64.sqrt()).abs() < 1e-6);
        assert!((map.objective - grid_2([0.5, 0.5], [0.6, 0.4], 1e-3)).abs() < 2e-3);
        check_feasible(&map);
        assert!(map.kkt_residual <= 1e-6);
    }

    #[test]
    fn one_hot_source_touches_only_its_column() {
        let v = [0.3, 0.1, 0.2, 0.25, 0.1, 0.05];
        let u = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let map = solve_calibration_map(&u, &v).unwrap();
        for i in 0..6 {
            assert!((map.matrix[(i, 0)] - v[i]).abs() < 1e-8);
            for j in 1..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((map.matrix[(i, j)] - e).abs() < 1e-8);
            }
        }
        check_feasible(&map);
    }

    #[test]
    fn apply_examples() {
        let map = solve_calibration_map(&[0.5, 0.5], &[0.6, 0.4]).unwrap();
        let out = apply_calibration_map(&map, &[0.0, 1.0]).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-6 && (out[1] - 0.8).abs() < 1e-6);
        let back = apply_calibration_map(&map, &[0.5, 0.5]).unwrap();
        assert!((back[0] - 0.6).abs() < 1e-8);

        let u = [0.2, 0.3, 0.5];
        let id = solve_calibration_map(&u, &u).unwrap();
        let p = [0.7, 0.1, 0.2];
        let q = apply_calibration_map(&id, &p).unwrap();
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
        assert!(apply_calibration_map(&id, &[0.5, 0.6, 0.0]).is_err());
        assert!(apply_calibration_map(&id, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(solve_calibration_map(&[0.5, 0.6], &[0.5, 0.5]), Err(CalibError::NotADistribution { .. })));
        assert!(matches!(solve_calibration_map(&[0.5, 0.5], &[1.5, -0.5]), Err(CalibError::NotADistribution { .. })));
        assert!(matches!(solve_calibration_map(&[1.0], &[0.5, 0.5]), Err(CalibError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn rank_one_point_is_feasible() {
        let u = [0.1, 0.6, 0.3];
        let v = [0.3, 0.3, 0.4];
        let a = rank_one_map(&v);
        let au = &a * DVector::from_column_slice(&u);
        for i in 0..3 {
            assert!((au[i] - v[i]).abs() < 1e-15);
            assert!((a.column(i).sum() - 1.0).abs() < 1e-15);
        }
    }

    fn arb_dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn solution_is_feasible_and_sandwiched(u in arb_dist(6), v in arb_dist(6), p in arb_dist(6)) {
            let map = solve_calibration_map(&u, &v).unwrap();
            check_feasible(&map);
            prop_assert!(map.kkt_residual <= 1e-6);
            let bound = (rank_one_map(&v) - DMatrix::<f64>::identity(6, 6)).norm();
            prop_assert!(map.objective >= 0.0 && map.objective <= bound + 1e-6);
            let q = apply_calibration_map(&map, &p).unwrap();
            prop_assert!(q.iter().all(|&e| e >= 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn two_category_matches_grid(u in arb_dist(2), v in arb_dist(2)) {
            let map = solve_calibration_map(&u, &v).unwrap();
            let grid = grid_2([u[0], u[1]], [v[0], v[1]], 1e-3);
            prop_assert!((map.objective - grid).abs() < 2e-3, "{} vs {}", map.objective, grid);
        }
    }
}
