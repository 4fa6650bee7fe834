//! Shared helpers for the integration suites: an independent brute-force QP
//! oracle and the seeded random-problem generator.
//!
//! The oracle enumerates every candidate active set and solves the equality
//! KKT system by its own Gaussian elimination; it shares no code with the
//! solver under test.

use attclf::linalg::Mat;
use attclf::qp::QpProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random strictly convex QP with a nonempty feasible set.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem<f64> {
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    let mut hess = a.transpose().matmul(&a);
    for i in 0..n {
        hess[(i, i)] += 0.3;
    }
    let linear: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut ineq = Mat::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            ineq[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    let interior: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rhs: Vec<f64> = (0..m)
        .map(|i| {
            (0..n).map(|j| ineq[(i, j)] * interior[j]).sum::<f64>() + rng.gen_range(0.0..1.0)
        })
        .collect();
    QpProblem {
        hessian: hess,
        linear,
        ineq_mat: ineq,
        ineq_rhs: rhs,
        lower: vec![-2.0; n],
        upper: vec![2.0; n],
    }
}

/// Gaussian elimination with partial pivoting, local to the oracle.
fn gauss_solve(a: &mut Vec<Vec<f64>>, b: &mut Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Some(x)
}

/// Brute-force optimum by active-set enumeration: every subset of the
/// constraint rows (general inequalities plus finite box faces) is treated
/// as equalities, the KKT system is solved, and the best feasible candidate
/// with nonnegative multipliers wins.
pub fn oracle_solve(p: &QpProblem<f64>) -> Option<Vec<f64>> {
    let n = p.n_vars();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..p.n_ineq() {
        rows.push((p.ineq_mat.row(i).to_vec(), p.ineq_rhs[i]));
    }
    for j in 0..n {
        if p.lower[j].is_finite() {
            let mut g = vec![0.0; n];
            g[j] = -1.0;
            rows.push((g, -p.lower[j]));
        }
        if p.upper[j].is_finite() {
            let mut g = vec![0.0; n];
            g[j] = 1.0;
            rows.push((g, p.upper[j]));
        }
    }
    let total = rows.len();
    let feasible = |x: &[f64]| {
        rows.iter().all(|(g, h)| {
            g.iter().zip(x).map(|(gi, xi)| gi * xi).sum::<f64>() <= h + 1e-7
        })
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    // All subsets of size <= n.
    for mask in 0u32..(1 << total) {
        let k = mask.count_ones() as usize;
        if k > n {
            continue;
        }
        let active: Vec<usize> = (0..total).filter(|i| mask & (1 << i) != 0).collect();
        let dim = n + k;
        let mut sys = vec![vec![0.0; dim]; dim];
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                sys[i][j] = p.hessian[(i, j)];
            }
            rhs[i] = -p.linear[i];
        }
        for (r, &row) in active.iter().enumerate() {
            for j in 0..n {
                sys[j][n + r] = rows[row].0[j];
                sys[n + r][j] = rows[row].0[j];
            }
            rhs[n + r] = rows[row].1;
        }
        let Some(sol) = gauss_solve(&mut sys, &mut rhs) else {
            continue;
        };
        let x = &sol[..n];
        let duals = &sol[n..];
        if duals.iter().any(|&l| l < -1e-9) {
            continue;
        }
        if !feasible(x) {
            continue;
        }
        let obj = p.objective(x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x.to_vec()));
        }
    }
    best.map(|(_, x)| x)
}
