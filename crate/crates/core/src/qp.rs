//! Dense strictly convex QP solver with solution differentiation.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' H x + F' x
//!     subject to  G x <= h,   lower <= x <= upper
//! ```
//!
//! for small problems (at most 8 variables and 8 general inequalities) via a
//! primal active-set method: the Hessian is Cholesky-factorized once, and the
//! working-set Schur complement is refactorized on every working-set change.
//! A phase-1 subproblem with one violation variable produces the feasible
//! starting point, which also detects empty feasible sets.
//!
//! [`grad_solution`] backpropagates a loss gradient on the primal solution to
//! the problem data through the KKT conditions restricted to the strictly
//! active set, which is what lets the QP sit inside a trained model.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::linalg::{cholesky, chol_solve, dot, lu_solve, norm_inf, Mat};
use crate::scalar::{cast, Scalar};

/// Every numeric tolerance used by the solver and its differentiation,
/// collected in one place.
#[derive(Clone, Debug)]
pub struct QpTolerances<T> {
    /// Primal feasibility and complementarity tolerance.
    pub feasibility: T,
    /// KKT residual below which a solution counts as optimal.
    pub kkt: T,
    /// Duals below this are treated as inactive when differentiating.
    pub active: T,
    /// Allowed dual infeasibility (duals may dip this far below zero).
    pub dual: T,
    /// Step norm below which the equality subproblem is considered stationary.
    pub step: T,
    /// Regularization added to the working-set Schur complement.
    pub schur_reg: T,
    /// Regularization added to the KKT matrix before differentiating.
    pub kkt_reg: T,
    /// Central finite-difference step used by gradient checks.
    pub fd_step: T,
    /// Active-set iteration cap.
    pub max_iter: usize,
}

impl<T: Scalar> Default for QpTolerances<T> {
    fn default() -> Self {
        QpTolerances {
            feasibility: cast(1e-8),
            kkt: cast(1e-8),
            active: cast(1e-8),
            dual: cast(1e-10),
            step: cast(1e-10),
            schur_reg: cast(1e-12),
            kkt_reg: cast(1e-10),
            fd_step: cast(1e-5),
            max_iter: 100,
        }
    }
}

/// Maximum number of decision variables.
pub const MAX_VARS: usize = 8;
/// Maximum number of general inequality rows.
pub const MAX_INEQ: usize = 8;

/// Problem data. `lower`/`upper` entries may be infinite.
#[derive(Clone, Debug)]
pub struct QpProblem<T> {
    pub hessian: Mat<T>,
    pub linear: Vec<T>,
    pub ineq_mat: Mat<T>,
    pub ineq_rhs: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> QpProblem<T> {
    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let m = self.n_ineq();
        if n == 0 || n > MAX_VARS {
            return Err(CoreError::invalid(
                "n_vars",
                format!("need 1..={MAX_VARS} variables, got {n}"),
            ));
        }
        if m > MAX_INEQ {
            return Err(CoreError::invalid(
                "n_ineq",
                format!("need at most {MAX_INEQ} inequalities, got {m}"),
            ));
        }
        if self.hessian.rows() != n || self.hessian.cols() != n {
            return Err(CoreError::Dimension("hessian shape".into()));
        }
        if self.ineq_mat.rows() != m || (m > 0 && self.ineq_mat.cols() != n) {
            return Err(CoreError::Dimension("inequality matrix shape".into()));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(CoreError::Dimension("bound vector length".into()));
        }
        for j in 0..n {
            if !(self.lower[j] < self.upper[j]) {
                return Err(CoreError::invalid(
                    "bounds",
                    format!("variable {j}: lower must be below upper"),
                ));
            }
        }
        // Minimum eigenvalue check: H - tau I must stay positive definite.
        let tau: T = cast(1e-8 * 0.99);
        let mut shifted = self.hessian.clone();
        shifted.symmetrize();
        for j in 0..n {
            shifted[(j, j)] = shifted[(j, j)] - tau;
        }
        if cholesky(&shifted).is_none() {
            return Err(CoreError::invalid(
                "hessian",
                "minimum eigenvalue must be at least 1e-8",
            ));
        }
        Ok(())
    }

    /// Objective value at x.
    pub fn objective(&self, x: &[T]) -> T {
        let hx = self.hessian.matvec(x);
        dot(x, &hx) * cast(0.5) + dot(&self.linear, x)
    }
}

/// Identity of a constraint row: a general inequality, or one side of a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowId {
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
}

/// Primal/dual solution with the active set and a KKT residual.
#[derive(Clone, Debug)]
pub struct QpSolution<T> {
    pub primal: Vec<T>,
    pub duals_ineq: Vec<T>,
    pub duals_lower: Vec<T>,
    pub duals_upper: Vec<T>,
    pub active_ineq: Vec<usize>,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
    pub status: QpStatus,
    pub kkt_residual: T,
    pub iterations: usize,
}

impl<T: Scalar> QpSolution<T> {
    /// Active rows in a stable order, usable as a warm start.
    pub fn active_rows(&self) -> Vec<RowId> {
        let mut rows: Vec<RowId> = self.active_ineq.iter().map(|&i| RowId::Ineq(i)).collect();
        rows.extend(self.active_lower.iter().map(|&j| RowId::Lower(j)));
        rows.extend(self.active_upper.iter().map(|&j| RowId::Upper(j)));
        rows
    }
}

/// Gradients of a scalar loss with respect to the problem data.
#[derive(Clone, Debug)]
pub struct QpGradients<T> {
    pub d_hessian: Mat<T>,
    pub d_linear: Vec<T>,
    pub d_ineq_mat: Mat<T>,
    pub d_ineq_rhs: Vec<T>,
}

struct Row<T> {
    id: RowId,
    g: Vec<T>,
    rhs: T,
    /// Inf-norm the original row was divided by; duals scale back by 1/scale.
    scale: T,
}

fn build_rows<T: Scalar>(problem: &QpProblem<T>) -> Vec<Row<T>> {
    let n = problem.n_vars();
    let mut rows = Vec::new();
    for i in 0..problem.n_ineq() {
        // Normalize to unit inf-norm: mixed row scales wreck both the Schur
        // conditioning and the add/drop decisions.
        let mut g = problem.ineq_mat.row(i).to_vec();
        let mut rhs = problem.ineq_rhs[i];
        let mut scale = norm_inf(&g);
        if scale > T::zero() && scale.is_finite() {
            for gi in g.iter_mut() {
                *gi = *gi / scale;
            }
            rhs = rhs / scale;
        } else {
            scale = T::one();
        }
        rows.push(Row {
            id: RowId::Ineq(i),
            g,
            rhs,
            scale,
        });
    }
    for j in 0..n {
        if problem.lower[j].is_finite() {
            let mut g = vec![T::zero(); n];
            g[j] = -T::one();
            rows.push(Row {
                id: RowId::Lower(j),
                g,
                rhs: -problem.lower[j],
                scale: T::one(),
            });
        }
    }
    for j in 0..n {
        if problem.upper[j].is_finite() {
            let mut g = vec![T::zero(); n];
            g[j] = T::one();
            rows.push(Row {
                id: RowId::Upper(j),
                g,
                rhs: problem.upper[j],
                scale: T::one(),
            });
        }
    }
    rows
}

struct CoreOutcome<T> {
    x: Vec<T>,
    duals: Vec<T>,
    working: Vec<usize>,
    iterations: usize,
    converged: bool,
}

/// Primal active-set iteration. `x0` must be feasible for all rows.
fn active_set_core<T: Scalar>(
    hess: &Mat<T>,
    chol_h: &Mat<T>,
    linear: &[T],
    rows: &[Row<T>],
    mut x: Vec<T>,
    mut working: Vec<usize>,
    tols: &QpTolerances<T>,
    max_iter: usize,
) -> CoreOutcome<T> {
    let n = x.len();
    let mut duals = vec![T::zero(); rows.len()];
    let mut iterations = 0;
    let trace = std::env::var_os("QP_TRACE").is_some();

    while iterations < max_iter {
        iterations += 1;
        if trace {
            eprintln!("iter {iterations}: x = {x:?} working = {working:?}");
        }

        // c = H x + F
        let mut c = hess.matvec(&x);
        for (ci, &fi) in c.iter_mut().zip(linear) {
            *ci = *ci + fi;
        }

        // Equality-constrained step on the working set via the Schur
        // complement S = A H^-1 A', refactorized every iteration, followed
        // by iterative refinement against the full KKT residual: huge dual
        // magnitudes (big slack penalties) otherwise exhaust the accuracy of
        // a single factored solve.
        let hinv_c = chol_solve(chol_h, &c);
        let m = working.len();
        let mut lambda = vec![T::zero(); m];
        let mut p = vec![T::zero(); n];
        if m == 0 {
            for i in 0..n {
                p[i] = -hinv_c[i];
            }
        } else {
            let hinv_rows: Vec<Vec<T>> = working
                .iter()
                .map(|&r| chol_solve(chol_h, &rows[r].g))
                .collect();
            let mut schur = Mat::zeros(m, m);
            for a in 0..m {
                for b in 0..m {
                    schur[(a, b)] = dot(&rows[working[a]].g, &hinv_rows[b]);
                }
            }
            let mut reg_schur = schur.clone();
            for a in 0..m {
                reg_schur[(a, a)] = reg_schur[(a, a)] + tols.schur_reg;
            }
            let schur_chol = cholesky(&reg_schur).or_else(|| {
                for a in 0..m {
                    reg_schur[(a, a)] = reg_schur[(a, a)] + cast(1e-8);
                }
                cholesky(&reg_schur)
            });

            // Solve K (p, lambda) = (-c, 0) by refinement from (0, 0): each
            // sweep measures the true residual and corrects through the
            // factored Schur complement.
            if let Some(l) = schur_chol.as_ref() {
                for _ in 0..3 {
                    // r1 = H p + c + A' lambda, r2 = A p
                    let mut r1 = hess.matvec(&p);
                    for i in 0..n {
                        r1[i] = r1[i] + c[i];
                        for (a, &w) in working.iter().enumerate() {
                            r1[i] = r1[i] + lambda[a] * rows[w].g[i];
                        }
                    }
                    let r2: Vec<T> = working.iter().map(|&w| dot(&rows[w].g, &p)).collect();
                    let hinv_r1 = chol_solve(chol_h, &r1);
                    let srhs: Vec<T> = (0..m)
                        .map(|a| r2[a] - dot(&rows[working[a]].g, &hinv_r1))
                        .collect();
                    let dlam = chol_solve(l, &srhs);
                    let mut dp = vec![T::zero(); n];
                    for i in 0..n {
                        let mut acc = r1[i];
                        for (a, &w) in working.iter().enumerate() {
                            acc = acc + dlam[a] * rows[w].g[i];
                        }
                        dp[i] = acc;
                    }
                    let dp = chol_solve(chol_h, &dp);
                    let mut change = T::zero();
                    for i in 0..n {
                        p[i] = p[i] - dp[i];
                        change = change.max(dp[i].abs());
                    }
                    for (la, dl) in lambda.iter_mut().zip(&dlam) {
                        *la = *la + *dl;
                        change = change.max(dl.abs());
                    }
                    if change <= tols.step {
                        break;
                    }
                }
            } else if let Some(sol) = {
                let rhs: Vec<T> = (0..m)
                    .map(|a| -dot(&rows[working[a]].g, &hinv_c))
                    .collect();
                lu_solve(&reg_schur, &rhs)
            } {
                lambda = sol;
                for i in 0..n {
                    let mut acc = -hinv_c[i];
                    for (a, hr) in hinv_rows.iter().enumerate() {
                        acc = acc - lambda[a] * hr[i];
                    }
                    p[i] = acc;
                }
            }
        }

        let step_scale = T::one() + norm_inf(&x);
        if norm_inf(&p) <= tols.step * step_scale {
            // Stationary on the working set; check dual feasibility. The
            // tolerance scales with the dual magnitudes, or large problems
            // cycle on sign noise around zero.
            let dual_scale = T::one() + norm_inf(&lambda);
            let mut min_lambda = T::zero();
            let mut drop_pos: Option<usize> = None;
            for (a, &l) in lambda.iter().enumerate() {
                let better = l < min_lambda
                    || (l == min_lambda
                        && drop_pos.is_some_and(|d| row_order(rows[working[a]].id)
                            < row_order(rows[working[d]].id)));
                if l < -tols.dual * dual_scale && better {
                    min_lambda = l;
                    drop_pos = Some(a);
                }
            }
            match drop_pos {
                None => {
                    for (a, &r) in working.iter().enumerate() {
                        duals[r] = if lambda[a] > T::zero() {
                            lambda[a]
                        } else {
                            T::zero()
                        };
                    }
                    return CoreOutcome {
                        x,
                        duals,
                        working,
                        iterations,
                        converged: true,
                    };
                }
                Some(a) => {
                    working.remove(a);
                    continue;
                }
            }
        }

        // Ratio test against rows outside the working set.
        let mut alpha = T::one();
        let mut blocker: Option<usize> = None;
        for (r, row) in rows.iter().enumerate() {
            if working.contains(&r) {
                continue;
            }
            let gp = dot(&row.g, &p);
            if gp > tols.step {
                let slack = row.rhs - dot(&row.g, &x);
                let a_r = (slack / gp).max(T::zero());
                if a_r < alpha {
                    alpha = a_r;
                    blocker = Some(r);
                }
            }
        }
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
        }
        if let Some(r) = blocker {
            working.push(r);
        }
    }

    CoreOutcome {
        x,
        duals,
        working,
        iterations,
        converged: false,
    }
}

fn row_order(id: RowId) -> (u8, usize) {
    match id {
        RowId::Ineq(i) => (0, i),
        RowId::Lower(j) => (1, j),
        RowId::Upper(j) => (2, j),
    }
}

/// Box-feasible starting guess (zero clamped into the box).
fn box_start<T: Scalar>(problem: &QpProblem<T>) -> Vec<T> {
    (0..problem.n_vars())
        .map(|j| {
            let lo = problem.lower[j];
            let hi = problem.upper[j];
            let mut x = T::zero();
            if x < lo {
                x = lo;
            }
            if x > hi {
                x = hi;
            }
            x
        })
        .collect()
}

/// Feasible point for the full row set, via a phase-1 subproblem with one
/// violation variable when the box guess is not already feasible.
///
/// The subproblem minimizes `1/2 |x|^2 + 1/2 t^2 + M t` subject to
/// `G x - t <= h`, the box, and `t >= 0`; `(x0, violation + 1)` is trivially
/// feasible, so no recursion is needed. The identity Hessian keeps the
/// subproblem well conditioned; if the returned point still violates the
/// original rows, M escalates before infeasibility is declared.
fn find_feasible<T: Scalar>(
    problem: &QpProblem<T>,
    rows: &[Row<T>],
    tols: &QpTolerances<T>,
) -> Result<Vec<T>> {
    let n = problem.n_vars();
    let mut x0 = box_start(problem);
    let violation = |x: &[T]| {
        rows.iter()
            .map(|r| dot(&r.g, x) - r.rhs)
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    };
    let viol0 = violation(&x0);
    if viol0 <= tols.feasibility {
        return Ok(x0);
    }

    // Relaxation variables (unbounded above, negative coefficient in every
    // violated row) can absorb the violation directly; the slack of a
    // relaxed constraint is the common case.
    for j in 0..n {
        if !problem.upper[j].is_finite() {
            let violated: Vec<&Row<T>> = rows
                .iter()
                .filter(|r| dot(&r.g, &x0) - r.rhs > tols.feasibility)
                .collect();
            if violated.is_empty() {
                break;
            }
            if violated.iter().all(|r| r.g[j] < T::zero()) {
                let needed = violated
                    .iter()
                    .map(|r| (dot(&r.g, &x0) - r.rhs) / -r.g[j])
                    .fold(T::zero(), |m, v| if v > m { v } else { m });
                x0[j] = x0[j] + needed + T::one();
            }
        }
    }
    if violation(&x0) <= tols.feasibility {
        return Ok(x0);
    }

    let mut hess = Mat::identity(n + 1);
    hess[(n, n)] = T::one();
    let chol_h = cholesky(&hess).expect("identity is positive definite");

    let mut p1_rows: Vec<Row<T>> = Vec::with_capacity(rows.len() + 1);
    for row in rows {
        let mut g = row.g.clone();
        g.push(match row.id {
            RowId::Ineq(_) => -T::one(),
            _ => T::zero(),
        });
        p1_rows.push(Row {
            id: row.id,
            g,
            rhs: row.rhs,
            scale: T::one(),
        });
    }
    let mut g_t = vec![T::zero(); n + 1];
    g_t[n] = -T::one();
    p1_rows.push(Row {
        id: RowId::Lower(n),
        g: g_t,
        rhs: T::zero(),
        scale: T::one(),
    });

    let mut big_m: T = cast(1e4);
    for _ in 0..4 {
        let mut linear = vec![T::zero(); n + 1];
        linear[n] = big_m;
        let mut start = x0.clone();
        start.push(violation(&x0) + T::one());
        let outcome = active_set_core(
            &hess,
            &chol_h,
            &linear,
            &p1_rows,
            start,
            Vec::new(),
            tols,
            200,
        );
        let x_star = outcome.x[..n].to_vec();
        if violation(&x_star) <= tols.feasibility {
            return Ok(x_star);
        }
        big_m = big_m * cast(100.0);
    }
    Err(CoreError::QpInfeasible(
        "no point satisfies the box and inequality rows".into(),
    ))
}

/// Solve with default tolerances and no warm start.
pub fn solve<T: Scalar>(problem: &QpProblem<T>) -> Result<QpSolution<T>> {
    solve_with(problem, &QpTolerances::default(), None)
}

/// Warm-start hint: the previous solution's primal point and active rows.
#[derive(Clone, Debug)]
pub struct WarmStart<T> {
    pub primal: Vec<T>,
    pub active: Vec<RowId>,
}

/// Solve with explicit tolerances and an optional warm start.
pub fn solve_with<T: Scalar>(
    problem: &QpProblem<T>,
    tols: &QpTolerances<T>,
    warm: Option<&WarmStart<T>>,
) -> Result<QpSolution<T>> {
    problem.validate()?;
    let mut hess = problem.hessian.clone();
    hess.symmetrize();
    let chol_h = cholesky(&hess)
        .ok_or_else(|| CoreError::invalid("hessian", "not positive definite"))?;
    let rows = build_rows(problem);

    // Starting point and working set.
    let (x0, w0) = match warm {
        Some(w) if w.primal.len() == problem.n_vars() => {
            let mut x = w.primal.clone();
            for j in 0..x.len() {
                x[j] = crate::scalar::clamp(x[j], problem.lower[j], problem.upper[j]);
            }
            let feasible = rows
                .iter()
                .all(|r| dot(&r.g, &x) - r.rhs <= tols.feasibility);
            if feasible {
                let working: Vec<usize> = rows
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| {
                        w.active.contains(&r.id)
                            && (dot(&r.g, &x) - r.rhs).abs() <= tols.feasibility
                    })
                    .map(|(i, _)| i)
                    .collect();
                (x, working)
            } else {
                (find_feasible(problem, &rows, tols)?, Vec::new())
            }
        }
        _ => (find_feasible(problem, &rows, tols)?, Vec::new()),
    };

    let outcome = active_set_core(&hess, &chol_h, &problem.linear, &rows, x0, w0, tols, tols.max_iter);
    Ok(assemble_solution(problem, &hess, &rows, outcome, tols))
}

fn assemble_solution<T: Scalar>(
    problem: &QpProblem<T>,
    hess: &Mat<T>,
    rows: &[Row<T>],
    outcome: CoreOutcome<T>,
    tols: &QpTolerances<T>,
) -> QpSolution<T> {
    let n = problem.n_vars();
    let m = problem.n_ineq();
    let mut duals_ineq = vec![T::zero(); m];
    let mut duals_lower = vec![T::zero(); n];
    let mut duals_upper = vec![T::zero(); n];
    let mut active_ineq = Vec::new();
    let mut active_lower = Vec::new();
    let mut active_upper = Vec::new();

    for &r in &outcome.working {
        let lam = outcome.duals[r];
        match rows[r].id {
            RowId::Ineq(i) => {
                duals_ineq[i] = lam / rows[r].scale;
                active_ineq.push(i);
            }
            RowId::Lower(j) => {
                duals_lower[j] = lam;
                active_lower.push(j);
            }
            RowId::Upper(j) => {
                duals_upper[j] = lam;
                active_upper.push(j);
            }
        }
    }
    active_ineq.sort_unstable();
    active_lower.sort_unstable();
    active_upper.sort_unstable();

    // KKT residual: stationarity, primal feasibility, complementarity.
    let x = &outcome.x;
    let mut stat = hess.matvec(x);
    let grad_scale = norm_inf(&stat).max(norm_inf(&problem.linear));
    for (si, &fi) in stat.iter_mut().zip(&problem.linear) {
        *si = *si + fi;
    }
    let mut comp = T::zero();
    let mut feas = T::zero();
    let mut dual_scale = T::zero();
    for (r, row) in rows.iter().enumerate() {
        let lam = outcome.duals[r];
        if lam > dual_scale {
            dual_scale = lam;
        }
        for (si, &gi) in stat.iter_mut().zip(&row.g) {
            *si = *si + lam * gi;
        }
        // Feasibility reported on the original row scale.
        let slack = (dot(&row.g, x) - row.rhs) * row.scale;
        if slack > feas {
            feas = slack;
        }
        let c = (lam / row.scale * slack).abs();
        if c > comp {
            comp = c;
        }
    }
    let residual = norm_inf(&stat).max(comp).max(feas);
    // Optimality is judged against the problem's own magnitude; the raw
    // residual is still reported for absolute checks on unit-scale problems.
    let scale = T::one() + grad_scale + dual_scale;
    let status = if outcome.converged && residual <= tols.kkt * scale {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIter
    };

    QpSolution {
        primal: outcome.x,
        duals_ineq,
        duals_lower,
        duals_upper,
        active_ineq,
        active_lower,
        active_upper,
        status,
        kkt_residual: residual,
        iterations: outcome.iterations,
    }
}

/// Solve a batch of problems. Results are reported per index in input order;
/// problems are independent, so parallel execution cannot change the outputs.
pub fn solve_batch<T: Scalar>(problems: &[QpProblem<T>]) -> Vec<Result<QpSolution<T>>> {
    problems.par_iter().map(solve).collect()
}

/// Backpropagate `d_loss_d_primal` through the KKT conditions at an optimal
/// solution, returning loss gradients for H, F, G, and h.
///
/// Weakly active constraints (dual at or below the activity tolerance) are
/// treated as inactive, which picks one valid subgradient at degenerate
/// points. Active box bounds enter the KKT system but produce no reported
/// gradient, since bounds are fixed data rather than learned quantities.
pub fn grad_solution<T: Scalar>(
    problem: &QpProblem<T>,
    solution: &QpSolution<T>,
    d_loss_d_primal: &[T],
) -> Result<QpGradients<T>> {
    grad_solution_with(problem, solution, d_loss_d_primal, &QpTolerances::default())
}

pub fn grad_solution_with<T: Scalar>(
    problem: &QpProblem<T>,
    solution: &QpSolution<T>,
    d_loss_d_primal: &[T],
    tols: &QpTolerances<T>,
) -> Result<QpGradients<T>> {
    if solution.status != QpStatus::Optimal {
        return Err(CoreError::QpGradient("solution is not optimal".into()));
    }
    let n = problem.n_vars();
    let m = problem.n_ineq();
    if d_loss_d_primal.len() != n {
        return Err(CoreError::Dimension("loss gradient length".into()));
    }

    // Strictly active rows: dual above the activity tolerance.
    #[derive(Clone, Copy)]
    enum ActRow {
        Ineq(usize),
        Lower(usize),
        Upper(usize),
    }
    let mut act: Vec<(ActRow, T)> = Vec::new();
    for i in 0..m {
        if solution.duals_ineq[i] > tols.active {
            act.push((ActRow::Ineq(i), solution.duals_ineq[i]));
        }
    }
    for j in 0..n {
        if solution.duals_lower[j] > tols.active {
            act.push((ActRow::Lower(j), solution.duals_lower[j]));
        }
        if solution.duals_upper[j] > tols.active {
            act.push((ActRow::Upper(j), solution.duals_upper[j]));
        }
    }
    let k = act.len();

    // KKT matrix [[H, A'], [A, 0]] with a small diagonal shift.
    let dim = n + k;
    let mut kkt = Mat::zeros(dim, dim);
    let mut hess = problem.hessian.clone();
    hess.symmetrize();
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = hess[(i, j)];
        }
    }
    for (r, &(row, _)) in act.iter().enumerate() {
        let coeffs: Vec<T> = match row {
            ActRow::Ineq(i) => problem.ineq_mat.row(i).to_vec(),
            ActRow::Lower(j) => {
                let mut g = vec![T::zero(); n];
                g[j] = -T::one();
                g
            }
            ActRow::Upper(j) => {
                let mut g = vec![T::zero(); n];
                g[j] = T::one();
                g
            }
        };
        for (j, &c) in coeffs.iter().enumerate() {
            kkt[(n + r, j)] = c;
            kkt[(j, n + r)] = c;
        }
    }
    for i in 0..dim {
        kkt[(i, i)] = kkt[(i, i)] + tols.kkt_reg;
    }

    let mut rhs = vec![T::zero(); dim];
    rhs[..n].copy_from_slice(d_loss_d_primal);
    let pq = lu_solve(&kkt, &rhs)
        .ok_or_else(|| CoreError::QpGradient("singular KKT system".into()))?;
    if pq.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::QpGradient("non-finite KKT solve".into()));
    }
    let p = &pq[..n];
    let q = &pq[n..];

    let x = &solution.primal;
    let half: T = cast(0.5);
    let mut d_hessian = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d_hessian[(i, j)] = -(p[i] * x[j] + x[i] * p[j]) * half;
        }
    }
    let d_linear: Vec<T> = p.iter().map(|&v| -v).collect();
    let mut d_ineq_mat = Mat::zeros(m, n);
    let mut d_ineq_rhs = vec![T::zero(); m];
    for (r, &(row, lam)) in act.iter().enumerate() {
        if let ActRow::Ineq(i) = row {
            for j in 0..n {
                d_ineq_mat[(i, j)] = -(lam * p[j] + q[r] * x[j]);
            }
            d_ineq_rhs[i] = q[r];
        }
    }

    Ok(QpGradients {
        d_hessian,
        d_linear,
        d_ineq_mat,
        d_ineq_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unconstrained_1d() -> QpProblem<f64> {
        QpProblem {
            hessian: Mat::from_rows(&[vec![1.0]]),
            linear: vec![0.0],
            ineq_mat: Mat::zeros(0, 1),
            ineq_rhs: vec![],
            lower: vec![-1.0],
            upper: vec![1.0],
        }
    }

    #[test]
    fn box_only_minimum_at_zero() {
        let sol = solve(&unconstrained_1d()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal[0], 0.0, epsilon = 1e-12);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn active_constraint_dual_from_stationarity() {
        // min 1/2 u^2  s.t. u <= -1  ->  u* = -1, dual = 1.
        let p = QpProblem {
            hessian: Mat::from_rows(&[vec![1.0]]),
            linear: vec![0.0],
            ineq_mat: Mat::from_rows(&[vec![1.0]]),
            ineq_rhs: vec![-1.0],
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
        };
        let sol = solve(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal[0], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.duals_ineq[0], 1.0, epsilon = 1e-10);
        assert_eq!(sol.active_ineq, vec![0]);
    }

    #[test]
    fn infeasible_detected() {
        // Box forces x >= 0 but the halfspace demands x <= -1.
        let p = QpProblem {
            hessian: Mat::from_rows(&[vec![1.0]]),
            linear: vec![0.0],
            ineq_mat: Mat::from_rows(&[vec![1.0]]),
            ineq_rhs: vec![-1.0],
            lower: vec![0.0],
            upper: vec![1.0],
        };
        assert!(matches!(solve(&p), Err(CoreError::QpInfeasible(_))));
    }

    pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem<f64> {
        // SPD Hessian from A'A + c I.
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
        // Keep the feasible set nonempty: the rhs is the row value at an
        // interior box point plus a nonnegative margin.
        let interior: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rhs: Vec<f64> = (0..m)
            .map(|i| dot(ineq.row(i), &interior) + rng.gen_range(0.0..1.0))
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

    #[test]
    fn solution_beats_feasible_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = random_problem(&mut rng, 3, 2);
            let sol = solve(&p).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "residual {}", sol.kkt_residual);
            let obj = p.objective(&sol.primal);
            let mut tried = 0;
            while tried < 200 {
                let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let feasible = (0..p.n_ineq())
                    .all(|i| dot(p.ineq_mat.row(i), &probe) <= p.ineq_rhs[i]);
                if !feasible {
                    continue;
                }
                tried += 1;
                assert!(
                    obj <= p.objective(&probe) + 1e-9,
                    "probe beat the solver: {obj} vs {}",
                    p.objective(&probe)
                );
            }
        }
    }

    #[test]
    fn deterministic_resolve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_problem(&mut rng, 4, 3);
        let a = solve(&p).unwrap();
        let b = solve(&p).unwrap();
        assert_eq!(a.primal, b.primal);
        assert_eq!(a.duals_ineq, b.duals_ineq);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn batch_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let problems: Vec<_> = (0..20).map(|_| random_problem(&mut rng, 3, 2)).collect();
        let batch = solve_batch(&problems);
        for (p, r) in problems.iter().zip(&batch) {
            let single = solve(p).unwrap();
            let b = r.as_ref().unwrap();
            assert_eq!(single.primal, b.primal);
        }
    }

    #[test]
    fn warm_start_agrees_with_cold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 3, 2);
            let cold = solve(&p).unwrap();
            let warm = WarmStart {
                primal: cold.primal.clone(),
                active: cold.active_rows(),
            };
            let re = solve_with(&p, &QpTolerances::default(), Some(&warm)).unwrap();
            for (a, b) in re.primal.iter().zip(&cold.primal) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            assert!(re.iterations <= cold.iterations);
        }
    }

    #[test]
    fn grad_unconstrained_closed_form() {
        // With H = I and no active rows, dL/dF = -g.
        let p = QpProblem {
            hessian: Mat::identity(2),
            linear: vec![0.3, -0.4],
            ineq_mat: Mat::zeros(0, 2),
            ineq_rhs: vec![],
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![f64::INFINITY; 2],
        };
        let sol = solve(&p).unwrap();
        let g = [0.7, -1.1];
        let grads = grad_solution(&p, &sol, &g).unwrap();
        for (got, want) in grads.d_linear.iter().zip(&g) {
            assert_abs_diff_eq!(got, &-want, epsilon = 1e-8);
        }
    }

    #[test]
    fn grad_pinned_constraint_closed_form() {
        // Solution pinned at u = h: dL/dh = g, dL/dF = 0.
        let p = QpProblem {
            hessian: Mat::from_rows(&[vec![1.0]]),
            linear: vec![0.0],
            ineq_mat: Mat::from_rows(&[vec![1.0]]),
            ineq_rhs: vec![-1.0],
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
        };
        let sol = solve(&p).unwrap();
        let grads = grad_solution(&p, &sol, &[0.8]).unwrap();
        assert_abs_diff_eq!(grads.d_ineq_rhs[0], 0.8, epsilon = 1e-8);
        assert_abs_diff_eq!(grads.d_linear[0], 0.0, epsilon = 1e-8);
        // dL/dG = -(lam p + q x) = -q x = -0.8 * (-1) = 0.8
        assert_abs_diff_eq!(grads.d_ineq_mat[(0, 0)], 0.8, epsilon = 1e-8);
    }

    /// Shared helper: gradient of the loss g'x* by central finite differences
    /// over one scalar knob of the problem.
    fn fd_loss<F>(base: &QpProblem<f64>, g: &[f64], mutate: F) -> f64
    where
        F: Fn(&mut QpProblem<f64>, f64),
    {
        let h = 1e-5;
        let mut plus = base.clone();
        mutate(&mut plus, h);
        let mut minus = base.clone();
        mutate(&mut minus, -h);
        let sp = solve(&plus).unwrap();
        let sm = solve(&minus).unwrap();
        (dot(g, &sp.primal) - dot(g, &sm.primal)) / (2.0 * h)
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 25 {
            let p = random_problem(&mut rng, 3, 2);
            let sol = solve(&p).unwrap();
            if sol.status != QpStatus::Optimal || near_degenerate(&p, &sol) {
                continue;
            }
            checked += 1;
            let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grads = grad_solution(&p, &sol, &g).unwrap();

            for j in 0..3 {
                let fd = fd_loss(&p, &g, |q, h| q.linear[j] += h);
                assert_close(grads.d_linear[j], fd, 1e-4);
            }
            for i in 0..2 {
                let fd = fd_loss(&p, &g, |q, h| q.ineq_rhs[i] += h);
                assert_close(grads.d_ineq_rhs[i], fd, 1e-4);
                for j in 0..3 {
                    let fd = fd_loss(&p, &g, |q, h| q.ineq_mat[(i, j)] += h);
                    assert_close(grads.d_ineq_mat[(i, j)], fd, 1e-4);
                }
            }
            // Hessian entries perturbed symmetrically; compare pair sums.
            for i in 0..3 {
                for j in i..3 {
                    let fd = fd_loss(&p, &g, |q, h| {
                        q.hessian[(i, j)] += h;
                        if i != j {
                            q.hessian[(j, i)] += h;
                        }
                    });
                    let analytic = if i == j {
                        grads.d_hessian[(i, j)]
                    } else {
                        grads.d_hessian[(i, j)] + grads.d_hessian[(j, i)]
                    };
                    assert_close(analytic, fd, 1e-4);
                }
            }
        }
    }

    pub fn near_degenerate(p: &QpProblem<f64>, sol: &QpSolution<f64>) -> bool {
        let margin = 1e-6;
        for i in 0..p.n_ineq() {
            let slack = p.ineq_rhs[i] - dot(p.ineq_mat.row(i), &sol.primal);
            if sol.duals_ineq[i].max(slack) < margin {
                return true;
            }
        }
        for j in 0..p.n_vars() {
            let sl = sol.primal[j] - p.lower[j];
            if p.lower[j].is_finite() && sol.duals_lower[j].max(sl) < margin {
                return true;
            }
            let su = p.upper[j] - sol.primal[j];
            if p.upper[j].is_finite() && sol.duals_upper[j].max(su) < margin {
                return true;
            }
        }
        false
    }

    fn assert_close(analytic: f64, fd: f64, rel: f64) {
        let scale = 1.0f64.max(fd.abs()).max(analytic.abs());
        assert!(
            (analytic - fd).abs() <= rel * scale,
            "analytic {analytic} vs fd {fd}"
        );
    }
}
