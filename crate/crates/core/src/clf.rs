//! Quadratic CLFs over the partial state with observation-dependent
//! "stability attention", and the relaxed CLF-QP controllers built from them.
//!
//! Lane tracking stabilizes only the lateral offset `d` and heading error
//! `mu`, both of relative degree two: the control appears only after two
//! differentiations. The surrogate state `y = (d, mu, xi1, xi2)` appends the
//! first derivatives `xi1 = d_dot`, `xi2 = mu_dot`, and the candidate
//!
//! ```text
//!     V(y) = (d + k1 xi1)^2 + c1 (mu + k2 xi2)^2
//! ```
//!
//! has relative degree one in `y`. Driving V to zero drives the original
//! partial state to zero; the (k1, k2, c1) parameters set which error
//! direction the controller currently works hardest on, and are what the
//! attention head learns to emit per observation.
//!
//! Each control step solves
//!
//! ```text
//!     minimize    1/2 u' H u + F' u + w s^2
//!     subject to  dV/dt(u) + eps V <= s,   s >= 0,   u in bounds
//! ```
//!
//! where dV/dt is affine in u because the dynamics are control-affine. The
//! slack keeps the QP feasible when the decay demand conflicts with the
//! control bounds.

use crate::error::Result;
use crate::linalg::Mat;
use crate::path::PathSpec;
use crate::qp::{self, QpProblem, QpSolution, QpStatus, QpTolerances, WarmStart};
use crate::scalar::{cast, clamp, Scalar};
use crate::vehicle::{dynamics_jacobian_at_kappa, ControlInput, VehicleParams, VehicleState};

/// CLF-QP configuration.
#[derive(Clone, Debug)]
pub struct ClfConfig<T> {
    /// Exponential decay rate demanded of V.
    pub epsilon: T,
    /// Quadratic penalty on the constraint slack.
    pub slack_weight: T,
    /// Diagonal control cost over (accel, steer rate).
    pub control_cost: (T, T),
    /// Explicit reference control for the linear cost term. When absent, the
    /// acceleration reference tracks `v_ref` with gain `speed_gain`.
    pub control_ref: Option<ControlInput<T>>,
    /// Reference speed for the acceleration cost term.
    pub v_ref: T,
    /// Proportional gain mapping speed error to the acceleration reference.
    pub speed_gain: T,
    /// Extra tightening of the constraint right-hand side; hook for bounding
    /// observation drift, zero by default.
    pub robustness_margin: T,
}

impl<T: Scalar> Default for ClfConfig<T> {
    fn default() -> Self {
        ClfConfig {
            epsilon: cast(0.8),
            slack_weight: cast(1000.0),
            control_cost: (cast(1.0), cast(4.0)),
            control_ref: None,
            v_ref: cast(8.0),
            speed_gain: cast(0.5),
            robustness_margin: T::zero(),
        }
    }
}

/// Attention parameters of the quadratic candidate; all strictly positive
/// (the second direction's scale is fixed to one).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub k1: T,
    pub k2: T,
    pub c1: T,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(k1: T, k2: T, c1: T) -> Self {
        AttentionParams { k1, k2, c1 }
    }

    /// Fixed baseline used by the classical controller.
    pub fn baseline() -> Self {
        AttentionParams {
            k1: T::one(),
            k2: T::one(),
            c1: T::one(),
        }
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.k1, self.k2, self.c1]
    }
}

/// Surrogate state (d, mu, xi1, xi2) with xi1 = d_dot, xi2 = mu_dot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformedState<T> {
    pub d: T,
    pub mu: T,
    pub xi1: T,
    pub xi2: T,
}

impl<T: Scalar> TransformedState<T> {
    pub fn to_array(&self) -> [T; 4] {
        [self.d, self.mu, self.xi1, self.xi2]
    }
}

/// Matrix form of the candidate: V = y' P y with P = Q' L Q.
#[derive(Clone, Debug)]
pub struct ClfMatrices<T> {
    pub p: Mat<T>,
    pub q: Mat<T>,
    /// Diagonal of L: (1, c1, 0, 0).
    pub lambda: Vec<T>,
}

/// One attended direction: a component of Q y with its eigenvalue.
#[derive(Clone, Copy, Debug)]
pub struct AttentionComponent<T> {
    /// Component index of Q y (0: the d-direction, 1: the mu-direction).
    pub index: usize,
    pub eigenvalue: T,
    /// Current value of that component.
    pub value: T,
}

/// Surrogate state at an explicit curvature value.
pub fn transform_state_at_kappa<T: Scalar>(
    params: &VehicleParams<T>,
    kappa: T,
    state: &VehicleState<T>,
) -> Result<TransformedState<T>> {
    let dx = crate::vehicle::dynamics_at_kappa(params, kappa, state, &ControlInput::zero())?;
    Ok(TransformedState {
        d: state.d,
        mu: state.mu,
        xi1: dx[1],
        xi2: dx[2],
    })
}

/// Surrogate state with curvature looked up from the path.
pub fn transform_state<T: Scalar>(
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
) -> Result<TransformedState<T>> {
    transform_state_at_kappa(params, path.curvature_at(state.s), state)
}

/// Candidate value V(y).
pub fn attclf_value<T: Scalar>(att: &AttentionParams<T>, y: &TransformedState<T>) -> T {
    let e1 = y.d + att.k1 * y.xi1;
    let e2 = y.mu + att.k2 * y.xi2;
    e1 * e1 + att.c1 * e2 * e2
}

/// Matrix form of the candidate.
pub fn attclf_matrices<T: Scalar>(att: &AttentionParams<T>) -> ClfMatrices<T> {
    let z = T::zero();
    let o = T::one();
    let q = Mat::from_rows(&[
        vec![o, z, att.k1, z],
        vec![z, o, z, att.k2],
        vec![z, z, z, z],
        vec![z, z, z, z],
    ]);
    let lambda = vec![o, att.c1, z, z];
    let p = q.transpose().matmul(&Mat::diag(&lambda)).matmul(&q);
    ClfMatrices { p, q, lambda }
}

/// The K most-attended directions: components of Q y sorted by descending
/// eigenvalue, ties broken by lower component index.
pub fn stability_attention<T: Scalar>(
    att: &AttentionParams<T>,
    y: &TransformedState<T>,
    k: usize,
) -> Result<Vec<AttentionComponent<T>>> {
    if !(1..=2).contains(&k) {
        return Err(crate::error::CoreError::invalid(
            "k",
            format!("only 2 directions carry nonzero eigenvalues; got K={k}"),
        ));
    }
    let e1 = y.d + att.k1 * y.xi1;
    let e2 = y.mu + att.k2 * y.xi2;
    let mut comps = vec![
        AttentionComponent {
            index: 0,
            eigenvalue: T::one(),
            value: e1,
        },
        AttentionComponent {
            index: 1,
            eigenvalue: att.c1,
            value: e2,
        },
    ];
    // Descending eigenvalue; equal eigenvalues keep index order.
    comps.sort_by(|a, b| {
        b.eigenvalue
            .partial_cmp(&a.eigenvalue)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    comps.truncate(k);
    Ok(comps)
}

/// Constraint data at one state: `a . u <= b` together with V and the
/// partial derivatives of (a, b) with respect to the attention parameters,
/// which the training loop chains through the QP gradients.
#[derive(Clone, Debug)]
pub struct ConstraintData<T> {
    pub a: [T; 2],
    pub b: T,
    pub v: T,
    /// Rows: d a0 / d(k1,k2,c1) and d a1 / d(k1,k2,c1).
    pub da_datt: [[T; 3]; 2],
    pub db_datt: [T; 3],
}

/// Build the affine decay constraint at an explicit curvature.
///
/// dV/dt(u) is evaluated through the chain rule: the surrogate-state rates
/// (xi1_dot, xi2_dot) are read off the dynamics Jacobian rows for d_dot and
/// mu_dot, with the curvature held locally constant (exact on
/// piecewise-constant profiles away from joints, matching the frozen-state
/// treatment inside one control interval).
pub fn constraint_at_kappa<T: Scalar>(
    att: &AttentionParams<T>,
    clf: &ClfConfig<T>,
    params: &VehicleParams<T>,
    kappa: T,
    state: &VehicleState<T>,
) -> Result<ConstraintData<T>> {
    let y = transform_state_at_kappa(params, kappa, state)?;
    let (jac_a, _) = dynamics_jacobian_at_kappa(params, kappa, state)?;

    // Drift and control sensitivity of the xi rates. State derivative rows:
    // index 1 is d_dot = xi1, index 2 is mu_dot = xi2; the drift of x is
    // (s_dot, xi1, xi2, 0, 0) and the controls enter through v_dot, delta_dot.
    let drift1 = jac_a[1][2] * y.xi2; // xi1 has no s or d dependence
    let drift2 = jac_a[2][1] * y.xi1 + jac_a[2][2] * y.xi2;
    let b1 = [jac_a[1][3], jac_a[1][4]];
    let b2 = [jac_a[2][3], jac_a[2][4]];

    let two = cast::<T>(2.0);
    let e1 = y.d + att.k1 * y.xi1;
    let e2 = y.mu + att.k2 * y.xi2;
    let v = e1 * e1 + att.c1 * e2 * e2;

    let w1 = two * e1 * att.k1;
    let w2 = two * att.c1 * e2 * att.k2;
    let a = [w1 * b1[0] + w2 * b2[0], w1 * b1[1] + w2 * b2[1]];
    let b0 = two * e1 * (y.xi1 + att.k1 * drift1) + two * att.c1 * e2 * (y.xi2 + att.k2 * drift2);
    let b = -(b0 + clf.epsilon * v) - clf.robustness_margin;

    // Partials with respect to (k1, k2, c1). The xi values and their rates
    // do not depend on the attention parameters.
    let dw1 = [two * (e1 + att.k1 * y.xi1), T::zero(), T::zero()];
    let dw2 = [
        T::zero(),
        two * att.c1 * (e2 + att.k2 * y.xi2),
        two * e2 * att.k2,
    ];
    let mut da_datt = [[T::zero(); 3]; 2];
    for p_idx in 0..3 {
        da_datt[0][p_idx] = dw1[p_idx] * b1[0] + dw2[p_idx] * b2[0];
        da_datt[1][p_idx] = dw1[p_idx] * b1[1] + dw2[p_idx] * b2[1];
    }
    let db0 = [
        two * y.xi1 * (y.xi1 + att.k1 * drift1) + two * e1 * drift1,
        two * att.c1 * (y.xi2 * (y.xi2 + att.k2 * drift2) + e2 * drift2),
        two * e2 * (y.xi2 + att.k2 * drift2),
    ];
    let dv = [two * e1 * y.xi1, two * att.c1 * e2 * y.xi2, e2 * e2];
    let mut db_datt = [T::zero(); 3];
    for p_idx in 0..3 {
        db_datt[p_idx] = -(db0[p_idx] + clf.epsilon * dv[p_idx]);
    }

    Ok(ConstraintData {
        a,
        b,
        v,
        da_datt,
        db_datt,
    })
}

/// Affine form (a, b) of the decay constraint, curvature from the path.
pub fn attclf_constraint_coeffs<T: Scalar>(
    att: &AttentionParams<T>,
    clf: &ClfConfig<T>,
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
) -> Result<([T; 2], T)> {
    let data = constraint_at_kappa(att, clf, params, path.curvature_at(state.s), state)?;
    Ok((data.a, data.b))
}

/// Assemble the relaxed CLF-QP over (accel, steer rate, slack).
pub fn clf_qp_at_kappa<T: Scalar>(
    att: &AttentionParams<T>,
    clf: &ClfConfig<T>,
    params: &VehicleParams<T>,
    kappa: T,
    state: &VehicleState<T>,
) -> Result<QpProblem<T>> {
    let data = constraint_at_kappa(att, clf, params, kappa, state)?;
    Ok(assemble_qp(clf, params, state, &data))
}

pub fn clf_qp<T: Scalar>(
    att: &AttentionParams<T>,
    clf: &ClfConfig<T>,
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
) -> Result<QpProblem<T>> {
    clf_qp_at_kappa(att, clf, params, path.curvature_at(state.s), state)
}

pub(crate) fn assemble_qp<T: Scalar>(
    clf: &ClfConfig<T>,
    params: &VehicleParams<T>,
    state: &VehicleState<T>,
    data: &ConstraintData<T>,
) -> QpProblem<T> {
    let u_ref = clf.control_ref.unwrap_or_else(|| {
        let a_ref = clamp(
            clf.speed_gain * (clf.v_ref - state.v),
            params.accel_bounds.0,
            params.accel_bounds.1,
        );
        ControlInput::new(a_ref, T::zero())
    });
    let hessian = Mat::diag(&[clf.control_cost.0, clf.control_cost.1, clf.slack_weight]);
    let linear = vec![
        -clf.control_cost.0 * u_ref.accel,
        -clf.control_cost.1 * u_ref.steer_rate,
        T::zero(),
    ];
    let ineq_mat = Mat::from_rows(&[vec![data.a[0], data.a[1], -T::one()]]);
    QpProblem {
        hessian,
        linear,
        ineq_mat,
        ineq_rhs: vec![data.b],
        lower: vec![params.accel_bounds.0, params.steer_rate_bounds.0, T::zero()],
        upper: vec![
            params.accel_bounds.1,
            params.steer_rate_bounds.1,
            T::infinity(),
        ],
    }
}

/// Per-step controller diagnostics for episode logs.
#[derive(Clone, Copy, Debug)]
pub struct ControlDiag<T> {
    /// Candidate value V at the current state.
    pub v: T,
    /// Slack taken by the decay constraint.
    pub slack: T,
    /// Whether the decay constraint is active at the optimum.
    pub active: bool,
}

/// Everything a CLF controller needs per step.
pub struct ControllerCtx<'a, T> {
    pub vehicle: &'a VehicleParams<T>,
    pub path: &'a PathSpec<T>,
    pub clf: &'a ClfConfig<T>,
}

fn extract_control<T: Scalar>(
    solution: &QpSolution<T>,
    data: &ConstraintData<T>,
    tols: &QpTolerances<T>,
) -> (ControlInput<T>, ControlDiag<T>) {
    let u = ControlInput::new(solution.primal[0], solution.primal[1]);
    let slack = solution.primal[2];
    let active = solution.duals_ineq[0] > tols.active;
    (
        u,
        ControlDiag {
            v: data.v,
            slack,
            active,
        },
    )
}

/// CLF-QP control with per-step attention parameters and an explicit
/// curvature (used when curvature itself is an uncertain estimate).
pub fn att_clf_control_at_kappa<T: Scalar>(
    ctx: &ControllerCtx<'_, T>,
    att: &AttentionParams<T>,
    kappa: T,
    state: &VehicleState<T>,
    warm: Option<&WarmStart<T>>,
) -> Result<(ControlInput<T>, ControlDiag<T>, WarmStart<T>)> {
    let tols = QpTolerances::default();
    let data = constraint_at_kappa(att, ctx.clf, ctx.vehicle, kappa, state)?;
    let problem = assemble_qp(ctx.clf, ctx.vehicle, state, &data);
    let solution = qp::solve_with(&problem, &tols, warm)?;
    if solution.status != QpStatus::Optimal {
        if std::env::var_os("QP_DEBUG_NONOPT").is_some() {
            eprintln!(
                "non-optimal controller QP: state {state:?} att {att:?} a {:?} b {:?} residual {:?} iters {}",
                data.a, data.b, solution.kkt_residual, solution.iterations
            );
        }
        return Err(crate::error::CoreError::QpGradient(format!(
            "controller QP did not reach optimality (residual {:.3e})",
            crate::scalar::as_f64(solution.kkt_residual)
        )));
    }
    let (u, diag) = extract_control(&solution, &data, &tols);
    let next_warm = WarmStart {
        primal: solution.primal.clone(),
        active: solution.active_rows(),
    };
    Ok((u, diag, next_warm))
}

/// CLF-QP control with per-step attention parameters.
pub fn att_clf_control<T: Scalar>(
    ctx: &ControllerCtx<'_, T>,
    att: &AttentionParams<T>,
    state: &VehicleState<T>,
) -> Result<(ControlInput<T>, ControlDiag<T>)> {
    let kappa = ctx.path.curvature_at(state.s);
    let (u, diag, _) = att_clf_control_at_kappa(ctx, att, kappa, state, None)?;
    Ok((u, diag))
}

/// Classical CLF-QP control: the same pipeline with constant attention.
pub fn classical_clf_control<T: Scalar>(
    ctx: &ControllerCtx<'_, T>,
    fixed_att: &AttentionParams<T>,
    state: &VehicleState<T>,
) -> Result<(ControlInput<T>, ControlDiag<T>)> {
    att_clf_control(ctx, fixed_att, state)
}
