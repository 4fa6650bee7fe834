//! Nonlinear MPC expert: single-shooting trajectory optimization over the
//! bicycle dynamics, solved by projected gradient descent with analytic
//! gradients accumulated in reverse through the RK4 rollout.
//!
//! This is the label generator for imitation training and the upper-bound
//! row of the closed-loop benchmark. It favors reliability over speed: short
//! horizons, monotone descent via backtracking, warm starts across steps.

use crate::error::CoreError;
use crate::path::PathSpec;
use crate::scalar::{cast, Scalar};
use crate::vehicle::{
    dynamics_at_kappa, dynamics_jacobian_at_kappa, ControlInput, VehicleParams, VehicleState,
};

/// Cost weights and solver knobs.
#[derive(Clone, Debug)]
pub struct NmpcConfig<T> {
    pub horizon: usize,
    /// Prediction step, independent of the control loop period.
    pub dt: T,
    pub w_d: T,
    pub w_mu: T,
    pub w_v: T,
    pub w_accel: T,
    pub w_steer: T,
    /// Multiplier on the state cost of the final predicted state.
    pub terminal_weight: T,
    pub v_ref: T,
    /// Quadratic penalty on predicted speed/steering-angle bound violations,
    /// keeping the unclamped prediction model honest about actuator limits.
    pub bound_penalty: T,
    pub max_iters: usize,
    /// Initial gradient step; adapts by growth/shrink factors.
    pub step0: T,
    pub step_grow: T,
    pub step_shrink: T,
    /// Relative cost-improvement threshold for convergence.
    pub convergence_tol: T,
    /// Cost added per truncated step when the rollout hits the path
    /// singularity.
    pub singularity_penalty: T,
}

impl<T: Scalar> Default for NmpcConfig<T> {
    fn default() -> Self {
        NmpcConfig {
            horizon: 20,
            dt: cast(0.1),
            w_d: cast(10.0),
            w_mu: cast(5.0),
            w_v: cast(1.0),
            w_accel: cast(0.1),
            w_steer: cast(1.0),
            terminal_weight: cast(5.0),
            v_ref: cast(8.0),
            bound_penalty: cast(50.0),
            max_iters: 200,
            step0: cast(0.05),
            step_grow: cast(1.5),
            step_shrink: cast(0.4),
            convergence_tol: cast(1e-6),
            singularity_penalty: cast(1e4),
        }
    }
}

impl<T: Scalar> NmpcConfig<T> {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.horizon < 2 {
            return Err(CoreError::invalid("horizon", "need at least 2 steps"));
        }
        if !(self.dt > T::zero()) {
            return Err(CoreError::invalid("dt", "must be positive"));
        }
        for (name, w) in [
            ("w_d", self.w_d),
            ("w_mu", self.w_mu),
            ("w_v", self.w_v),
            ("w_accel", self.w_accel),
            ("w_steer", self.w_steer),
            ("terminal_weight", self.terminal_weight),
        ] {
            if w < T::zero() {
                return Err(CoreError::invalid(
                    "weights",
                    format!("{name} must be nonnegative"),
                ));
            }
        }
        Ok(())
    }
}

/// Result of one receding-horizon solve.
#[derive(Clone, Debug)]
pub struct NmpcSolution<T> {
    pub first: ControlInput<T>,
    pub sequence: Vec<ControlInput<T>>,
    pub cost: T,
    pub iterations: usize,
    /// Accepted cost after every iteration (non-increasing by construction).
    pub cost_trace: Vec<T>,
    /// The optimized rollout hit the path singularity and was truncated.
    pub truncated: bool,
}

type Mat5<T> = [[T; 5]; 5];
type Mat52<T> = [[T; 2]; 5];

fn mat5_mul<T: Scalar>(a: &Mat5<T>, b: &Mat5<T>) -> Mat5<T> {
    let mut out = [[T::zero(); 5]; 5];
    for i in 0..5 {
        for k in 0..5 {
            let aik = a[i][k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..5 {
                out[i][j] = out[i][j] + aik * b[k][j];
            }
        }
    }
    out
}

fn mat5_mul52<T: Scalar>(a: &Mat5<T>, b: &Mat52<T>) -> Mat52<T> {
    let mut out = [[T::zero(); 2]; 5];
    for i in 0..5 {
        for k in 0..5 {
            let aik = a[i][k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..2 {
                out[i][j] = out[i][j] + aik * b[k][j];
            }
        }
    }
    out
}

fn mat5_t_vec<T: Scalar>(a: &Mat5<T>, v: &[T; 5]) -> [T; 5] {
    let mut out = [T::zero(); 5];
    for i in 0..5 {
        for j in 0..5 {
            out[j] = out[j] + a[i][j] * v[i];
        }
    }
    out
}

fn mat52_t_vec<T: Scalar>(e: &Mat52<T>, v: &[T; 5]) -> [T; 2] {
    let mut out = [T::zero(); 2];
    for i in 0..5 {
        out[0] = out[0] + e[i][0] * v[i];
        out[1] = out[1] + e[i][1] * v[i];
    }
    out
}

struct StepRecord<T> {
    next: VehicleState<T>,
    d_next_d_state: Mat5<T>,
    d_next_d_control: Mat52<T>,
}

/// One RK4 step of the prediction model together with its Jacobians,
/// chained through the four stages.
fn step_with_jacobians<T: Scalar>(
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
    control: &ControlInput<T>,
    dt: T,
) -> crate::error::Result<StepRecord<T>> {
    let half = dt * cast(0.5);
    let sixth = dt / cast(6.0);
    let two = cast::<T>(2.0);

    let eval = |x: &[T; 5]| -> crate::error::Result<([T; 5], Mat5<T>, Mat52<T>)> {
        let st = VehicleState::from_array(*x);
        let kappa = path.curvature_at(st.s);
        let f = dynamics_at_kappa(params, kappa, &st, control)?;
        let (a, b) = dynamics_jacobian_at_kappa(params, kappa, &st)?;
        Ok((f, a, b))
    };

    let x0 = state.to_array();
    let (k1, a1, b1) = eval(&x0)?;
    let x1 = add_scaled(&x0, &k1, half);
    let (k2, a2, b2) = eval(&x1)?;
    let x2 = add_scaled(&x0, &k2, half);
    let (k3, a3, b3) = eval(&x2)?;
    let x3 = add_scaled(&x0, &k3, dt);
    let (k4, a4, b4) = eval(&x3)?;

    let mut next = x0;
    for i in 0..5 {
        next[i] = next[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }

    // Stage sensitivities: Di = d ki / d x0, Ei = d ki / d u.
    let d1 = a1;
    let d2 = mat5_mul(&a2, &plus_scaled_identity(&d1, half));
    let d3 = mat5_mul(&a3, &plus_scaled_identity(&d2, half));
    let d4 = mat5_mul(&a4, &plus_scaled_identity(&d3, dt));

    let e1 = b1;
    let e2 = add52(&mat5_mul52(&a2, &scale52(&e1, half)), &b2);
    let e3 = add52(&mat5_mul52(&a3, &scale52(&e2, half)), &b3);
    let e4 = add52(&mat5_mul52(&a4, &scale52(&e3, dt)), &b4);

    let mut d_next_d_state = [[T::zero(); 5]; 5];
    let mut d_next_d_control = [[T::zero(); 2]; 5];
    for i in 0..5 {
        for j in 0..5 {
            let ident = if i == j { T::one() } else { T::zero() };
            d_next_d_state[i][j] =
                ident + sixth * (d1[i][j] + two * d2[i][j] + two * d3[i][j] + d4[i][j]);
        }
        for j in 0..2 {
            d_next_d_control[i][j] =
                sixth * (e1[i][j] + two * e2[i][j] + two * e3[i][j] + e4[i][j]);
        }
    }

    Ok(StepRecord {
        next: VehicleState::from_array(next),
        d_next_d_state,
        d_next_d_control,
    })
}

fn add_scaled<T: Scalar>(x: &[T; 5], k: &[T; 5], h: T) -> [T; 5] {
    let mut out = *x;
    for i in 0..5 {
        out[i] = out[i] + h * k[i];
    }
    out
}

/// I + h * m
fn plus_scaled_identity<T: Scalar>(m: &Mat5<T>, h: T) -> Mat5<T> {
    let mut out = [[T::zero(); 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            out[i][j] = if i == j { T::one() } else { T::zero() } + h * m[i][j];
        }
    }
    out
}

fn scale52<T: Scalar>(e: &Mat52<T>, h: T) -> Mat52<T> {
    let mut out = *e;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v = *v * h;
        }
    }
    out
}

fn add52<T: Scalar>(a: &Mat52<T>, b: &Mat52<T>) -> Mat52<T> {
    let mut out = *a;
    for i in 0..5 {
        for j in 0..2 {
            out[i][j] = out[i][j] + b[i][j];
        }
    }
    out
}

fn state_cost<T: Scalar>(cfg: &NmpcConfig<T>, params: &VehicleParams<T>, x: &VehicleState<T>) -> T {
    let dv = x.v - cfg.v_ref;
    let mut c = cfg.w_d * x.d * x.d + cfg.w_mu * x.mu * x.mu + cfg.w_v * dv * dv;
    let over_hi = (x.delta - params.steer_angle_bounds.1).max(T::zero());
    let over_lo = (params.steer_angle_bounds.0 - x.delta).max(T::zero());
    let over_v_hi = (x.v - params.speed_bounds.1).max(T::zero());
    let over_v_lo = (params.speed_bounds.0 - x.v).max(T::zero());
    c = c + cfg.bound_penalty
        * (over_hi * over_hi + over_lo * over_lo + over_v_hi * over_v_hi + over_v_lo * over_v_lo);
    c
}

fn state_cost_grad<T: Scalar>(
    cfg: &NmpcConfig<T>,
    params: &VehicleParams<T>,
    x: &VehicleState<T>,
) -> [T; 5] {
    let two = cast::<T>(2.0);
    let mut g = [T::zero(); 5];
    g[1] = two * cfg.w_d * x.d;
    g[2] = two * cfg.w_mu * x.mu;
    g[3] = two * cfg.w_v * (x.v - cfg.v_ref);
    if x.delta > params.steer_angle_bounds.1 {
        g[4] = g[4] + two * cfg.bound_penalty * (x.delta - params.steer_angle_bounds.1);
    }
    if x.delta < params.steer_angle_bounds.0 {
        g[4] = g[4] - two * cfg.bound_penalty * (params.steer_angle_bounds.0 - x.delta);
    }
    if x.v > params.speed_bounds.1 {
        g[3] = g[3] + two * cfg.bound_penalty * (x.v - params.speed_bounds.1);
    }
    if x.v < params.speed_bounds.0 {
        g[3] = g[3] - two * cfg.bound_penalty * (params.speed_bounds.0 - x.v);
    }
    g
}

struct Rollout<T> {
    cost: T,
    records: Vec<StepRecord<T>>,
    truncated: bool,
}

fn rollout<T: Scalar>(
    cfg: &NmpcConfig<T>,
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    start: &VehicleState<T>,
    controls: &[ControlInput<T>],
    with_jacobians: bool,
) -> Rollout<T> {
    let mut cost = T::zero();
    let mut records = Vec::with_capacity(if with_jacobians { controls.len() } else { 0 });
    let mut state = *start;
    let mut truncated = false;
    for (k, u) in controls.iter().enumerate() {
        let stage_weight = if k + 1 == controls.len() {
            cfg.terminal_weight
        } else {
            T::one()
        };
        let step = if with_jacobians {
            step_with_jacobians(params, path, &state, u, cfg.dt)
        } else {
            crate::vehicle::step_rk4_raw(params, path, &state, u, cfg.dt).map(|next| StepRecord {
                next,
                d_next_d_state: [[T::zero(); 5]; 5],
                d_next_d_control: [[T::zero(); 2]; 5],
            })
        };
        match step {
            Ok(rec) => {
                state = rec.next;
                cost = cost
                    + stage_weight * state_cost(cfg, params, &state)
                    + cfg.w_accel * u.accel * u.accel
                    + cfg.w_steer * u.steer_rate * u.steer_rate;
                if with_jacobians {
                    records.push(rec);
                }
            }
            Err(_) => {
                let remaining = cast::<T>((controls.len() - k) as f64);
                cost = cost + cfg.singularity_penalty * remaining;
                truncated = true;
                break;
            }
        }
    }
    Rollout {
        cost,
        records,
        truncated,
    }
}

/// Reverse sweep: gradient of the rollout cost with respect to each control.
fn rollout_gradient<T: Scalar>(
    cfg: &NmpcConfig<T>,
    params: &VehicleParams<T>,
    controls: &[ControlInput<T>],
    records: &[StepRecord<T>],
) -> Vec<[T; 2]> {
    let two = cast::<T>(2.0);
    let mut grad = vec![[T::zero(); 2]; controls.len()];
    let mut lambda = [T::zero(); 5];
    for k in (0..records.len()).rev() {
        let stage_weight = if k + 1 == controls.len() {
            cfg.terminal_weight
        } else {
            T::one()
        };
        let sc_grad = state_cost_grad(cfg, params, &records[k].next);
        for i in 0..5 {
            lambda[i] = lambda[i] + stage_weight * sc_grad[i];
        }
        let gu = mat52_t_vec(&records[k].d_next_d_control, &lambda);
        grad[k][0] = gu[0] + two * cfg.w_accel * controls[k].accel;
        grad[k][1] = gu[1] + two * cfg.w_steer * controls[k].steer_rate;
        lambda = mat5_t_vec(&records[k].d_next_d_state, &lambda);
    }
    // Controls beyond a truncation point keep their running-cost gradient.
    for k in records.len()..controls.len() {
        grad[k][0] = two * cfg.w_accel * controls[k].accel;
        grad[k][1] = two * cfg.w_steer * controls[k].steer_rate;
    }
    grad
}

fn project<T: Scalar>(params: &VehicleParams<T>, controls: &mut [ControlInput<T>]) {
    for u in controls.iter_mut() {
        *u = u.clamped(params);
    }
}

/// Receding-horizon solve from `state`, optionally warm-started with the
/// previous call's sequence (shifted by one step internally).
pub fn solve_nmpc<T: Scalar>(
    cfg: &NmpcConfig<T>,
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
    warm: Option<&[ControlInput<T>]>,
) -> NmpcSolution<T> {
    let h = cfg.horizon;
    let mut controls: Vec<ControlInput<T>> = match warm {
        Some(prev) if prev.len() == h => {
            let mut shifted: Vec<_> = prev[1..].to_vec();
            shifted.push(*prev.last().unwrap());
            shifted
        }
        _ => vec![ControlInput::zero(); h],
    };
    project(params, &mut controls);

    let mut roll = rollout(cfg, params, path, state, &controls, true);
    let mut cost = roll.cost;
    let mut grad = rollout_gradient(cfg, params, &controls, &roll.records);
    let mut step = cfg.step0;
    let mut cost_trace = vec![cost];
    let mut iterations = 0;
    let mut small_improvements = 0;

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        // Backtracking on the projected gradient step; only accept decreases,
        // so the accepted cost trace is non-increasing.
        let mut accepted: Option<(Vec<ControlInput<T>>, T)> = None;
        let mut trial_step = step;
        for _ in 0..40 {
            let mut trial: Vec<ControlInput<T>> = controls
                .iter()
                .zip(&grad)
                .map(|(u, g)| {
                    ControlInput::new(u.accel - trial_step * g[0], u.steer_rate - trial_step * g[1])
                })
                .collect();
            project(params, &mut trial);
            let trial_cost = rollout(cfg, params, path, state, &trial, false).cost;
            if trial_cost < cost {
                accepted = Some((trial, trial_cost));
                break;
            }
            trial_step = trial_step * cfg.step_shrink;
            if trial_step < cast(1e-14) {
                break;
            }
        }
        let Some((next_controls, next_cost)) = accepted else {
            break;
        };
        let improvement = cost - next_cost;
        let next_roll = rollout(cfg, params, path, state, &next_controls, true);
        let next_grad = rollout_gradient(cfg, params, &next_controls, &next_roll.records);

        // Spectral (Barzilai-Borwein) step for the next iteration: plain
        // gradient steps crawl on this objective because early controls act
        // through the whole horizon while late ones barely matter.
        let mut du_du = T::zero();
        let mut du_dg = T::zero();
        for ((nu, ou), (ng, og)) in next_controls.iter().zip(&controls).zip(next_grad.iter().zip(&grad)) {
            let du = [nu.accel - ou.accel, nu.steer_rate - ou.steer_rate];
            let dg = [ng[0] - og[0], ng[1] - og[1]];
            du_du = du_du + du[0] * du[0] + du[1] * du[1];
            du_dg = du_dg + du[0] * dg[0] + du[1] * dg[1];
        }
        step = if du_dg > cast(1e-30) {
            crate::scalar::clamp(du_du / du_dg, cast(1e-8), cast(1e3))
        } else {
            (trial_step * cfg.step_grow).min(cast(10.0))
        };

        controls = next_controls;
        cost = next_cost;
        cost_trace.push(cost);
        roll = next_roll;
        grad = next_grad;

        // Stop after two consecutive negligible improvements; a single small
        // spectral step is not evidence of convergence.
        if improvement <= cfg.convergence_tol * (T::one() + cost.abs()) {
            small_improvements += 1;
            if small_improvements >= 2 {
                break;
            }
        } else {
            small_improvements = 0;
        }
    }

    NmpcSolution {
        first: controls[0],
        sequence: controls,
        cost,
        iterations,
        cost_trace,
        truncated: roll.truncated,
    }
}

/// Stateful receding-horizon wrapper that carries the warm-start sequence.
pub struct NmpcController<T> {
    pub cfg: NmpcConfig<T>,
    warm: Option<Vec<ControlInput<T>>>,
}

impl<T: Scalar> NmpcController<T> {
    pub fn new(cfg: NmpcConfig<T>) -> Self {
        NmpcController { cfg, warm: None }
    }

    pub fn step(
        &mut self,
        params: &VehicleParams<T>,
        path: &PathSpec<T>,
        state: &VehicleState<T>,
    ) -> NmpcSolution<T> {
        let solution = solve_nmpc(&self.cfg, params, path, state, self.warm.as_deref());
        self.warm = Some(solution.sequence.clone());
        solution
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}
