//! Kinematic bicycle dynamics in path-relative coordinates.
//!
//! State is (s, d, mu, v, delta): arc length along the reference path,
//! lateral offset, local heading error, speed, steering angle. Controls are
//! acceleration and steering rate, entering the dynamics affinely.

use crate::error::{CoreError, Result};
use crate::path::PathSpec;
use crate::scalar::{as_f64, cast, clamp, wrap_angle, Scalar};

/// Geometry and actuation limits.
#[derive(Clone, Debug)]
pub struct VehicleParams<T> {
    /// Distance from the rear axle to the center of gravity.
    pub l_r: T,
    /// Distance from the front axle to the center of gravity.
    pub l_f: T,
    pub accel_bounds: (T, T),
    pub steer_rate_bounds: (T, T),
    pub steer_angle_bounds: (T, T),
    pub speed_bounds: (T, T),
    /// Minimum allowed value of 1 - d*kappa before the dynamics are declared
    /// singular.
    pub denom_tol: T,
}

impl<T: Scalar> Default for VehicleParams<T> {
    fn default() -> Self {
        VehicleParams {
            l_r: cast(1.4),
            l_f: cast(1.4),
            accel_bounds: (cast(-4.0), cast(3.0)),
            steer_rate_bounds: (cast(-0.5), cast(0.5)),
            steer_angle_bounds: (cast(-0.5), cast(0.5)),
            speed_bounds: (cast(0.0), cast(20.0)),
            denom_tol: cast(1e-3),
        }
    }
}

impl<T: Scalar> VehicleParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_r > T::zero() && self.l_f > T::zero()) {
            return Err(CoreError::invalid("l_r/l_f", "axle distances must be positive"));
        }
        let half_pi = T::FRAC_PI_2();
        for (name, (lo, hi)) in [
            ("accel_bounds", self.accel_bounds),
            ("steer_rate_bounds", self.steer_rate_bounds),
            ("steer_angle_bounds", self.steer_angle_bounds),
            ("speed_bounds", self.speed_bounds),
        ] {
            if !(lo < hi) {
                return Err(CoreError::invalid("bounds", format!("{name}: min must be below max")));
            }
        }
        if self.steer_angle_bounds.0 <= -half_pi || self.steer_angle_bounds.1 >= half_pi {
            return Err(CoreError::invalid(
                "steer_angle_bounds",
                "must be strictly inside (-pi/2, pi/2)",
            ));
        }
        Ok(())
    }
}

/// Path-relative vehicle state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState<T> {
    pub s: T,
    pub d: T,
    pub mu: T,
    pub v: T,
    pub delta: T,
}

impl<T: Scalar> VehicleState<T> {
    pub fn new(s: T, d: T, mu: T, v: T, delta: T) -> Self {
        VehicleState { s, d, mu, v, delta }
    }

    pub fn to_array(&self) -> [T; 5] {
        [self.s, self.d, self.mu, self.v, self.delta]
    }

    pub fn from_array(x: [T; 5]) -> Self {
        VehicleState {
            s: x[0],
            d: x[1],
            mu: x[2],
            v: x[3],
            delta: x[4],
        }
    }
}

/// Acceleration and steering-rate command.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlInput<T> {
    pub accel: T,
    pub steer_rate: T,
}

impl<T: Scalar> ControlInput<T> {
    pub fn new(accel: T, steer_rate: T) -> Self {
        ControlInput { accel, steer_rate }
    }

    pub fn zero() -> Self {
        ControlInput {
            accel: T::zero(),
            steer_rate: T::zero(),
        }
    }

    pub fn clamped(&self, params: &VehicleParams<T>) -> Self {
        ControlInput {
            accel: clamp(self.accel, params.accel_bounds.0, params.accel_bounds.1),
            steer_rate: clamp(
                self.steer_rate,
                params.steer_rate_bounds.0,
                params.steer_rate_bounds.1,
            ),
        }
    }
}

/// Slip angle beta = arctan(l_r / (l_r + l_f) * tan(delta)).
pub fn slip_angle<T: Scalar>(params: &VehicleParams<T>, delta: T) -> Result<T> {
    if delta.abs() >= T::FRAC_PI_2() {
        return Err(CoreError::SteeringDomain {
            delta: as_f64(delta),
        });
    }
    let ratio = params.l_r / (params.l_r + params.l_f);
    Ok((ratio * delta.tan()).atan())
}

/// Common subexpressions of the dynamics at one (state, curvature) point.
struct Kinematics<T> {
    denom: T,
    sin_mb: T,
    cos_mb: T,
    sin_b: T,
    cos_b: T,
    /// d beta / d delta.
    dbeta: T,
}

fn kinematics<T: Scalar>(
    params: &VehicleParams<T>,
    kappa: T,
    state: &VehicleState<T>,
) -> Result<Kinematics<T>> {
    let denom = T::one() - state.d * kappa;
    if denom <= params.denom_tol {
        return Err(CoreError::Singularity {
            denom: as_f64(denom),
        });
    }
    let beta = slip_angle(params, state.delta)?;
    let ratio = params.l_r / (params.l_r + params.l_f);
    let tan_d = state.delta.tan();
    let cos_d = state.delta.cos();
    // beta = atan(ratio * tan(delta))
    let dbeta = ratio / (cos_d * cos_d * (T::one() + ratio * ratio * tan_d * tan_d));
    let mb = state.mu + beta;
    Ok(Kinematics {
        denom,
        sin_mb: mb.sin(),
        cos_mb: mb.cos(),
        sin_b: beta.sin(),
        cos_b: beta.cos(),
        dbeta,
    })
}

/// State derivative (s_dot, d_dot, mu_dot, v_dot, delta_dot) at a given
/// curvature value. Affine in the control.
pub fn dynamics_at_kappa<T: Scalar>(
    params: &VehicleParams<T>,
    kappa: T,
    state: &VehicleState<T>,
    control: &ControlInput<T>,
) -> Result<[T; 5]> {
    let k = kinematics(params, kappa, state)?;
    let s_dot = state.v * k.cos_mb / k.denom;
    Ok([
        s_dot,
        state.v * k.sin_mb,
        state.v / params.l_r * k.sin_b - kappa * s_dot,
        control.accel,
        control.steer_rate,
    ])
}

/// State derivative with curvature looked up from the path at `state.s`.
pub fn dynamics<T: Scalar>(
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
    control: &ControlInput<T>,
) -> Result<[T; 5]> {
    dynamics_at_kappa(params, path.curvature_at(state.s), state, control)
}

/// Jacobians of the state derivative: A = d(xdot)/dx with the curvature held
/// locally constant (its arc-length derivative vanishes almost everywhere on
/// piecewise-constant profiles), and B = d(xdot)/du.
pub fn dynamics_jacobian_at_kappa<T: Scalar>(
    params: &VehicleParams<T>,
    kappa: T,
    state: &VehicleState<T>,
) -> Result<([[T; 5]; 5], [[T; 2]; 5])> {
    let k = kinematics(params, kappa, state)?;
    let v = state.v;
    let z = T::zero();

    let ds_dd = v * k.cos_mb * kappa / (k.denom * k.denom);
    let ds_dmu = -v * k.sin_mb / k.denom;
    let ds_dv = k.cos_mb / k.denom;
    let ds_ddelta = -v * k.sin_mb * k.dbeta / k.denom;

    let dd_dmu = v * k.cos_mb;
    let dd_dv = k.sin_mb;
    let dd_ddelta = v * k.cos_mb * k.dbeta;

    let dmu_dd = -kappa * ds_dd;
    let dmu_dmu = -kappa * ds_dmu;
    let dmu_dv = k.sin_b / params.l_r - kappa * ds_dv;
    let dmu_ddelta = v * k.cos_b * k.dbeta / params.l_r - kappa * ds_ddelta;

    let a = [
        [z, ds_dd, ds_dmu, ds_dv, ds_ddelta],
        [z, z, dd_dmu, dd_dv, dd_ddelta],
        [z, dmu_dd, dmu_dmu, dmu_dv, dmu_ddelta],
        [z, z, z, z, z],
        [z, z, z, z, z],
    ];
    let b = [
        [z, z],
        [z, z],
        [z, z],
        [T::one(), z],
        [z, T::one()],
    ];
    Ok((a, b))
}

/// Jacobians with curvature from the path.
pub fn dynamics_jacobian<T: Scalar>(
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
) -> Result<([[T; 5]; 5], [[T; 2]; 5])> {
    dynamics_jacobian_at_kappa(params, path.curvature_at(state.s), state)
}

/// One classic RK4 step with zero-order-hold control. Curvature is
/// re-evaluated at each sub-stage. Speed and steering angle are clamped to
/// their bounds afterwards and the heading error is wrapped to (-pi, pi].
pub fn step_rk4<T: Scalar>(
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
    control: &ControlInput<T>,
    dt: T,
) -> Result<VehicleState<T>> {
    let mut next = step_rk4_raw(params, path, state, control, dt)?;
    next.v = clamp(next.v, params.speed_bounds.0, params.speed_bounds.1);
    next.delta = clamp(
        next.delta,
        params.steer_angle_bounds.0,
        params.steer_angle_bounds.1,
    );
    next.mu = wrap_angle(next.mu);
    Ok(next)
}

/// RK4 step without actuator clamping; the prediction model used inside the
/// MPC expert, where smooth dependence on the inputs matters.
pub fn step_rk4_raw<T: Scalar>(
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    state: &VehicleState<T>,
    control: &ControlInput<T>,
    dt: T,
) -> Result<VehicleState<T>> {
    let half = dt * cast(0.5);
    let x0 = state.to_array();

    let eval = |x: [T; 5]| -> Result<[T; 5]> {
        let st = VehicleState::from_array(x);
        dynamics_at_kappa(params, path.curvature_at(st.s), &st, control)
    };

    let k1 = eval(x0)?;
    let k2 = eval(add_scaled(x0, &k1, half))?;
    let k3 = eval(add_scaled(x0, &k2, half))?;
    let k4 = eval(add_scaled(x0, &k3, dt))?;

    let sixth = dt / cast(6.0);
    let two = cast::<T>(2.0);
    let mut x = x0;
    for i in 0..5 {
        x[i] = x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    Ok(VehicleState::from_array(x))
}

fn add_scaled<T: Scalar>(x: [T; 5], k: &[T; 5], h: T) -> [T; 5] {
    let mut out = x;
    for i in 0..5 {
        out[i] = out[i] + h * k[i];
    }
    out
}
