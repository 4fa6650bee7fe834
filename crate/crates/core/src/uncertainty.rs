//! Set-based propagation of state-estimate uncertainty into control space.
//!
//! A state estimate (mean and log-variance over lateral offset, heading
//! error, and curvature) is sampled, every sample is pushed through the
//! CLF-QP in a batch, and the resulting control samples are turned into a
//! density by Gaussian kernel density estimation. The final control is the
//! prior-weighted density argmax over a probe set. Mode seeking over the
//! sample set is what smooths the control under noisy estimates: a single
//! flipped sample no longer flips the command.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clf::{AttentionParams, ControlDiag, ControllerCtx};
use crate::error::{CoreError, Result};
use crate::scalar::{cast, Scalar};
use crate::vehicle::{ControlInput, VehicleParams, VehicleState};

/// Gaussian state estimate over (d, mu, kappa), with the sample count used
/// when propagating.
#[derive(Clone, Copy, Debug)]
pub struct StateDistribution<T> {
    pub mean: [T; 3],
    pub logvar: [T; 3],
    pub n_samples: usize,
}

/// One state sample: the base state with (d, mu) replaced, and the sampled
/// curvature carried alongside (paths stay immutable; the constraint builder
/// takes curvature explicitly).
#[derive(Clone, Copy, Debug)]
pub struct StateSample<T> {
    pub state: VehicleState<T>,
    pub kappa: T,
}

/// Draw `dist.n_samples` samples around the estimate. Sample 0 is always the
/// mean, so a single-sample propagation degenerates to the point estimate.
pub fn sample_states<T: Scalar>(
    dist: &StateDistribution<T>,
    base: &VehicleState<T>,
    rng: &mut ChaCha8Rng,
) -> Vec<StateSample<T>> {
    let n = dist.n_samples.max(1);
    let std: Vec<T> = dist
        .logvar
        .iter()
        .map(|&lv| (lv * cast(0.5)).exp())
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let draw = |rng: &mut ChaCha8Rng, j: usize| -> T {
            let z: f64 = rng.sample(StandardNormal);
            dist.mean[j] + std[j] * cast(z)
        };
        let (d, mu, kappa) = if i == 0 {
            (dist.mean[0], dist.mean[1], dist.mean[2])
        } else {
            (draw(rng, 0), draw(rng, 1), draw(rng, 2))
        };
        let mut state = *base;
        state.d = d;
        state.mu = mu;
        out.push(StateSample { state, kappa });
    }
    out
}

/// Controls and diagnostics for the samples that survived propagation.
#[derive(Clone, Debug)]
pub struct Propagation<T> {
    pub controls: Vec<ControlInput<T>>,
    pub diags: Vec<ControlDiag<T>>,
    /// Samples dropped because their state sat on the path singularity.
    pub dropped: usize,
}

/// Push every sample through the CLF-QP as one batch (the attention
/// parameters come from the shared observation, so they are common to the
/// batch). Order is preserved across surviving samples.
pub fn propagate<T: Scalar>(
    ctx: &ControllerCtx<'_, T>,
    att: &AttentionParams<T>,
    samples: &[StateSample<T>],
) -> Result<Propagation<T>> {
    // Constraint assembly first; samples on the path singularity drop out.
    let mut problems = Vec::with_capacity(samples.len());
    let mut datas = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for sample in samples {
        match crate::clf::constraint_at_kappa(att, ctx.clf, ctx.vehicle, sample.kappa, &sample.state)
        {
            Ok(data) => {
                problems.push(crate::clf::assemble_qp(ctx.clf, ctx.vehicle, &sample.state, &data));
                datas.push(data);
            }
            Err(CoreError::Singularity { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if problems.is_empty() {
        return Err(CoreError::AllSamplesSingular(samples.len()));
    }

    let tols = crate::qp::QpTolerances::default();
    let solutions = crate::qp::solve_batch(&problems);
    let mut controls = Vec::with_capacity(problems.len());
    let mut diags = Vec::with_capacity(problems.len());
    for (sol, data) in solutions.into_iter().zip(&datas) {
        let sol = sol?;
        controls.push(ControlInput::new(sol.primal[0], sol.primal[1]));
        diags.push(ControlDiag {
            v: data.v,
            slack: sol.primal[2],
            active: sol.duals_ineq[0] > tols.active,
        });
    }
    Ok(Propagation {
        controls,
        diags,
        dropped,
    })
}

/// Control-space density from samples: product Gaussian kernel with
/// per-dimension bandwidths.
#[derive(Clone, Debug)]
pub struct ControlDistribution<T> {
    pub samples: Vec<[T; 2]>,
    pub bandwidth: [T; 2],
}

/// Per-dimension bandwidth: sample standard deviation scaled by
/// `N^(-1/(dim+4))` with dim = 2, floored to avoid degenerate spikes when the
/// QP maps every sample onto the same saturated bound.
pub fn kde<T: Scalar>(controls: &[ControlInput<T>]) -> ControlDistribution<T> {
    let samples: Vec<[T; 2]> = controls.iter().map(|u| [u.accel, u.steer_rate]).collect();
    let n = samples.len().max(1);
    let n_t: T = cast(n as f64);
    let floor: T = cast(1e-4);
    let scott = n_t.powf(cast(-1.0 / 6.0));
    let mut bandwidth = [floor, floor];
    if n >= 2 {
        for j in 0..2 {
            let mean = samples.iter().map(|s| s[j]).sum::<T>() / n_t;
            let ss = samples
                .iter()
                .map(|s| (s[j] - mean) * (s[j] - mean))
                .sum::<T>();
            let std = (ss / (n_t - T::one())).sqrt();
            bandwidth[j] = (std * scott).max(floor);
        }
    }
    ControlDistribution { samples, bandwidth }
}

impl<T: Scalar> ControlDistribution<T> {
    /// Density value at a control point.
    pub fn density(&self, u: &[T; 2]) -> T {
        let n: T = cast(self.samples.len() as f64);
        let norm = T::one()
            / (cast::<T>(2.0) * T::PI() * self.bandwidth[0] * self.bandwidth[1]);
        let half: T = cast(0.5);
        let mut acc = T::zero();
        for s in &self.samples {
            let z0 = (u[0] - s[0]) / self.bandwidth[0];
            let z1 = (u[1] - s[1]) / self.bandwidth[1];
            acc = acc + (-half * (z0 * z0 + z1 * z1)).exp();
        }
        acc * norm / n
    }
}

/// Default probe set: the control samples themselves plus a uniform grid
/// over the control box.
pub fn default_probes<T: Scalar>(
    dist: &ControlDistribution<T>,
    params: &VehicleParams<T>,
    grid_per_axis: usize,
) -> Vec<[T; 2]> {
    let mut probes = dist.samples.clone();
    let g = grid_per_axis.max(2);
    let (a_lo, a_hi) = params.accel_bounds;
    let (w_lo, w_hi) = params.steer_rate_bounds;
    let gm1: T = cast((g - 1) as f64);
    for i in 0..g {
        let fi: T = cast(i as f64);
        let ua = a_lo + (a_hi - a_lo) * fi / gm1;
        for j in 0..g {
            let fj: T = cast(j as f64);
            let uw = w_lo + (w_hi - w_lo) * fj / gm1;
            probes.push([ua, uw]);
        }
    }
    probes
}

/// Argmax of prior times density over the probe set. Ties break toward the
/// smaller control norm, then lexicographically, so duplicated probes cannot
/// change the outcome.
pub fn select_control<T: Scalar>(
    dist: &ControlDistribution<T>,
    prior: impl Fn(&[T; 2]) -> T,
    probes: &[[T; 2]],
) -> ControlInput<T> {
    assert!(!probes.is_empty(), "probe set must be nonempty");
    let mut best = probes[0];
    let mut best_score = prior(&probes[0]) * dist.density(&probes[0]);
    for p in &probes[1..] {
        let score = prior(p) * dist.density(p);
        let better = score > best_score || (score == best_score && tie_less(p, &best));
        if better {
            best = *p;
            best_score = score;
        }
    }
    ControlInput::new(best[0], best[1])
}

fn tie_less<T: Scalar>(a: &[T; 2], b: &[T; 2]) -> bool {
    let na = a[0] * a[0] + a[1] * a[1];
    let nb = b[0] * b[0] + b[1] * b[1];
    if na != nb {
        return na < nb;
    }
    if a[0] != b[0] {
        return a[0] < b[0];
    }
    a[1] < b[1]
}
