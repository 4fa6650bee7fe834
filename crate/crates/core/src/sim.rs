//! Closed-loop episode rollouts, evaluation metrics, and paired benchmarking.
//!
//! Episodes are driven by a controller closure called once per step; the
//! harness clamps its output, advances the plant one RK4 step, and records
//! everything a later analysis needs. Initial states and observation-noise
//! streams are derived from (seed, episode index), never from the controller,
//! so different controllers see bitwise-identical episodes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clf::AttentionParams;
use crate::error::Result;
use crate::path::PathSpec;
use crate::scalar::{as_f64, cast, Scalar};
use crate::seeds::{self, tag};
use crate::vehicle::{step_rk4, ControlInput, VehicleParams, VehicleState};

/// Why an episode ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxSteps,
    /// |d| exceeded the intervention threshold.
    Intervention,
    /// The plant hit the 1 - d*kappa singularity.
    Singularity,
    ControllerError(String),
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::MaxSteps => "max_steps",
            Termination::Intervention => "intervention",
            Termination::Singularity => "singularity",
            Termination::ControllerError(_) => "controller_error",
        }
    }
}

/// Controller output for one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOutput<T> {
    pub control: ControlInput<T>,
    pub v_lyap: Option<T>,
    pub slack: Option<T>,
    pub att: Option<AttentionParams<T>>,
    pub active: Option<bool>,
}

impl<T> StepOutput<T> {
    pub fn plain(control: ControlInput<T>) -> Self
    where
        T: Scalar,
    {
        StepOutput {
            control,
            v_lyap: None,
            slack: None,
            att: None,
            active: None,
        }
    }
}

/// Per-step controller closure: (time, state, observation-noise rng).
pub type StepFn<'a, T> =
    Box<dyn FnMut(T, &VehicleState<T>, &mut ChaCha8Rng) -> Result<StepOutput<T>> + Send + 'a>;

/// Builds a fresh controller for an episode index and its assigned path
/// (controllers may carry per-episode state such as warm starts).
pub type ControllerFactory<'a, T> =
    Box<dyn Fn(u64, &'a PathSpec<T>) -> StepFn<'a, T> + Send + Sync + 'a>;

/// Episode setup: integration step, horizon, initial-state ranges,
/// intervention threshold, and the base seed all streams derive from.
#[derive(Clone, Debug)]
pub struct EpisodeConfig<T> {
    pub dt: T,
    pub max_steps: usize,
    pub d0_range: (T, T),
    pub mu0_range: (T, T),
    pub v0_range: (T, T),
    /// Draw the starting arc length uniformly along the track.
    pub random_s0: bool,
    /// |d| above this ends the episode as a failure.
    pub intervention_threshold: T,
    pub seed: u64,
}

impl<T: Scalar> Default for EpisodeConfig<T> {
    fn default() -> Self {
        EpisodeConfig {
            dt: cast(0.05),
            max_steps: 300,
            d0_range: (cast(-0.7), cast(0.7)),
            mu0_range: (cast(-0.2), cast(0.2)),
            v0_range: (cast(6.0), cast(10.0)),
            random_s0: false,
            intervention_threshold: cast(1.5),
            seed: 0,
        }
    }
}

/// One recorded control step. `solve_time` is wall clock around the
/// controller call, excluded from determinism comparisons.
#[derive(Clone, Debug)]
pub struct StepRow<T> {
    pub t: T,
    pub state: VehicleState<T>,
    pub control: ControlInput<T>,
    pub v_lyap: Option<T>,
    pub slack: Option<T>,
    pub att: Option<AttentionParams<T>>,
    pub active: Option<bool>,
    pub solve_time: f64,
}

/// Time-indexed record of one closed-loop rollout.
#[derive(Clone, Debug)]
pub struct EpisodeLog<T> {
    pub rows: Vec<StepRow<T>>,
    pub termination: Termination,
    pub path_id: u64,
    pub episode: u64,
}

/// Deterministic initial state for an episode index.
pub fn initial_state<T: Scalar>(
    cfg: &EpisodeConfig<T>,
    path: &PathSpec<T>,
    episode: u64,
) -> VehicleState<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(cfg.seed, episode, tag::INIT_STATE));
    let mut uniform = |lo: T, hi: T| -> T {
        let z: f64 = rng.gen_range(0.0..1.0);
        lo + (hi - lo) * cast(z)
    };
    let d0 = uniform(cfg.d0_range.0, cfg.d0_range.1);
    let mu0 = uniform(cfg.mu0_range.0, cfg.mu0_range.1);
    let v0 = uniform(cfg.v0_range.0, cfg.v0_range.1);
    let s_draw = uniform(T::zero(), path.total_length());
    let s0 = if cfg.random_s0 { s_draw } else { T::zero() };
    VehicleState::new(s0, d0, mu0, v0, T::zero())
}

/// Run one closed-loop episode.
pub fn run_episode<T: Scalar>(
    controller: &mut StepFn<'_, T>,
    params: &VehicleParams<T>,
    path: &PathSpec<T>,
    path_id: u64,
    cfg: &EpisodeConfig<T>,
    episode: u64,
) -> EpisodeLog<T> {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds::derive2(cfg.seed, episode, tag::OBS_NOISE));
    let mut state = initial_state(cfg, path, episode);
    let mut rows = Vec::with_capacity(cfg.max_steps);
    let mut termination = Termination::MaxSteps;

    for k in 0..cfg.max_steps {
        let t = cfg.dt * cast(k as f64);
        let started = Instant::now();
        let output = match controller(t, &state, &mut noise_rng) {
            Ok(out) => out,
            Err(e) => {
                termination = Termination::ControllerError(e.to_string());
                break;
            }
        };
        let solve_time = started.elapsed().as_secs_f64();
        let control = output.control.clamped(params);
        rows.push(StepRow {
            t,
            state,
            control,
            v_lyap: output.v_lyap,
            slack: output.slack,
            att: output.att,
            active: output.active,
            solve_time,
        });
        match step_rk4(params, path, &state, &control, cfg.dt) {
            Ok(next) => state = next,
            Err(_) => {
                termination = Termination::Singularity;
                break;
            }
        }
        if state.d.abs() > cfg.intervention_threshold {
            termination = Termination::Intervention;
            break;
        }
    }
    EpisodeLog {
        rows,
        termination,
        path_id,
        episode,
    }
}

/// Aggregate closed-loop metrics over a set of logs.
#[derive(Clone, Debug)]
pub struct Metrics<T> {
    /// Mean |d| over every logged step of every episode (step-weighted).
    pub mean_deviation: T,
    /// (threshold, fraction of steps with |d| below it).
    pub deviation_recall: Vec<(T, T)>,
    /// Mean controller wall time per step, seconds.
    pub mean_solve_time: f64,
    pub interventions: usize,
    pub episodes_completed: usize,
    pub episodes: usize,
    pub steps: usize,
}

/// Thresholds 0..=2 m in 0.05 m steps.
pub fn default_lambda_grid<T: Scalar>() -> Vec<T> {
    (0..=40).map(|i| cast(i as f64 * 0.05)).collect()
}

pub fn compute_metrics<T: Scalar>(logs: &[EpisodeLog<T>], lambda_grid: &[T]) -> Metrics<T> {
    assert!(!logs.is_empty(), "metrics need at least one episode log");
    let mut abs_d: Vec<T> = Vec::new();
    let mut time_acc = 0.0;
    for log in logs {
        for row in &log.rows {
            abs_d.push(row.state.d.abs());
            time_acc += row.solve_time;
        }
    }
    let steps = abs_d.len();
    let steps_t: T = cast(steps.max(1) as f64);
    let mean_deviation = abs_d.iter().copied().sum::<T>() / steps_t;
    let deviation_recall = lambda_grid
        .iter()
        .map(|&lam| {
            let below = abs_d.iter().filter(|&&d| d < lam).count();
            (lam, cast::<T>(below as f64) / steps_t)
        })
        .collect();
    Metrics {
        mean_deviation,
        deviation_recall,
        mean_solve_time: time_acc / steps.max(1) as f64,
        interventions: logs
            .iter()
            .filter(|l| l.termination == Termination::Intervention)
            .count(),
        episodes_completed: logs
            .iter()
            .filter(|l| l.termination == Termination::MaxSteps)
            .count(),
        episodes: logs.len(),
        steps,
    }
}

/// One benchmark row: a named controller with its metrics and raw logs.
pub struct BenchRow<T> {
    pub name: String,
    pub metrics: Metrics<T>,
    pub logs: Vec<EpisodeLog<T>>,
}

/// Run the paired benchmark: every controller sees identical episodes
/// (same path, same initial state, same observation-noise stream). One
/// warm-up episode per controller is discarded so lazy initialization does
/// not pollute the timing column.
pub fn benchmark<'a, T: Scalar>(
    suite: &[(String, ControllerFactory<'a, T>)],
    params: &VehicleParams<T>,
    paths: &'a [(u64, PathSpec<T>)],
    cfg: &EpisodeConfig<T>,
    episodes: usize,
) -> Vec<BenchRow<T>> {
    assert!(!paths.is_empty());
    let mut rows = Vec::with_capacity(suite.len());
    for (name, factory) in suite {
        {
            let (pid, path) = &paths[0];
            let mut warmup = factory(0, path);
            let _ = run_episode(&mut warmup, params, path, *pid, cfg, 0);
        }
        let logs: Vec<EpisodeLog<T>> = (0..episodes as u64)
            .map(|ep| {
                let (pid, path) = &paths[ep as usize % paths.len()];
                let mut controller = factory(ep, path);
                run_episode(&mut controller, params, path, *pid, cfg, ep)
            })
            .collect();
        let metrics = compute_metrics(&logs, &default_lambda_grid());
        rows.push(BenchRow {
            name: name.clone(),
            metrics,
            logs,
        });
    }
    rows
}

/// Attention statistics binned by |d| (equal-count bins), plus the Spearman
/// rank correlation between k1 and |d|.
#[derive(Clone, Debug)]
pub struct ProfileRow<T> {
    pub bin_lo: T,
    pub bin_hi: T,
    pub mean_abs_d: T,
    pub mean_k1: T,
    pub mean_k2: T,
    pub mean_c1: T,
    pub count: usize,
}

pub fn attention_profile<T: Scalar>(
    logs: &[EpisodeLog<T>],
    bins: usize,
) -> (Vec<ProfileRow<T>>, T) {
    let mut pts: Vec<(T, AttentionParams<T>)> = Vec::new();
    for log in logs {
        for row in &log.rows {
            if let Some(att) = row.att {
                pts.push((row.state.d.abs(), att));
            }
        }
    }
    if pts.is_empty() {
        return (Vec::new(), T::zero());
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal));
    let bins = bins.max(1).min(pts.len());
    let mut rows = Vec::with_capacity(bins);
    let per = pts.len() / bins;
    let rem = pts.len() % bins;
    let mut start = 0;
    for b in 0..bins {
        let len = per + usize::from(b < rem);
        if len == 0 {
            continue;
        }
        let chunk = &pts[start..start + len];
        start += len;
        let n: T = cast(chunk.len() as f64);
        let mean = |f: &dyn Fn(&(T, AttentionParams<T>)) -> T| -> T {
            chunk.iter().map(|p| f(p)).sum::<T>() / n
        };
        rows.push(ProfileRow {
            bin_lo: chunk.first().unwrap().0,
            bin_hi: chunk.last().unwrap().0,
            mean_abs_d: mean(&|p| p.0),
            mean_k1: mean(&|p| p.1.k1),
            mean_k2: mean(&|p| p.1.k2),
            mean_c1: mean(&|p| p.1.c1),
            count: chunk.len(),
        });
    }
    let xs: Vec<T> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<T> = pts.iter().map(|p| p.1.k1).collect();
    (rows, spearman(&xs, &ys))
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side has no variance.
pub fn spearman<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks<T: Scalar>(vals: &[T]) -> Vec<T> {
    let n = vals.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(core::cmp::Ordering::Equal));
    let mut out = vec![T::zero(); n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        // average rank over the tie group, 1-based
        let avg: T = cast(((i + 1 + j + 1) as f64) / 2.0);
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let n: T = cast(xs.len() as f64);
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        sxy = sxy + (x - mx) * (y - my);
        sxx = sxx + (x - mx) * (x - mx);
        syy = syy + (y - my) * (y - my);
    }
    if sxx == T::zero() || syy == T::zero() {
        return T::zero();
    }
    sxy / (sxx * syy).sqrt()
}

/// Episode log CSV. The trailing solve-time column is the only
/// non-deterministic field.
pub fn episode_csv<T: Scalar>(log: &EpisodeLog<T>) -> String {
    let mut out =
        String::from("t,s,d,mu,v,delta,u_accel,u_steer_rate,v_lyap,slack,active,k1,k2,c1,solve_time_s\n");
    for row in &log.rows {
        let st = &row.state;
        let opt = |v: Option<T>| v.map(|x| format!("{x}")).unwrap_or_default();
        let att = row
            .att
            .map(|a| format!("{},{},{}", a.k1, a.k2, a.c1))
            .unwrap_or_else(|| ",,".into());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.6e}",
            row.t,
            st.s,
            st.d,
            st.mu,
            st.v,
            st.delta,
            row.control.accel,
            row.control.steer_rate,
            opt(row.v_lyap),
            opt(row.slack),
            row.active.map(|a| if a { "1" } else { "0" }).unwrap_or(""),
            att,
            row.solve_time,
        );
    }
    out
}

/// Metrics table CSV; one row per controller.
pub fn metrics_csv<T: Scalar>(rows: &[(String, &Metrics<T>)]) -> String {
    let mut out = String::from(
        "controller,mean_deviation,episodes,episodes_completed,interventions,steps,mean_solve_time_s\n",
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{:.6e}",
            m.mean_deviation, m.episodes, m.episodes_completed, m.interventions, m.steps, m.mean_solve_time
        );
    }
    out
}

/// Deviation-recall curves CSV.
pub fn recall_csv<T: Scalar>(rows: &[(String, &Metrics<T>)]) -> String {
    let mut out = String::from("controller,lambda,recall\n");
    for (name, m) in rows {
        for &(lam, rec) in &m.deviation_recall {
            let _ = writeln!(out, "{name},{lam},{rec}");
        }
    }
    out
}

/// Attention profile CSV.
pub fn profile_csv<T: Scalar>(rows: &[ProfileRow<T>], spearman_k1: T) -> String {
    let mut out = String::from("bin_lo,bin_hi,mean_abs_d,mean_k1,mean_k2,mean_c1,count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.bin_lo, r.bin_hi, r.mean_abs_d, r.mean_k1, r.mean_k2, r.mean_c1, r.count
        );
    }
    let _ = writeln!(out, "# spearman_k1_vs_abs_d,{spearman_k1}");
    out
}

/// Human-readable benchmark summary.
pub fn summary_table<T: Scalar>(rows: &[(String, &Metrics<T>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>10} {:>13} {:>14}",
        "controller", "mean dev (m)", "episodes", "interventions", "infer time (s)"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{:<28} {:>12.4} {:>10} {:>13} {:>14.6}",
            name,
            as_f64(m.mean_deviation),
            m.episodes,
            m.interventions,
            m.mean_solve_time
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PathSpec;
    use approx::assert_abs_diff_eq;

    fn straight() -> PathSpec<f64> {
        PathSpec::new(vec![(2000.0, 0.0)], None, 1.5).unwrap()
    }

    fn zero_controller<'a>() -> StepFn<'a, f64> {
        Box::new(|_, _, _| Ok(StepOutput::plain(ControlInput::zero())))
    }

    #[test]
    fn zero_controller_on_center_runs_to_max_steps() {
        let cfg = EpisodeConfig {
            d0_range: (0.0, 0.0),
            mu0_range: (0.0, 0.0),
            v0_range: (8.0, 8.0),
            max_steps: 50,
            ..EpisodeConfig::default()
        };
        let mut c = zero_controller();
        let log = run_episode(
            &mut c,
            &VehicleParams::default(),
            &straight(),
            0,
            &cfg,
            0,
        );
        assert_eq!(log.termination, Termination::MaxSteps);
        assert_eq!(log.rows.len(), 50);
        assert!(log.rows.iter().all(|r| r.state.d == 0.0));
    }

    #[test]
    fn heading_offset_grows_until_intervention() {
        let cfg = EpisodeConfig {
            d0_range: (0.0, 0.0),
            mu0_range: (0.3, 0.3),
            v0_range: (8.0, 8.0),
            intervention_threshold: 1.0,
            max_steps: 300,
            ..EpisodeConfig::default()
        };
        let mut c = zero_controller();
        let log = run_episode(
            &mut c,
            &VehicleParams::default(),
            &straight(),
            0,
            &cfg,
            3,
        );
        assert_eq!(log.termination, Termination::Intervention);
        // |d| is monotone under constant heading offset on a straight road.
        for w in log.rows.windows(2) {
            assert!(w[1].state.d.abs() >= w[0].state.d.abs());
        }
        // Kinematic oracle for the time to reach the threshold:
        // d(t) = v sin(mu) t  ->  t* = 1.0 / (8 sin 0.3).
        let t_star = 1.0 / (8.0 * 0.3f64.sin());
        let steps_expected = (t_star / 0.05).ceil() as usize;
        assert!(
            (log.rows.len() as i64 - steps_expected as i64).abs() <= 1,
            "{} steps vs oracle {steps_expected}",
            log.rows.len()
        );
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let cfg = EpisodeConfig {
            max_steps: 40,
            ..EpisodeConfig::default()
        };
        let p = VehicleParams::default();
        let path = straight();
        let mut c1 = zero_controller();
        let mut c2 = zero_controller();
        let a = run_episode(&mut c1, &p, &path, 0, &cfg, 7);
        let b = run_episode(&mut c2, &p, &path, 0, &cfg, 7);
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.state, rb.state);
            assert_eq!(ra.control, rb.control);
        }
    }

    #[test]
    fn metrics_hand_checked() {
        let mk_row = |d: f64| StepRow {
            t: 0.0,
            state: VehicleState::new(0.0, d, 0.0, 8.0, 0.0),
            control: ControlInput::zero(),
            v_lyap: None,
            slack: None,
            att: None,
            active: None,
            solve_time: 0.0,
        };
        let log = EpisodeLog {
            rows: (0..10).map(|_| mk_row(0.1)).collect(),
            termination: Termination::MaxSteps,
            path_id: 0,
            episode: 0,
        };
        let m = compute_metrics(&[log], &[0.05, 0.2]);
        assert_abs_diff_eq!(m.mean_deviation, 0.1, epsilon = 1e-15);
        assert_eq!(m.deviation_recall[0], (0.05, 0.0));
        assert_eq!(m.deviation_recall[1], (0.2, 1.0));

        // Step weighting across logs: 10 steps at 0 plus 30 steps at 0.4.
        let log_a = EpisodeLog {
            rows: (0..10).map(|_| mk_row(0.0)).collect(),
            termination: Termination::MaxSteps,
            path_id: 0,
            episode: 0,
        };
        let log_b = EpisodeLog {
            rows: (0..30).map(|_| mk_row(0.4)).collect(),
            termination: Termination::MaxSteps,
            path_id: 0,
            episode: 1,
        };
        let m2 = compute_metrics(&[log_a, log_b], &[1.0]);
        assert_abs_diff_eq!(m2.mean_deviation, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn recall_monotone_in_lambda() {
        let cfg = EpisodeConfig {
            max_steps: 60,
            ..EpisodeConfig::default()
        };
        let mut c = zero_controller();
        let log = run_episode(
            &mut c,
            &VehicleParams::default(),
            &straight(),
            0,
            &cfg,
            11,
        );
        let m = compute_metrics(&[log], &default_lambda_grid());
        for w in m.deviation_recall.windows(2) {
            assert!(w[1].1 >= w[0].1);
            assert!((0.0..=1.0).contains(&w[1].1));
        }
    }

    #[test]
    fn metrics_permutation_invariant() {
        let cfg = EpisodeConfig {
            max_steps: 30,
            ..EpisodeConfig::default()
        };
        let p = VehicleParams::default();
        let path = straight();
        let logs: Vec<_> = (0..4)
            .map(|ep| {
                let mut c = zero_controller();
                run_episode(&mut c, &p, &path, 0, &cfg, ep)
            })
            .collect();
        let m1 = compute_metrics(&logs, &default_lambda_grid());
        let mut reversed: Vec<_> = logs.into_iter().rev().collect();
        let m2 = compute_metrics(&reversed, &default_lambda_grid());
        reversed.clear();
        assert_eq!(m1.mean_deviation, m2.mean_deviation);
        assert_eq!(m1.steps, m2.steps);
    }

    #[test]
    fn benchmark_pairs_initial_states() {
        let cfg = EpisodeConfig {
            max_steps: 10,
            ..EpisodeConfig::default()
        };
        let p = VehicleParams::default();
        let paths = vec![(0u64, straight())];
        let suite: Vec<(String, ControllerFactory<f64>)> = vec![
            (
                "zero_a".into(),
                Box::new(|_, _| -> StepFn<'_, f64> {
                    Box::new(|_, _, _| Ok(StepOutput::plain(ControlInput::zero())))
                }),
            ),
            (
                "zero_b".into(),
                Box::new(|_, _| -> StepFn<'_, f64> {
                    Box::new(|_, _, _| Ok(StepOutput::plain(ControlInput::new(0.1, 0.0))))
                }),
            ),
        ];
        let rows = benchmark(&suite, &p, &paths, &cfg, 5);
        assert_eq!(rows.len(), 2);
        for ep in 0..5 {
            let sa = rows[0].logs[ep].rows[0].state;
            let sb = rows[1].logs[ep].rows[0].state;
            assert_eq!(sa, sb, "episode {ep} not paired");
        }
    }

    #[test]
    fn attention_profile_flat_and_linear() {
        let mk_log = |k1_of_d: &dyn Fn(f64) -> f64| {
            let rows: Vec<StepRow<f64>> = (0..100)
                .map(|i| {
                    let d = i as f64 * 0.01;
                    StepRow {
                        t: 0.0,
                        state: VehicleState::new(0.0, d, 0.0, 8.0, 0.0),
                        control: ControlInput::zero(),
                        v_lyap: None,
                        slack: None,
                        att: Some(AttentionParams::new(k1_of_d(d), 1.0, 1.0)),
                        active: None,
                        solve_time: 0.0,
                    }
                })
                .collect();
            EpisodeLog {
                rows,
                termination: Termination::MaxSteps,
                path_id: 0,
                episode: 0,
            }
        };
        let (rows, rho) = attention_profile(&[mk_log(&|_| 1.0)], 5);
        assert_eq!(rows.len(), 5);
        assert_eq!(rho, 0.0);

        let (_, rho_lin) = attention_profile(&[mk_log(&|d| d)], 5);
        assert_abs_diff_eq!(rho_lin, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spearman_handles_ties() {
        let xs = [1.0, 1.0, 2.0, 3.0];
        let ys = [0.5, 0.5, 0.7, 0.9];
        let rho = spearman(&xs, &ys);
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);
        assert_eq!(spearman(&xs, &[2.0, 2.0, 2.0, 2.0]), 0.0);
    }

    #[test]
    fn csv_shapes() {
        let cfg = EpisodeConfig {
            max_steps: 5,
            ..EpisodeConfig::default()
        };
        let mut c = zero_controller();
        let log = run_episode(
            &mut c,
            &VehicleParams::default(),
            &straight(),
            0,
            &cfg,
            0,
        );
        let csv = episode_csv(&log);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("t,s,d,mu"));
        let m = compute_metrics(&[log], &default_lambda_grid());
        let named = [("zero".to_string(), &m)];
        assert!(metrics_csv(&named).lines().count() == 2);
        assert!(recall_csv(&named).lines().count() == 42);
    }
}
