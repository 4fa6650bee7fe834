//! Ready-made controller factories for the benchmark suite.
//!
//! Each builder returns a [`ControllerFactory`] producing a fresh per-episode
//! closure, so per-episode state (MPC warm starts, sampling streams) never
//! leaks across episodes or controllers. The state-observing controllers all
//! consume the shared observation-noise stream through [`featurize`] with
//! the same draw count per step, so paired episodes see identical noise
//! realizations regardless of which controller is running.

use rand_chacha::ChaCha8Rng;

use crate::clf::{
    att_clf_control_at_kappa, classical_clf_control, AttentionParams, ClfConfig, ControllerCtx,
};
use crate::learner::{featurize, AttentionHead, FeatureConfig, NoiseStd};
use crate::nmpc::{NmpcConfig, NmpcController};
use crate::scalar::Scalar;
use crate::sim::{ControllerFactory, StepOutput};
use crate::uncertainty::{default_probes, kde, propagate, sample_states, select_control};
use crate::vehicle::{ControlInput, VehicleParams, VehicleState};
use rand::SeedableRng;

/// Constant zero control; baseline and harness tests.
pub fn zero_factory<'a, T: Scalar>() -> ControllerFactory<'a, T> {
    Box::new(|_, _| Box::new(|_, _, _| Ok(StepOutput::plain(ControlInput::zero()))))
}

/// Receding-horizon MPC expert, warm-started within each episode.
pub fn nmpc_factory<'a, T: Scalar>(
    cfg: NmpcConfig<T>,
    vparams: VehicleParams<T>,
) -> ControllerFactory<'a, T> {
    Box::new(move |_, path| {
        let mut controller = NmpcController::new(cfg.clone());
        let vp = vparams.clone();
        Box::new(move |_, state, _| {
            let sol = controller.step(&vp, path, state);
            Ok(StepOutput::plain(sol.first))
        })
    })
}

/// Classical CLF-QP with constant attention. The observed state is the true
/// state plus the configured additive noise (zero noise reproduces the
/// true-state baseline row).
pub fn fixed_clf_factory<'a, T: Scalar>(
    clf: ClfConfig<T>,
    vparams: VehicleParams<T>,
    att: AttentionParams<T>,
    noise: NoiseStd<T>,
) -> ControllerFactory<'a, T> {
    Box::new(move |_, path| {
        let clf = clf.clone();
        let vp = vparams.clone();
        let feat = FeatureConfig {
            noise,
            ..FeatureConfig::default()
        };
        Box::new(move |_, state, rng| {
            let z = featurize(&feat, path, state, rng);
            let observed = VehicleState::new(
                state.s,
                z.state_obs[0],
                z.state_obs[1],
                z.state_obs[2],
                z.state_obs[3],
            );
            let ctx = ControllerCtx {
                vehicle: &vp,
                path,
                clf: &clf,
            };
            let (u, diag) = classical_clf_control(&ctx, &att, &observed)?;
            Ok(StepOutput {
                control: u,
                v_lyap: Some(diag.v),
                slack: Some(diag.slack),
                att: None,
                active: Some(diag.active),
            })
        })
    })
}

/// Learned attention head driving the CLF-QP from the true state with
/// noise-free features.
pub fn att_clf_true_factory<'a, T: Scalar>(
    head: AttentionHead<T>,
    clf: ClfConfig<T>,
    vparams: VehicleParams<T>,
) -> ControllerFactory<'a, T> {
    Box::new(move |_, path| {
        let mut head = head.clone();
        head.features.noise = NoiseStd::default();
        let clf = clf.clone();
        let vp = vparams.clone();
        Box::new(move |_, state, rng| {
            let z = featurize(&head.features, path, state, rng);
            let (att, _) = head.forward(&z)?;
            let ctx = ControllerCtx {
                vehicle: &vp,
                path,
                clf: &clf,
            };
            let kappa = path.curvature_at(state.s);
            let (u, diag, _) = att_clf_control_at_kappa(&ctx, &att, kappa, state, None)?;
            Ok(StepOutput {
                control: u,
                v_lyap: Some(diag.v),
                slack: Some(diag.slack),
                att: Some(att),
                active: Some(diag.active),
            })
        })
    })
}

/// Sampling and probing configuration for the estimated-state controller.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyConfig {
    /// State samples pushed through the QP per step.
    pub n_samples: usize,
    /// Probe grid resolution per control axis.
    pub probe_grid: usize,
    /// Base seed of the internal sampling stream.
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            n_samples: 20,
            probe_grid: 21,
            seed: 0,
        }
    }
}

/// Learned head on noisy features; the QP consumes the head's state estimate
/// (d, mu, kappa), uncertainty is propagated by sampling the estimate,
/// solving the batch, and picking the density argmax under a uniform prior.
///
/// The sampling stream is internal and derived from (seed, episode), so the
/// harness noise stream stays aligned with the other controllers.
pub fn att_clf_estimated_factory<'a, T: Scalar>(
    head: AttentionHead<T>,
    clf: ClfConfig<T>,
    vparams: VehicleParams<T>,
    noise: NoiseStd<T>,
    unc: UncertaintyConfig,
) -> ControllerFactory<'a, T> {
    Box::new(move |episode, path| {
        let mut head = head.clone();
        head.features.noise = noise;
        let clf = clf.clone();
        let vp = vparams.clone();
        let mut sample_rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive2(
            unc.seed,
            episode,
            crate::seeds::tag::SAMPLES,
        ));
        let n_samples = unc.n_samples;
        let probe_grid = unc.probe_grid;
        Box::new(move |_, state, rng| {
            let z = featurize(&head.features, path, state, rng);
            let (att, est) = head.forward(&z)?;
            let mut est = est.expect("estimated-state controller needs state heads");
            est.n_samples = n_samples;
            // Curvature estimates must stay in the representable band
            // |kappa| * half_width < 1, like every real path does.
            let kappa_cap = crate::scalar::cast::<T>(0.95) / path.lane_half_width();
            est.mean[2] = crate::scalar::clamp(est.mean[2], -kappa_cap, kappa_cap);
            let mut samples = sample_states(&est, state, &mut sample_rng);
            for sample in samples.iter_mut() {
                sample.kappa = crate::scalar::clamp(sample.kappa, -kappa_cap, kappa_cap);
            }
            let ctx = ControllerCtx {
                vehicle: &vp,
                path,
                clf: &clf,
            };
            let prop = propagate(&ctx, &att, &samples)?;
            let dist = kde(&prop.controls);
            let probes = default_probes(&dist, &vp, probe_grid);
            let u = select_control(&dist, |_| T::one(), &probes);
            let diag = prop.diags[0];
            Ok(StepOutput {
                control: u,
                v_lyap: Some(diag.v),
                slack: Some(diag.slack),
                att: Some(att),
                active: Some(diag.active),
            })
        })
    })
}

/// Roll the MPC expert closed-loop over the paths and record one labeled
/// sample per control step. Features are stored noise-free; training adds
/// its own noise. Returns the dataset and the expert's mean |d| across all
/// recorded steps.
///
/// Episodes ending in the path singularity are logged and excluded; the
/// harness-aligned noise stream is consumed step by step even though the
/// stored features are clean, so the sample states match what any paired
/// controller would have seen.
pub fn collect_expert<T: Scalar>(
    nmpc_cfg: &NmpcConfig<T>,
    vparams: &VehicleParams<T>,
    features: &FeatureConfig<T>,
    paths: &[(u64, crate::path::PathSpec<T>)],
    episode_cfg: &crate::sim::EpisodeConfig<T>,
    episodes: usize,
) -> (crate::learner::ExpertDataset<T>, T) {
    use crate::learner::{ExpertDataset, ExpertSample};

    let clean = FeatureConfig {
        noise: NoiseStd::default(),
        ..features.clone()
    };
    let mut samples = Vec::new();
    let mut abs_d_acc = T::zero();
    let mut abs_d_count = 0usize;
    for ep in 0..episodes as u64 {
        let (path_id, path) = &paths[ep as usize % paths.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive2(
            episode_cfg.seed,
            ep,
            crate::seeds::tag::OBS_NOISE,
        ));
        let mut state = crate::sim::initial_state(episode_cfg, path, ep);
        let mut expert = NmpcController::new(nmpc_cfg.clone());
        for k in 0..episode_cfg.max_steps {
            let z = featurize(&clean, path, &state, &mut rng);
            let sol = expert.step(vparams, path, &state);
            let u = sol.first.clamped(vparams);
            samples.push(ExpertSample {
                state,
                features: z,
                expert: u,
                path_id: *path_id,
                t: episode_cfg.dt * crate::scalar::cast(k as f64),
            });
            abs_d_acc = abs_d_acc + state.d.abs();
            abs_d_count += 1;
            match crate::vehicle::step_rk4(vparams, path, &state, &u, episode_cfg.dt) {
                Ok(next) => state = next,
                Err(_) => break,
            }
            if state.d.abs() > episode_cfg.intervention_threshold {
                break;
            }
        }
    }
    let mean_dev = abs_d_acc / crate::scalar::cast(abs_d_count.max(1) as f64);
    (
        ExpertDataset {
            samples,
            lookaheads: features.lookaheads.clone(),
        },
        mean_dev,
    )
}
