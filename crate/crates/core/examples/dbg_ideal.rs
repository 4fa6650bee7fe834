use attclf::clf::{clf_qp_at_kappa, AttentionParams, ClfConfig};
use attclf::controllers::collect_expert;
use attclf::learner::{imitation_loss, FeatureConfig};
use attclf::nmpc::NmpcConfig;
use attclf::path::{make_track, RandomTrackParams, TrackKind};
use attclf::qp;
use attclf::sim::EpisodeConfig;
use attclf::vehicle::{ControlInput, VehicleParams};

fn main() {
    let vparams = VehicleParams::<f64>::default();
    let clf = ClfConfig::default();
    let tp = RandomTrackParams { n_segments: 14, length_range: (18.0, 35.0), kappa_max: 0.08, straight_prob: 0.25 };
    let paths: Vec<(u64, _)> = (0..4u64)
        .map(|i| (i, make_track(&TrackKind::Random(tp.clone()), 11 + i, 1.5, Some(5.0)).unwrap()))
        .collect();
    let collect_cfg = EpisodeConfig { max_steps: 100, seed: 101, random_s0: true, ..EpisodeConfig::default() };
    let (dataset, _) = collect_expert(&NmpcConfig::default(), &vparams, &FeatureConfig::default(), &paths, &collect_cfg, 36);

    let bands = [(0.0, 0.05), (0.05, 0.15), (0.15, 0.3), (0.3, 0.9)];
    let k_grid: Vec<f64> = (1..=30).map(|i| i as f64 * 0.1).collect();
    let c_grid: Vec<f64> = (1..=30).map(|i| i as f64 * 0.2).collect();
    let w = (0.1, 10.0);
    for (lo, hi) in bands {
        let samples: Vec<_> = dataset.samples.iter()
            .filter(|s| s.state.d.abs() >= lo && s.state.d.abs() < hi)
            .take(400)
            .collect();
        if samples.is_empty() { continue; }
        // joint grid over (k1, c1) with k2 = 1; then per-best k1 report
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &k1 in &k_grid {
            for &c1 in &c_grid {
                let att = AttentionParams::new(k1, 1.0, c1);
                let mut loss = 0.0;
                for s in &samples {
                    let path = &paths.iter().find(|(id, _)| *id == s.path_id).unwrap().1;
                    let kappa = path.curvature_at(s.state.s);
                    let Ok(problem) = clf_qp_at_kappa(&att, &clf, &vparams, kappa, &s.state) else { continue };
                    let Ok(sol) = qp::solve(&problem) else { continue };
                    let pred = ControlInput::new(sol.primal[0], sol.primal[1]);
                    loss += imitation_loss(&pred, &s.expert, w);
                }
                if loss < best.0 { best = (loss, k1, c1); }
            }
        }
        println!("|d| in [{lo},{hi}): n={} best k1 = {:.2}, c1 = {:.2} (loss {:.4})",
                 samples.len(), best.1, best.2, best.0 / samples.len() as f64);
    }
}
