use attclf::clf::ClfConfig;
use attclf::controllers::collect_expert;
use attclf::learner::*;
use attclf::nmpc::NmpcConfig;
use attclf::path::{make_track, RandomTrackParams, TrackKind};
use attclf::sim::EpisodeConfig;
use attclf::vehicle::VehicleParams;

fn main() {
    let vparams = VehicleParams::<f64>::default();
    let clf = ClfConfig::default();
    let tp = RandomTrackParams { n_segments: 14, length_range: (18.0, 35.0), kappa_max: 0.08, straight_prob: 0.25 };
    let paths: Vec<(u64, _)> = (0..4u64)
        .map(|i| (i, make_track(&TrackKind::Random(tp.clone()), 11 + i, 1.5, Some(5.0)).unwrap()))
        .collect();
    let collect_cfg = EpisodeConfig { max_steps: 100, seed: 101, random_s0: true, ..EpisodeConfig::default() };
    let (dataset, _) = collect_expert(&NmpcConfig::default(), &vparams, &FeatureConfig::default(), &paths, &collect_cfg, 12);
    let head = AttentionHead::init(FeatureConfig::default(), &[32, 32], true, 7);
    let cfg = TrainConfig { grad_clip: f64::INFINITY, ..TrainConfig::default() };
    let mut norms: Vec<f64> = Vec::new();
    for s in dataset.samples.iter().take(1200) {
        let path = &paths.iter().find(|(id, _)| *id == s.path_id).unwrap().1;
        if let Ok(sg) = sample_gradient(&head, s, &[0.0; 4], &cfg, &clf, &vparams, path) {
            norms.push(sg.grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        }
    }
    norms.sort_by(f64::total_cmp);
    let q = |p: f64| norms[((norms.len() - 1) as f64 * p) as usize];
    println!("n={} median {:.3} p90 {:.3} p99 {:.3} max {:.3}", norms.len(), q(0.5), q(0.9), q(0.99), norms[norms.len()-1]);
}
