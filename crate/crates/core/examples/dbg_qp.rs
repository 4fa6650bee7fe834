use attclf::clf::*;
use attclf::controllers::*;
use attclf::learner::{AttentionHead, FeatureConfig, NoiseStd};
use attclf::path::PathSpec;
use attclf::sim::{benchmark, ControllerFactory, EpisodeConfig};
use attclf::vehicle::VehicleParams;

fn main() {
    std::env::set_var("QP_DEBUG_NONOPT", "1");
    let params = VehicleParams::<f64>::default();
    let paths = vec![(0u64, PathSpec::new(vec![(800.0, 0.02)], None, 1.5).unwrap())];
    let clf = ClfConfig::default();
    let head = AttentionHead::init(FeatureConfig::default(), &[8, 8], true, 1);
    let noise = NoiseStd { d: 0.05, mu: 0.01, v: 0.0, delta: 0.0 };
    let suite: Vec<(String, ControllerFactory<f64>)> = vec![
        ("att_est".into(),
         att_clf_estimated_factory(head, clf.clone(), params.clone(), noise,
            UncertaintyConfig { n_samples: 5, ..UncertaintyConfig::default() })),
    ];
    let cfg = EpisodeConfig { max_steps: 20, ..EpisodeConfig::default() };
    let rows = benchmark(&suite, &params, &paths, &cfg, 3);
    for r in &rows { for l in &r.logs { println!("{} ep{}: {:?} rows {}", r.name, l.episode, l.termination, l.rows.len()); } }
}
