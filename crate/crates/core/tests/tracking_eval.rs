use proptest::prelude::*;

use stabletrack::dataio::{Dataset, Observation, Split};
use stabletrack::diffnet::{NetConfig, Network};
use stabletrack::geom::{Box3D, PointCloud, Vec3};
use stabletrack::rng::stream;
use stabletrack::synth::{build_dataset, simulate_tracklet, CategorySpec, DatasetConfig, Frame, MotionSpec, SceneSpec, Tracklet};
use stabletrack::trackeval::{
    evaluate_split, precision_auc, success_auc, track_tracklet, EvalConfig, NetworkPredictor, OracleStub, PreviousBoxStub,
};

const PERFECT: f64 = 10000.0 / 101.0;

/// Thresholds counted by hand: `k/100` strictly below the IoU.
fn success_oracle(ious: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..=100 {
        let th = k as f64 / 100.0;
        total += ious.iter().filter(|&&v| v > th).count() as f64 / ious.len() as f64;
    }
    total / 101.0 * 100.0
}

proptest! {
    #[test]
    fn success_matches_threshold_count(ious in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        prop_assert!((success_auc(&ious).unwrap() - success_oracle(&ious)).abs() < 1e-9);
    }

    #[test]
    fn improving_frames_never_lowers_metrics(
        base in prop::collection::vec((0.0f64..=1.0, 0.0f64..3.0), 1..20),
        gain in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 20),
    ) {
        let ious: Vec<f64> = base.iter().map(|b| b.0).collect();
        let cds: Vec<f64> = base.iter().map(|b| b.1).collect();
        let better_iou: Vec<f64> = ious.iter().zip(&gain).map(|(v, g)| v + (1.0 - v) * g.0).collect();
        let better_cd: Vec<f64> = cds.iter().zip(&gain).map(|(v, g)| v * g.1).collect();
        prop_assert!(success_auc(&better_iou).unwrap() >= success_auc(&ious).unwrap());
        prop_assert!(precision_auc(&better_cd).unwrap() >= precision_auc(&cds).unwrap());
    }
}

fn tracklet(seed: u64, motion: MotionSpec, frames: usize) -> Tracklet {
    simulate_tracklet(&CategorySpec::carbox(), &motion, &SceneSpec::default(), frames, &mut stream(seed, &[])).unwrap()
}

fn static_motion() -> MotionSpec {
    MotionSpec { speed: [0.0, 0.0], yaw_rate: [0.0, 0.0], process_noise: 0.0 }
}

#[test]
fn oracle_stub_is_perfect() {
    let trk = tracklet(1, MotionSpec::default(), 6);
    let res = track_tracklet(&OracleStub, &trk, &EvalConfig::default(), &mut stream(0, &[])).unwrap();
    assert_eq!(res.len(), 5);
    assert_eq!(res[0].frame, 1);
    for r in &res {
        assert!((r.iou - 1.0).abs() < 1e-9 && r.center_distance == 0.0);
    }
}

#[test]
fn previous_box_on_static_tracklet_matches_oracle() {
    let trk = tracklet(2, static_motion(), 6);
    let res = track_tracklet(&PreviousBoxStub, &trk, &EvalConfig::default(), &mut stream(0, &[])).unwrap();
    let ious: Vec<f64> = res.iter().map(|r| r.iou).collect();
    let cds: Vec<f64> = res.iter().map(|r| r.center_distance).collect();
    assert!((success_auc(&ious).unwrap() - PERFECT).abs() < 1e-9);
    assert!((precision_auc(&cds).unwrap() - PERFECT).abs() < 1e-9);
}

#[test]
fn sparse_search_carries_previous_box() {
    let mut trk = tracklet(3, MotionSpec::default(), 4);
    // frame 2 loses every point near the target
    let far = Vec3::new(500.0, 500.0, 0.0);
    trk.frames[2] = Frame { cloud: PointCloud::new(vec![far; 20]), ..trk.frames[2].clone() };
    let res = track_tracklet(&OracleStub, &trk, &EvalConfig::default(), &mut stream(0, &[])).unwrap();
    assert!(!res[0].fallback && res[1].fallback && !res[2].fallback);
    assert_eq!(res[1].predicted, trk.frames[1].gt);
}

#[test]
fn oracle_over_test_split_scores_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { tracklets: 2, frames: 4, ..DatasetConfig::default() };
    build_dataset(&cfg, 9, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let (report, results) = evaluate_split(&OracleStub, &ds, Split::Test, &EvalConfig::default(), 0, "fp").unwrap();
    assert_eq!(results.len(), 8);
    assert_eq!(report.categories.len(), 4);
    for row in report.rows() {
        assert!((row.success() - PERFECT).abs() < 1e-9 && (row.precision() - PERFECT).abs() < 1e-9);
    }
    assert_eq!(report.aggregate(Observation::Unseen).unwrap().frames(), 6);
    assert_eq!(report.aggregate(Observation::All).unwrap().frames(), 24);
}

#[test]
fn network_evaluation_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { tracklets: 1, frames: 4, ..DatasetConfig::default() };
    build_dataset(&cfg, 4, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let net_cfg = NetConfig { feature_dim: 8, n_template: 32, n_search: 64, n_proposals: 4, ..NetConfig::default() };
    let net = Network::new(net_cfg, 2).unwrap();
    let eval = EvalConfig { n_template: 32, n_search: 64, ..EvalConfig::default() };
    let (a, ra) = evaluate_split(&NetworkPredictor(&net), &ds, Split::Test, &eval, 7, "fp").unwrap();
    let (b, _) = evaluate_split(&NetworkPredictor(&net), &ds, Split::Test, &eval, 7, "fp").unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for r in ra.iter().flat_map(|r| &r.frames) {
        assert!((0.0..=1.0).contains(&r.iou) && r.center_distance >= 0.0);
        let _: Box3D = r.predicted;
    }
}
