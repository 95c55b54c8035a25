use sparsedet3d::losses::{total_loss, LossTerms, LossWeights};
use sparsedet3d::pipeline::io::{ingest, read_text_cloud, write_scene, CloudFormat};
use sparsedet3d::pipeline::{
    eval_map, run_toy_train, synth_scenes, Detection, Detector, RunConfig, SceneRecord, SynthSpec, Trainer,
};
use sparsedet3d::voxel::PointCloud;
use sparsedet3d::{Error, Matrix};

fn small_config() -> RunConfig {
    RunConfig {
        class_sizes: SynthSpec::default().classes.iter().map(|c| c.mean).collect(),
        stage_channels: vec![8, 8, 16, 16],
        blocks_per_stage: 1,
        highres_channels: 8,
        out_channels: 16,
        vote_hidden: 16,
        group_channels: 16,
        roi_channels_1: 8,
        roi_channels_2: 16,
        refine_hidden: 16,
        steps: 3,
        ..RunConfig::default()
    }
}

fn scenes(n: usize) -> Vec<SceneRecord> {
    synth_scenes(n, 5, &SynthSpec::default()).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = scenes(2);
    let config = RunConfig { lr: 0.0, weight_decay: 0.0, ..small_config() };
    let det = Detector::<f64>::new(config).unwrap();
    let before = det.checkpoint();
    let mut trainer = Trainer::new(det);
    trainer.train_step(&data).unwrap();
    let after = trainer.detector.checkpoint();
    // Running statistics move with the data; learned weights must not.
    for ((name, _, a), (_, _, b)) in before.tensors.iter().zip(&after.tensors) {
        if !name.contains("running") {
            assert_eq!(a, b, "{name} changed");
        }
    }
}

#[test]
fn clipped_gradient_respects_bound() {
    let data = scenes(2);
    let config = RunConfig { grad_clip: 0.01, ..small_config() };
    let mut trainer = Trainer::new(Detector::<f64>::new(config).unwrap());
    let r = trainer.train_step(&data).unwrap();
    assert!(r.grad_norm > 0.01);
    assert!(r.clipped_norm <= 0.01 * (1.0 + 1e-9));
}

#[test]
fn f64_training_is_deterministic() {
    let data = scenes(4);
    let trace = || {
        let (_, log) = run_toy_train::<f64>(&data, &small_config(), |_| {}).unwrap();
        log.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(trace(), trace());
}

#[test]
fn tau_decays_by_epoch() {
    let c = RunConfig::default();
    assert_eq!(c.tau(0), 0.15);
    assert_eq!(c.tau(9), 0.15);
    assert_eq!(c.tau(10), 0.13);
    assert_eq!(c.tau(40), 0.07);
    assert_eq!(c.tau(1000), c.tau_min);
}

#[test]
fn non_finite_loss_names_its_term() {
    let terms = LossTerms { cntr: f64::NAN, ..LossTerms::default() };
    match total_loss(&terms, &LossWeights::default()) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("cntr"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn empty_scene_detects_nothing() {
    let det = Detector::<f32>::new(small_config()).unwrap();
    let empty = PointCloud::new(Vec::new(), Some(Matrix::zeros(0, 3))).unwrap();
    assert!(det.detect(&empty).unwrap().is_empty());
}

#[test]
fn inference_is_repeatable() {
    let det = Detector::<f32>::new(RunConfig { score_min: 0.0, ..small_config() }).unwrap();
    let scene = &scenes(1)[0];
    let a = det.run_inference(scene).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, det.run_inference(scene).unwrap());
}

#[test]
fn ingest_handles_small_and_malformed_clouds() {
    assert!(read_text_cloud(&b""[..]).unwrap().is_empty());
    let three = read_text_cloud(&b"0 0 0 1 0 0\n1 0 0 0 1 0\n0 1 0 0 0 1\n"[..]).unwrap();
    assert_eq!(three.len(), 3);
    assert_eq!(three.feature_width(), 3);
    assert!(read_text_cloud(&b"0 0\n"[..]).is_err());
    assert!(read_text_cloud(&b"0 0 0 1\n0 0 0\n"[..]).is_err());
}

#[test]
fn scenes_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for (s, fmt) in scenes(2).iter().zip([CloudFormat::Text, CloudFormat::Binary]) {
        let path = write_scene(dir.path(), s, fmt).unwrap();
        let back = ingest(&path, fmt).unwrap();
        assert_eq!(back.scene_id, s.scene_id);
        assert_eq!(back.cloud.len(), s.cloud.len());
        assert_eq!(back.gt.len(), s.gt.len());
        for ((a, ca), (b, cb)) in back.gt.iter().zip(&s.gt) {
            assert_eq!(ca, cb);
            assert!(a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}

#[test]
fn synthetic_files_are_byte_identical() {
    let write = || {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for s in synth_scenes(3, 11, &SynthSpec::default()).unwrap() {
            let p = write_scene(dir.path(), &s, CloudFormat::Binary).unwrap();
            bytes.push(std::fs::read(&p).unwrap());
            bytes.push(std::fs::read(sparsedet3d::pipeline::io::sidecar_path(&p)).unwrap());
        }
        bytes
    };
    assert_eq!(write(), write());
}

#[test]
fn evaluation_of_trivial_predictions() {
    let data = scenes(3);
    let gts: Vec<_> = data.iter().map(|s| (s.scene_id.clone(), s.gt.clone())).collect();
    let exact: Vec<Detection> =
        data.iter().flat_map(|s| s.gt.iter().map(|(b, c)| Detection::new(&s.scene_id, *c, 0.9, b))).collect();
    let r = eval_map(&exact, &gts, 3, 0.5).unwrap();
    assert_eq!((r.map, r.recall), (1.0, 1.0));
    let none = eval_map(&[], &gts, 3, 0.5).unwrap();
    assert_eq!((none.map, none.recall), (0.0, 0.0));
}
