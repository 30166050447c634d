mod common;

use common::{constant_field_nets, tiny_network, toy_dataset};
use divfree::eval::{predict_dataset, trajectory_metrics};
use divfree::io::{load_dataset, load_model, save_dataset, save_model};
use divfree::scenegen::{generate, preset, split};
use divfree::training::{train, Normalization, TrainConfig, TrainedModel};
use divfree::Vec3;

#[test]
fn constant_velocity_extrapolation_matches_closed_form() {
    let dataset = toy_dataset();
    let norm = Normalization::from_bbox(&dataset.bbox);
    let canonical: Vec<Vec3> = dataset.frame_positions(0).into_iter().map(|p| norm.to_model(p)).collect();
    let v = Vec3::new(0.4, -0.2, 0.7);
    let model = TrainedModel {
        nets: constant_field_nets(&canonical, v, Vec3::zero()),
        normalization: norm,
        canonical,
        dt: 0.1,
        train_end: 1.0,
        config: TrainConfig {
            dt: 0.1,
            network: tiny_network(),
            ..TrainConfig::default()
        },
    };
    let start = model.state_at(model.extrapolation_start()).unwrap();
    let times = [1.0, 1.05, 1.2, 1.5];
    let pred = model.predict(&times).unwrap();
    for (set, &t) in pred.iter().zip(&times) {
        for (k, s) in set.kernels.iter().zip(&start.kernels) {
            // scene-space velocity is the model-space one times the scale
            let expected = norm.to_scene(s.position) + v.scale(norm.scale * (t - model.extrapolation_start()));
            assert!((k.position - expected).norm() < 1e-6, "t = {t}");
        }
    }
}

#[test]
fn datasets_and_checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let full = generate(&preset("screw", 6, 2).unwrap()).unwrap();
    let (train_set, extra) = split(&full, 0.75).unwrap();
    let path = dir.path().join("train.bin");
    save_dataset(&path, &train_set).unwrap();
    let loaded = load_dataset(&path).unwrap();
    assert_eq!(loaded.scene, train_set.scene);
    assert_eq!(loaded.timestamps, train_set.timestamps);
    assert_eq!(loaded.positions, train_set.positions);
    assert_eq!(loaded.orientations, train_set.orientations);
    assert_eq!(loaded.labels, train_set.labels);
    assert_eq!(loaded.bbox, train_set.bbox);
    assert_eq!(loaded.first_frame, train_set.first_frame);
    assert_eq!(loaded, train_set);

    let config = TrainConfig {
        iterations: 8,
        network: tiny_network(),
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, report) = train(&train_set, &config, 2).unwrap();
    assert_eq!(report.losses.len(), 8);
    let ckpt = dir.path().join("model.ckpt");
    save_model(&ckpt, &model).unwrap();
    let back = load_model(&ckpt).unwrap();
    assert_eq!(back.canonical, model.canonical);
    assert_eq!(back.normalization, model.normalization);
    assert_eq!((back.dt, back.train_end), (model.dt, model.train_end));
    assert_eq!(back.config, model.config);
    assert_eq!(back.nets.flat_params(), model.nets.flat_params());
    assert_eq!(back, model);

    let a = predict_dataset(&model, &extra.timestamps, &extra).unwrap();
    let b = predict_dataset(&back, &extra.timestamps, &extra).unwrap();
    assert_eq!(a.positions, b.positions);
    let m = trajectory_metrics(&a, &extra).unwrap();
    assert!(m.rmse.is_finite() && m.per_frame_rmse.len() == extra.frames());

    // same inputs, any thread count: identical parameters
    let (again, report2) = train(&train_set, &config, 1).unwrap();
    assert_eq!(again.nets, model.nets);
    assert_eq!(report2.losses, report.losses);
}
