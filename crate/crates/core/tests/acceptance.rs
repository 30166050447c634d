//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Trained models for the extrapolation criterion are reused by the
//! segmentation criterion; its time limit covers segmentation only.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use divfree::eval::trajectory_metrics;
use divfree::io::{dataset_container, model_container, RunConfig};
use divfree::networks::{AblationFlags, NetworkConfig, DEFAULT_ENCODING_DEGREE};
use divfree::scenegen::{generate, preset, split, TrajectoryDataset};
use divfree::segmentation::{
    ogc_dynamic_loss, segment_model, segmentation_metrics, weighted_kabsch, ObjectCodes, SegmentConfig,
};
use divfree::training::{canonical_kernels, train, TrainConfig, TrainedModel, DEFAULT_DT};
use divfree::velocity_field::velocity_jacobian;
use divfree::{Mat3, Networks, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Written straight to the process stdout so the lines survive output capture.
fn report(line: &str) {
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn desk_config() -> RunConfig {
    RunConfig::load(&configs_dir().join("desk.toml")).unwrap()
}

fn desk_train_config() -> TrainConfig {
    desk_config().train
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Central difference of the field's divergence, written independently of
/// the library's helper.
fn fd_divergence(nets: &Networks, code: &divfree::networks::PhysicsCode<f64>, p: Vec3, t: f64) -> f64 {
    let h = 1e-4;
    let mut div = 0.0;
    for axis in 0..3 {
        let mut e = [0.0; 3];
        e[axis] = h;
        let e = Vec3::from_array(e);
        let plus = nets.velocity(code, p + e, t).unwrap().to_array()[axis];
        let minus = nets.velocity(code, p - e, t).unwrap().to_array()[axis];
        div += (plus - minus) / (2.0 * h);
    }
    div
}

fn probe_nets(ablation: &str, network: &NetworkConfig, seed: u64) -> (Networks, Vec<Vec3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec3> = (0..20)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let flags = AblationFlags::from_name(ablation).unwrap();
    let mut nets = Networks::init(network.clone(), flags, points.len(), &points, &mut rng).unwrap();
    randomize(&mut nets, &mut rng, 0.3);
    (nets, points)
}

/// `(max |div|, trace always exactly zero)` over `probes` random tuples.
fn divergence_probes(ablation: &str, param_sets: usize, probes: usize) -> (f64, bool) {
    let network = desk_train_config().network;
    let mut worst: f64 = 0.0;
    let mut trace_zero = true;
    for set in 0..param_sets {
        let (nets, points) = probe_nets(ablation, &network, 100 + set as u64);
        let kernels = canonical_kernels(&nets, &points).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + set as u64);
        for _ in 0..probes {
            let k = &kernels.kernels[rng.random_range(0..kernels.len())];
            let t = rng.random_range(0.0..1.5);
            let p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            worst = worst.max(fd_divergence(&nets, &k.code, p, t).abs());
            if nets.is_divergence_free() {
                let comps = nets.velocity_components(&k.code, t).unwrap();
                trace_zero &= velocity_jacobian(&comps).trace() == 0.0;
            }
        }
    }
    (worst, trace_zero)
}

fn criterion_1() -> Outcome {
    let (worst, trace_zero) = divergence_probes("full", 10, 100);
    outcome(
        worst <= 1e-8 && trace_zero,
        format!("1000 probes, max |div| {worst:.3e}, trace of every Jacobian exactly 0: {trace_zero}"),
    )
}

fn extrapolation_percent(model: &TrainedModel, extra: &TrajectoryDataset) -> f64 {
    let pred = divfree::eval::predict_dataset(model, &extra.timestamps, extra).unwrap();
    trajectory_metrics(&pred, extra).unwrap().rmse_percent
}

struct SceneRun {
    name: &'static str,
    train_set: TrajectoryDataset,
    extra: TrajectoryDataset,
}

fn scene(name: &'static str, per_object: usize) -> SceneRun {
    let full = generate(&preset(name, per_object, 0).unwrap()).unwrap();
    let (train_set, extra) = split(&full, 0.75).unwrap();
    SceneRun { name, train_set, extra }
}

fn fit(run: &SceneRun, ablation: &str, seed: u64, iterations: usize) -> (TrainedModel, Vec<f64>) {
    let config = TrainConfig {
        seed,
        iterations,
        ablation: AblationFlags::from_name(ablation).unwrap(),
        ..desk_train_config()
    };
    let (model, report) = train(&run.train_set, &config, threads()).unwrap();
    (model, report.losses)
}

fn criterion_2() -> Outcome {
    let (worst, _) = divergence_probes("no_divfree_basis", 1, 100);
    let probe_ok = worst > 1e-6;
    let a = scene("fall_spin", 100);
    let mut details = vec![format!("unconstrained field max |div| {worst:.3e}")];
    let mut all_worse = true;
    for seed in 0..3 {
        let (full, _) = fit(&a, "full", seed, desk_train_config().iterations);
        let (nobasis, _) = fit(&a, "no_divfree_basis", seed, desk_train_config().iterations);
        let (f, n) = (extrapolation_percent(&full, &a.extra), extrapolation_percent(&nobasis, &a.extra));
        all_worse &= n > f;
        details.push(format!("seed {seed}: full {f:.3}% vs no_divfree_basis {n:.3}%"));
    }
    outcome(probe_ok && all_worse, details.join("; "))
}

fn criterion_3() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for angular in [Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.6, -1.1, 0.8)] {
        let errors: Vec<(f64, f64)> = [30.0, 60.0, 120.0, 240.0]
            .iter()
            .map(|n| (1.0 / n, rotation_error(angular, 1.0 / n)))
            .collect();
        let order = measured_order(&errors);
        ok &= (1.8..=2.2).contains(&order);
        details.push(format!("order {order:.3}"));
    }
    outcome(ok, details.join(", "))
}

fn criterion_4() -> Outcome {
    let points = [Vec3::new(0.1, 0.2, -0.3), Vec3::new(-0.4, 0.0, 0.5)];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_net: f64 = 0.0;
    for ablation in ["full", "no_divfree_basis", "no_bottleneck_decomp", "no_code_in_deform"] {
        let nets = random_nets(ablation, &points, 4);
        for (_, mlp) in mlps(&nets) {
            worst_net = worst_net.max(mlp_gradient_error(mlp, &mut rng, 100));
        }
    }
    let mut worst_e2e: f64 = 0.0;
    for (i, ablation) in ABLATIONS.iter().enumerate() {
        worst_e2e = worst_e2e.max(end_to_end_gradient_error(ablation, 100, 20 + i as u64));
    }
    outcome(
        worst_net < 1e-4 && worst_e2e < 1e-4,
        format!("networks max rel err {worst_net:.3e}, end-to-end (7 modes) {worst_e2e:.3e}"),
    )
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn criterion_5(trained: &mut Vec<(SceneRun, TrainedModel)>) -> Outcome {
    let iterations = desk_train_config().iterations;
    let mut details = Vec::new();
    let mut full_ok = true;
    let mut trend_ok = true;
    let mut collapse = false;
    for (name, per_object) in [("fall_spin", 100), ("oscillate", 150), ("screw", 150)] {
        let run = scene(name, per_object);
        let n = run.train_set.particles();
        let (model, losses) = fit(&run, "full", 0, iterations);
        let full = extrapolation_percent(&model, &run.extra);
        let (ablated, _) = fit(&run, "no_deform_field", 0, iterations);
        let abl = extrapolation_percent(&ablated, &run.extra);
        let trend = median(&losses[losses.len() - 100..]) < median(&losses[..100]);
        full_ok &= (300..=1500).contains(&n) && full < 2.0;
        trend_ok &= trend;
        collapse |= abl >= 10.0;
        details.push(format!("{} ({n} particles): full {full:.3}%, no_deform_field {abl:.3}%", run.name));
        trained.push((run, model));
    }
    details.push(format!(
        "full < 2% on all: {full_ok}; loss trend down on all: {trend_ok}; ablation >= 10% somewhere: {collapse}"
    ));
    outcome(full_ok && trend_ok && collapse, details.join("; "))
}

fn rotation_matrix(axis: Vec3, angle: f64) -> Mat3 {
    let cols = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)].map(|e| rotate(e, axis, angle));
    Mat3::from_rows([
        [cols[0].x, cols[1].x, cols[2].x],
        [cols[0].y, cols[1].y, cols[2].y],
        [cols[0].z, cols[1].z, cols[2].z],
    ])
}

fn criterion_6(trained: &[(SceneRun, TrainedModel)]) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (run, model) in trained {
        let mut labels = run.train_set.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        let config = SegmentConfig {
            groups: labels.len(),
            ..desk_config().segment
        };
        let ids = segment_model(model, &config).unwrap();
        let m = segmentation_metrics(&ids, &run.train_set.labels).unwrap();
        ok &= m.f1 >= 99.0 && m.miou >= 95.0;
        details.push(format!("{}: F1 {:.3} mIoU {:.3}", run.name, m.f1, m.miou));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut kabsch_err: f64 = 0.0;
    for _ in 0..20 {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let axis = axis.scale(1.0 / axis.norm());
        let angle = rng.random_range(-3.0..3.0);
        let r = rotation_matrix(axis, angle);
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let from: Vec<Vec3> = (0..12)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let to: Vec<Vec3> = from.iter().map(|p| rotate(*p, axis, angle) + t).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
        let fit = weighted_kabsch(&from, &to, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                kabsch_err = kabsch_err.max((fit.rotation.m[i][j] - r.m[i][j]).abs());
            }
        }
        kabsch_err = kabsch_err.max((fit.translation - t).norm());
    }

    // two exact rigid bodies with one-hot codes
    let from: Vec<Vec3> = (0..30)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let ids: Vec<usize> = (0..30).map(|i| i % 2).collect();
    let axis = Vec3::new(0.0, 0.6, 0.8);
    let to: Vec<Vec3> = from
        .iter()
        .zip(&ids)
        .map(|(p, &id)| if id == 0 { rotate(*p, axis, 0.7) + Vec3::new(0.3, 0.0, -1.0) } else { *p + Vec3::new(0.0, 2.0, 0.5) })
        .collect();
    let dynamic = ogc_dynamic_loss(&from, &to, &ObjectCodes::one_hot(&ids, 2).unwrap()).unwrap();

    ok &= kabsch_err <= 1e-9 && dynamic <= 1e-9;
    details.push(format!("Kabsch max err {kabsch_err:.3e}, rigid one-hot dynamic loss {dynamic:.3e}"));
    outcome(ok, details.join("; "))
}

fn criterion_7() -> Outcome {
    let scene_config = preset("fall_spin", 8, 4).unwrap();
    let gen = || dataset_container(&generate(&scene_config).unwrap()).unwrap().to_bytes().unwrap();
    let gen_same = gen() == gen();

    let full = generate(&scene_config).unwrap();
    let (train_set, _) = split(&full, 0.75).unwrap();
    let config = TrainConfig {
        iterations: 20,
        network: tiny_network(),
        seed: 4,
        ..TrainConfig::default()
    };
    let fit_bytes = |threads| {
        let (model, report) = train(&train_set, &config, threads).unwrap();
        (model_container(&model).unwrap().to_bytes().unwrap(), report.losses, model)
    };
    let (a, losses_a, model) = fit_bytes(1);
    let (b, losses_b, _) = fit_bytes(threads().max(2));
    let train_same = a == b && losses_a == losses_b;

    let seg = SegmentConfig {
        groups: 3,
        seed: 4,
        ..SegmentConfig::default()
    };
    let segment_same = segment_model(&model, &seg).unwrap() == segment_model(&model, &seg).unwrap();
    outcome(
        gen_same && train_same && segment_same,
        format!("gen {gen_same}, train {train_same}, segment {segment_same}"),
    )
}

fn criterion_8() -> Outcome {
    let default = RunConfig::load(&configs_dir().join("default.toml")).unwrap();
    let cluttered = RunConfig::load(&configs_dir().join("cluttered.toml")).unwrap();
    let mut checks = Vec::new();
    for (name, c) in [("default", &default), ("cluttered", &cluttered)] {
        let n = &c.train.network;
        let o = &c.segment.object_codes;
        checks.push((format!("{name}: L = 16"), n.code_dim == 16));
        checks.push((format!("{name}: K in {{16, 32}}"), n.bottleneck == 16 || n.bottleneck == 32));
        checks.push((format!("{name}: dt = 1/60"), (c.train.dt - 1.0 / 60.0).abs() < 1e-15 && c.train.dt == DEFAULT_DT));
        checks.push((format!("{name}: encoding degree 8"), n.encoding_degree == 8 && n.encoding_degree == DEFAULT_ENCODING_DEGREE));
        checks.push((
            format!("{name}: object codes lr 0.01, 1000 iterations, 8 objects"),
            o.learning_rate == 0.01 && o.iterations == 1000 && o.objects == 8,
        ));
        checks.push((format!("{name}: lambda in {{0, 0.5}}"), c.segment.lambda == 0.0 || c.segment.lambda == 0.5));
    }
    checks.push(("default: K = 16, lambda = 0.5".into(), default.train.network.bottleneck == 16 && default.segment.lambda == 0.5));
    checks.push(("cluttered: K = 32, lambda = 0".into(), cluttered.train.network.bottleneck == 32 && cluttered.segment.lambda == 0.0));
    let failed: Vec<_> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.clone()).collect();
    let detail = if failed.is_empty() {
        format!("{} checks on default.toml and cluttered.toml", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    let mut record = |id: u32, title: &str, limit_secs: f64, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < limit_secs;
        let passed = o.passed && in_time;
        let line = format!(
            "criterion {id} [{title}]: {} ({}; {secs:.1} s, limit {limit_secs:.0} s)",
            if passed { "PASS" } else { "FAIL" },
            o.detail
        );
        report(&line);
        if !passed {
            failed.push(id);
        }
        lines.push(line);
    };
    let mut trained = Vec::new();
    record(1, "divergence-free guarantee", 5.0, &mut criterion_1);
    record(2, "ablation contrast without the basis", 600.0, &mut criterion_2);
    record(3, "integrator order", 5.0, &mut criterion_3);
    record(4, "gradient correctness", 60.0, &mut criterion_4);
    record(5, "desk-scale extrapolation", 1800.0, &mut || criterion_5(&mut trained));
    record(6, "segmentation", 300.0, &mut || criterion_6(&trained));
    record(7, "determinism", 300.0, &mut criterion_7);
    record(8, "default constants", 5.0, &mut criterion_8);
    assert!(failed.is_empty(), "failed criteria {failed:?}:\n{}", lines.join("\n"));
}
