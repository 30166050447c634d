#![allow(dead_code)]

use divfree::networks::{AblationFlags, Mlp, NetworkConfig};
use divfree::scenegen::{generate, MotionSpec, ObjectSpec, SceneConfig, Shape, TrajectoryDataset};
use divfree::training::{batch_loss, canonical_kernels, loss_and_gradient, TrainConfig, TrainingData};
use divfree::transport::transport_span;
use divfree::{Networks, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ABLATIONS: [&str; 7] = [
    "full",
    "learnable_code",
    "no_divfree_basis",
    "no_bottleneck_decomp",
    "no_deform_field",
    "no_code_in_deform",
    "no_scale_deform",
];

pub fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        code_dim: 4,
        bottleneck: 3,
        encoding_degree: 2,
        code_hidden: vec![6, 6],
        neck_hidden: vec![6],
        weight_hidden: vec![6, 6, 6],
        weight_skips: vec![2],
        deform_hidden: vec![6, 6, 6],
        deform_skips: vec![2],
    }
}

/// Three particles spinning about z while drifting, eleven frames over `[0, 1]`.
pub fn toy_dataset() -> TrajectoryDataset {
    let scene = SceneConfig {
        name: "toy".into(),
        objects: vec![ObjectSpec {
            shape: Shape::Box {
                half_extents: [0.5, 0.4, 0.3],
            },
            center: [0.2, -0.1, 0.0],
            particles: 3,
            motion: MotionSpec::Screw {
                velocity: [0.3, 0.0, 0.2],
                axis: [0.0, 0.0, 1.0],
                rate: 1.2,
                pivot: [0.2, -0.1, 0.0],
            },
            label: 0,
        }],
        frames: 11,
        horizon: 1.0,
        noise_sigma: 0.0,
        seed: 3,
    };
    generate(&scene).unwrap()
}

/// Every parameter drawn from `U(-scale, scale)`.
pub fn randomize(nets: &mut Networks, rng: &mut ChaCha8Rng, scale: f64) {
    let flat: Vec<f64> = (0..nets.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
    nets.set_flat_params(&flat).unwrap();
}

pub fn random_nets(ablation: &str, positions: &[Vec3], seed: u64) -> Networks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flags = AblationFlags::from_name(ablation).unwrap();
    let mut nets = Networks::init(tiny_network(), flags, positions.len(), positions, &mut rng).unwrap();
    randomize(&mut nets, &mut rng, 0.4);
    nets
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `Mlp::gradient` and central differences of
/// `upstream · forward(input)` at `probes` random parameter and input indices.
pub fn mlp_gradient_error(mlp: &Mlp<f64>, rng: &mut ChaCha8Rng, probes: usize) -> f64 {
    let input: Vec<f64> = (0..mlp.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..mlp.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (d_params, d_input) = mlp.gradient(&input, &upstream).unwrap();
    let objective = |m: &Mlp<f64>, x: &[f64]| -> f64 {
        m.forward(x).unwrap().iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for probe in 0..probes {
        if probe % 4 == 3 {
            let i = rng.random_range(0..input.len());
            let (mut a, mut b) = (input.clone(), input.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (objective(mlp, &a) - objective(mlp, &b)) / (2.0 * h);
            worst = worst.max(rel_err(d_input[i], fd));
        } else {
            let i = rng.random_range(0..mlp.params.len());
            let (mut a, mut b) = (mlp.clone(), mlp.clone());
            a.params[i] += h;
            b.params[i] -= h;
            let fd = (objective(&a, &input) - objective(&b, &input)) / (2.0 * h);
            worst = worst.max(rel_err(d_params[i], fd));
        }
    }
    worst
}

/// Largest relative error of the training-loss gradient against central
/// differences at `probes` random parameters, for one ablation mode.
pub fn end_to_end_gradient_error(ablation: &str, probes: usize, seed: u64) -> f64 {
    let dataset = toy_dataset();
    let flags = AblationFlags::from_name(ablation).unwrap();
    let config = TrainConfig {
        dt: 0.1,
        network: tiny_network(),
        ablation: flags,
        ..TrainConfig::default()
    };
    let data = TrainingData::new(&dataset, config.dt, &flags).unwrap();
    let nets = random_nets(ablation, data.canonical(), seed);
    let samples: Vec<_> = data.samples.iter().copied().step_by(3).collect();
    let (_, grads) = loss_and_gradient(&nets, &data, &config, &samples, 1).unwrap();
    let analytic = grads.flat();
    let base = nets.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let h = 1e-6;
    let loss_at = |params: &[f64]| {
        let mut n = nets.clone();
        n.set_flat_params(params).unwrap();
        batch_loss(&n, &data, &config, &samples).unwrap().total
    };
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..base.len());
        let (mut a, mut b) = (base.clone(), base.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

/// Every MLP in a network set.
pub fn mlps(nets: &Networks) -> Vec<(&'static str, &Mlp<f64>)> {
    use divfree::networks::{CodeNet, VelocityHead};
    let mut out = Vec::new();
    if let CodeNet::Field(m) = &nets.code {
        out.push(("code", m));
    }
    match &nets.head {
        VelocityHead::Factored { neck, weight } => {
            out.push(("neck", neck));
            out.push(("weight", weight));
        }
        VelocityHead::Direct { mlp } => out.push(("direct", mlp)),
        VelocityHead::Unconstrained { neck, motion } => {
            out.push(("neck", neck));
            out.push(("motion", motion));
        }
    }
    if let Some(d) = &nets.deform {
        out.push(("deform", d));
    }
    out
}

/// Full-model networks whose field is the constant rigid motion
/// `linear + angular × p` for every code and time, with a zero deformation.
pub fn constant_field_nets(positions: &[Vec3], linear: Vec3, angular: Vec3) -> Networks {
    use divfree::networks::VelocityHead;
    use divfree::velocity_field::VelocityComponents;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nets = Networks::init(tiny_network(), AblationFlags::default(), positions.len(), positions, &mut rng).unwrap();
    let comps = VelocityComponents::from_parts(linear, angular).0;
    let VelocityHead::Factored { neck, weight } = &mut nets.head else {
        unreachable!()
    };
    // h = e₀ everywhere, first row of W = the components
    let k = neck.spec.output;
    let n = neck.params.len();
    neck.params.iter_mut().for_each(|p| *p = 0.0);
    neck.params[n - k] = 1.0;
    let n = weight.params.len();
    let out = weight.spec.output;
    weight.params.iter_mut().for_each(|p| *p = 0.0);
    weight.params[n - out..n - out + 6].copy_from_slice(&comps);
    if let Some(d) = &mut nets.deform {
        d.params.iter_mut().for_each(|p| *p = 0.0);
    }
    nets
}

/// Rodrigues rotation of `p` about unit `axis` by `angle`.
pub fn rotate(p: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    p.scale(c) + axis.cross(p).scale(s) + axis.scale(axis.dot(p) * (1.0 - c))
}

/// Global position error after transporting three points through a constant
/// rotation over `[0, 1]` with step `dt`.
pub fn rotation_error(angular: Vec3, dt: f64) -> f64 {
    let points = [
        Vec3::new(0.7, 0.1, -0.2),
        Vec3::new(-0.3, 0.5, 0.4),
        Vec3::new(0.2, -0.6, 0.9),
    ];
    let nets = constant_field_nets(&points, Vec3::zero(), angular);
    let start = canonical_kernels(&nets, &points).unwrap();
    let steps = (1.0 / dt).round() as usize;
    let end = transport_span(&start, 1.0, steps, &nets).unwrap();
    let rate = angular.norm();
    let axis = angular.scale(1.0 / rate);
    let sq: f64 = end
        .kernels
        .iter()
        .zip(&points)
        .map(|(k, p)| (k.position - rotate(*p, axis, rate)).norm_squared())
        .sum();
    (sq / points.len() as f64).sqrt()
}

/// Least-squares slope of `log err` against `log Δt`.
pub fn measured_order(errors: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = errors.iter().map(|(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
