//! Trajectory error metrics and prediction datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::TrajectoryDataset;
use crate::training::TrainedModel;
use crate::velocity_field::{divergence_of, DEFAULT_FD_STEP};
use crate::{KernelSet, Networks, Vec3};

/// Largest `|∇·v|` a divergence-free field may show under central differences.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// Root mean squared particle distance, per frame.
    pub per_frame_rmse: Vec<f64>,
    pub final_rmse: f64,
    /// Over all frames and particles.
    pub rmse: f64,
    pub bbox_diagonal: f64,
    /// `rmse` as a percentage of the ground-truth box diagonal.
    pub rmse_percent: f64,
    pub final_percent: f64,
}

/// Compares two datasets frame by frame. Both must hold the same particles
/// at the same timestamps.
pub fn trajectory_metrics(pred: &TrajectoryDataset, gt: &TrajectoryDataset) -> Result<TrajectoryMetrics> {
    if pred.particles() != gt.particles() {
        return Err(Error::shape("predicted particles", gt.particles(), pred.particles()));
    }
    if pred.frames() != gt.frames() {
        return Err(Error::shape("predicted frames", gt.frames(), pred.frames()));
    }
    if gt.frames() == 0 || gt.particles() == 0 {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    if let Some(f) = (0..gt.frames()).find(|&f| (pred.timestamps[f] - gt.timestamps[f]).abs() > 1e-9) {
        return Err(Error::Dataset(format!(
            "frame {f} is at t = {} in the prediction but t = {} in the ground truth",
            pred.timestamps[f], gt.timestamps[f]
        )));
    }
    let n = gt.particles();
    let per_frame_sq: Vec<f64> = pred
        .positions
        .chunks_exact(n * 3)
        .zip(gt.positions.chunks_exact(n * 3))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
        .collect();
    let per_frame_rmse: Vec<f64> = per_frame_sq.iter().map(|s| s.sqrt()).collect();
    let rmse = (per_frame_sq.iter().sum::<f64>() / per_frame_sq.len() as f64).sqrt();
    let final_rmse = *per_frame_rmse.last().expect("non-empty");
    let bbox_diagonal = gt.bbox.diagonal();
    let pct = |x: f64| if bbox_diagonal > 0.0 { 100.0 * x / bbox_diagonal } else { f64::INFINITY };
    Ok(TrajectoryMetrics {
        rmse_percent: pct(rmse),
        final_percent: pct(final_rmse),
        per_frame_rmse,
        final_rmse,
        rmse,
        bbox_diagonal,
    })
}

/// Model predictions at `times`, packaged like `template` (scene echo,
/// labels, box) so they can be written and evaluated like any dataset.
pub fn predict_dataset(model: &TrainedModel, times: &[f64], template: &TrajectoryDataset) -> Result<TrajectoryDataset> {
    if template.particles() != model.canonical.len() {
        return Err(Error::shape("template particles", model.canonical.len(), template.particles()));
    }
    let states = model.predict(times)?;
    let n = model.canonical.len();
    let mut positions = Vec::with_capacity(times.len() * n * 3);
    let mut orientations = Vec::with_capacity(times.len() * n * 4);
    for s in &states {
        for k in &s.kernels {
            positions.extend_from_slice(&k.position.to_array());
            orientations.extend_from_slice(&k.rotation.to_array());
        }
    }
    Ok(TrajectoryDataset {
        scene: template.scene.clone(),
        timestamps: times.to_vec(),
        positions,
        orientations: Some(orientations),
        labels: template.labels.clone(),
        bbox: template.bbox,
        first_frame: template.first_frame,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub probes: usize,
    pub max_abs: f64,
    /// Probes with `|∇·v|` above [`DIVERGENCE_TOLERANCE`].
    pub failures: usize,
    pub passed: bool,
}

/// Central-difference divergence of the learned field at random probes: a
/// random kernel's code, `t ∈ [0, horizon]` and a point within one model unit
/// of the kernel.
pub fn divergence_check(
    nets: &Networks,
    kernels: &KernelSet,
    probes: usize,
    horizon: f64,
    seed: u64,
) -> Result<DivergenceReport> {
    if kernels.is_empty() && probes > 0 {
        return Err(Error::InvalidInput("no kernels to probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..probes {
        let k = &kernels.kernels[rng.random_range(0..kernels.len())];
        let t = rng.random_range(0.0..=horizon);
        let offset = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let p = k.position + offset;
        // surfaces shape errors; later failures show up as NaN
        nets.velocity(&k.code, p, t)?;
        let div = divergence_of(
            |q| {
                nets.velocity(&k.code, q, t)
                    .unwrap_or(Vec3::new(f64::NAN, f64::NAN, f64::NAN))
            },
            p,
            DEFAULT_FD_STEP,
        );
        let a = div.abs();
        if !(a <= DIVERGENCE_TOLERANCE) {
            failures += 1;
        }
        max_abs = max_abs.max(a);
    }
    Ok(DivergenceReport {
        probes,
        max_abs,
        failures,
        passed: failures == 0,
    })
}

/// Plain-text summary with three decimals.
pub fn format_metrics(m: &TrajectoryMetrics) -> String {
    let mut s = String::from("frame  rmse\n");
    for (i, r) in m.per_frame_rmse.iter().enumerate() {
        s.push_str(&format!("{i:5}  {r:.3}\n"));
    }
    s.push_str(&format!(
        "rmse {:.3}  final {:.3}  rmse% {:.3}  final% {:.3}  (bbox diagonal {:.3})\n",
        m.rmse, m.final_rmse, m.rmse_percent, m.final_percent, m.bbox_diagonal
    ));
    s
}
