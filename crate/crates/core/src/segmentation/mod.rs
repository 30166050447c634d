//! Unsupervised motion segmentation.
//!
//! Particles are grouped by K-means on `h ⊕ λ·p₀`, the bottleneck vector of
//! their physics code concatenated with their scaled canonical position.
//! [`rigid`] holds the object-code baseline built on weighted Kabsch fits and
//! [`metrics`] the instance-matching scores.

pub mod metrics;
pub mod rigid;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{segmentation_metrics, SegmentationMetrics};
pub use rigid::{
    ogc_dynamic_loss, ogc_smooth_loss, optimize_object_codes, weighted_kabsch, ObjectCodes, OgcConfig,
    RigidTransform,
};

use crate::error::{Error, Result};
use crate::training::{deform_to, TrainedModel};
use crate::transport::Kernel;
use crate::{KernelSet, Networks, Vec3};

/// Smoothing weight for cluttered scenes.
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_GROUPS: usize = 8;
pub const DEFAULT_SIGNATURE_SAMPLES: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// K-means with k-means++ seeding and Lloyd iterations until the assignment
/// stops changing or `max_iters` is reached. `features` is `n × dim` row-major.
pub fn kmeans(features: &[f64], dim: usize, groups: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(Error::InvalidInput(format!(
            "feature buffer of {} values is not a multiple of the dimension {dim}",
            features.len()
        )));
    }
    let n = features.len() / dim;
    if groups == 0 {
        return Err(Error::Config("group count must be at least 1".into()));
    }
    if groups > n {
        return Err(Error::Config(format!("{groups} groups requested for {n} points")));
    }
    if !features.iter().all(|f| f.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    let point = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(groups * dim);
    centers.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[..dim])).collect();
    while centers.len() < groups * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centers[start..start + dim]));
        }
    }

    let mut ids = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, id) in ids.iter_mut().enumerate() {
            let (c, _) = nearest(point(i), &centers, dim);
            if *id != c {
                *id = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; groups * dim];
        let mut counts = vec![0usize; groups];
        for (i, &c) in ids.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..groups {
            if counts[c] > 0 {
                for (dst, s) in centers[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        // empty clusters restart at the point farthest from its own center
        for c in 0..groups {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(point(i), &centers[ids[i] * dim..(ids[i] + 1) * dim])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                centers[c * dim..(c + 1) * dim].copy_from_slice(point(far));
                ids[far] = c;
            }
        }
    }
    Ok(ids)
}

/// Rows `h_i ⊕ λ·p_i`, `n × (K + 3)`.
pub fn grouping_features(bottleneck: &[f64], k: usize, positions: &[Vec3], lambda: f64) -> Result<Vec<f64>> {
    if bottleneck.len() != positions.len() * k {
        return Err(Error::shape("bottleneck vectors", positions.len() * k, bottleneck.len()));
    }
    let mut out = Vec::with_capacity(positions.len() * (k + 3));
    for (h, p) in bottleneck.chunks_exact(k.max(1)).zip(positions) {
        out.extend_from_slice(&h[..k]);
        out.extend_from_slice(&p.scale(lambda).to_array());
    }
    Ok(out)
}

/// Groups canonical kernels by K-means on `f_neck(z) ⊕ λ·p₀`.
pub fn group_by_physics(
    kernels: &KernelSet,
    nets: &Networks,
    lambda: f64,
    groups: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<usize>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let k = nets.config.bottleneck;
    let mut h = Vec::with_capacity(kernels.len() * k);
    for kernel in &kernels.kernels {
        h.extend(nets.f_neck(&kernel.code)?.0);
    }
    let features = grouping_features(&h, k, &kernels.positions(), lambda)?;
    kmeans(&features, k + 3, groups, seed, max_iters)
}

/// Segments a trained model with the configured method. Object codes are
/// fitted to the model's own trajectories at the signature times.
pub fn segment_model(model: &TrainedModel, config: &SegmentConfig) -> Result<Vec<usize>> {
    let canonical = model.canonical_kernels()?;
    match config.method {
        SegmentMethod::Physics => group_by_physics(
            &canonical,
            &model.nets,
            config.lambda,
            config.groups,
            config.seed,
            config.max_iters,
        ),
        SegmentMethod::ObjectCodes => {
            let from = canonical.positions();
            let frames = signature_times(DEFAULT_SIGNATURE_SAMPLES)
                .into_iter()
                .skip(1)
                .map(|t| Ok(model.state_at(t)?.positions()))
                .collect::<Result<Vec<_>>>()?;
            Ok(optimize_object_codes(&from, &frames, &config.object_codes, config.seed)?.argmax())
        }
    }
}

/// Sample times `0, 1/(m−1), …, 1`.
pub fn signature_times(samples: usize) -> Vec<f64> {
    match samples {
        0 => Vec::new(),
        1 => vec![0.0],
        m => (0..m).map(|j| j as f64 / (m - 1) as f64).collect(),
    }
}

/// Velocities of a canonical kernel at `samples` uniform times in `[0, 1]`,
/// each taken at the kernel's deformed position (its canonical position when
/// the model has no deformation field).
pub fn trajectory_signature(kernel: &Kernel<f64>, nets: &Networks, samples: usize) -> Result<Vec<Vec3>> {
    let single = KernelSet {
        kernels: vec![kernel.clone()],
        time: 0.0,
    };
    signature_times(samples)
        .into_iter()
        .map(|t| {
            let p = if nets.deform.is_some() {
                deform_to(&single, t, nets)?.kernels[0].position
            } else {
                kernel.position
            };
            nets.velocity(&kernel.code, p, t)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMethod {
    /// K-means on physics-code features.
    Physics,
    /// Object codes fit to rigid motion.
    ObjectCodes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub method: SegmentMethod,
    pub lambda: f64,
    pub groups: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub object_codes: OgcConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            method: SegmentMethod::Physics,
            lambda: DEFAULT_LAMBDA,
            groups: DEFAULT_GROUPS,
            seed: 0,
            max_iters: 300,
            object_codes: OgcConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub ids: Vec<usize>,
    pub groups: usize,
    pub metrics: Option<SegmentationMetrics>,
}
