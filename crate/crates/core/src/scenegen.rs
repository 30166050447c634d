//! Synthetic multi-body trajectories with closed-form motion.
//!
//! Every object is a rigid cloud of particles moving under one analytic
//! motion law, so positions and velocities are exact at any time.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rot, Matrix3, UnitQuaternion};
use crate::{Quat, Vec3};

/// Analytic rigid motion. Angular quantities are in radians per unit time;
/// `frequency` is angular frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionSpec {
    Static,
    ConstantVelocity {
        velocity: [f64; 3],
    },
    /// `p(t) = p₀ + v t + ½ a t²`.
    ConstantAcceleration {
        velocity: [f64; 3],
        acceleration: [f64; 3],
    },
    /// Rotation about `axis` through `pivot` at a fixed rate.
    ConstantAngular {
        axis: [f64; 3],
        rate: f64,
        pivot: [f64; 3],
    },
    /// `p(t) = p₀ + A (sin(ωt + φ) − sin φ) axis`.
    HarmonicLinear {
        axis: [f64; 3],
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// Swing about `axis` through `pivot` by `θ(t) = A (sin(ωt + φ) − sin φ)`.
    HarmonicAngular {
        axis: [f64; 3],
        amplitude: f64,
        frequency: f64,
        phase: f64,
        pivot: [f64; 3],
    },
    /// Constant rotation about `axis` through a pivot that moves with `velocity`.
    Screw {
        velocity: [f64; 3],
        axis: [f64; 3],
        rate: f64,
        pivot: [f64; 3],
    },
}

fn unit_axis(axis: [f64; 3]) -> Result<Vec3> {
    let a = Vec3::from_array(axis);
    let n = a.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Config(format!("motion axis {axis:?} is not a usable direction")));
    }
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("motion axis {axis:?} must have unit length")));
    }
    Ok(a)
}

fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let q = UnitQuaternion::from_axis_angle(Vec3::from_array(axis), angle).expect("validated axis");
    quat_to_rot(&q)
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Self::Static => true,
            Self::ConstantVelocity { velocity } => finite(velocity),
            Self::ConstantAcceleration { velocity, acceleration } => finite(velocity) && finite(acceleration),
            Self::ConstantAngular { axis, rate, pivot } => {
                unit_axis(*axis)?;
                rate.is_finite() && finite(pivot)
            }
            Self::HarmonicLinear {
                axis,
                amplitude,
                frequency,
                phase,
            } => {
                unit_axis(*axis)?;
                finite(&[*amplitude, *frequency, *phase])
            }
            Self::HarmonicAngular {
                axis,
                amplitude,
                frequency,
                phase,
                pivot,
            } => {
                unit_axis(*axis)?;
                finite(&[*amplitude, *frequency, *phase]) && finite(pivot)
            }
            Self::Screw {
                velocity,
                axis,
                rate,
                pivot,
            } => {
                unit_axis(*axis)?;
                finite(velocity) && rate.is_finite() && finite(pivot)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("motion parameters must be finite: {self:?}")))
        }
    }

    /// Rotation of the object at time `t` relative to time 0.
    pub fn rotation(&self, t: f64) -> Matrix3<f64> {
        match self {
            Self::ConstantAngular { axis, rate, .. } | Self::Screw { axis, rate, .. } => rotation(*axis, rate * t),
            Self::HarmonicAngular {
                axis,
                amplitude,
                frequency,
                phase,
                ..
            } => rotation(*axis, amplitude * ((frequency * t + phase).sin() - phase.sin())),
            _ => Matrix3::identity(),
        }
    }

    /// Position at time `t` of the particle that starts at `p0`.
    pub fn position(&self, p0: Vec3, t: f64) -> Vec3 {
        match self {
            Self::Static => p0,
            Self::ConstantVelocity { velocity } => p0 + Vec3::from_array(*velocity).scale(t),
            Self::ConstantAcceleration { velocity, acceleration } => {
                p0 + Vec3::from_array(*velocity).scale(t) + Vec3::from_array(*acceleration).scale(0.5 * t * t)
            }
            Self::HarmonicLinear {
                axis,
                amplitude,
                frequency,
                phase,
            } => p0 + Vec3::from_array(*axis).scale(amplitude * ((frequency * t + phase).sin() - phase.sin())),
            Self::ConstantAngular { pivot, .. } | Self::HarmonicAngular { pivot, .. } => {
                let c = Vec3::from_array(*pivot);
                self.rotation(t).mul_vec(p0 - c) + c
            }
            Self::Screw { velocity, pivot, .. } => {
                let c = Vec3::from_array(*pivot);
                self.rotation(t).mul_vec(p0 - c) + c + Vec3::from_array(*velocity).scale(t)
            }
        }
    }

    /// Time derivative of [`Self::position`].
    pub fn velocity(&self, p0: Vec3, t: f64) -> Vec3 {
        match self {
            Self::Static => Vec3::zero(),
            Self::ConstantVelocity { velocity } => Vec3::from_array(*velocity),
            Self::ConstantAcceleration { velocity, acceleration } => {
                Vec3::from_array(*velocity) + Vec3::from_array(*acceleration).scale(t)
            }
            Self::HarmonicLinear {
                axis,
                amplitude,
                frequency,
                phase,
            } => Vec3::from_array(*axis).scale(amplitude * frequency * (frequency * t + phase).cos()),
            Self::ConstantAngular { axis, rate, pivot } => {
                let c = Vec3::from_array(*pivot);
                Vec3::from_array(*axis).scale(*rate).cross(self.position(p0, t) - c)
            }
            Self::HarmonicAngular {
                axis,
                amplitude,
                frequency,
                phase,
                pivot,
            } => {
                let c = Vec3::from_array(*pivot);
                let rate = amplitude * frequency * (frequency * t + phase).cos();
                Vec3::from_array(*axis).scale(rate).cross(self.position(p0, t) - c)
            }
            Self::Screw {
                velocity,
                axis,
                rate,
                pivot,
            } => {
                let v = Vec3::from_array(*velocity);
                let center = Vec3::from_array(*pivot) + v.scale(t);
                v + Vec3::from_array(*axis).scale(*rate).cross(self.position(p0, t) - center)
            }
        }
    }
}

/// Particle cloud geometry, centered on [`ObjectSpec::center`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Uniform in a solid box.
    Box { half_extents: [f64; 3] },
    /// Uniform on a sphere surface.
    SphereShell { radius: f64 },
    /// Uniform along a segment through the center.
    LineSegment { direction: [f64; 3], half_length: f64 },
}

impl Shape {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Box { half_extents } => half_extents.iter().all(|h| h.is_finite() && *h >= 0.0),
            Self::SphereShell { radius } => radius.is_finite() && *radius > 0.0,
            Self::LineSegment {
                direction,
                half_length,
            } => {
                unit_axis(*direction)?;
                half_length.is_finite() && *half_length > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shape extent: {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match self {
            Self::Box { half_extents: h } => Vec3::new(
                rng.random_range(-1.0..=1.0) * h[0],
                rng.random_range(-1.0..=1.0) * h[1],
                rng.random_range(-1.0..=1.0) * h[2],
            ),
            Self::SphereShell { radius } => loop {
                let v = Vec3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let n = v.norm();
                if n > 1e-12 {
                    break v.scale(radius / n);
                }
            },
            Self::LineSegment {
                direction,
                half_length,
            } => Vec3::from_array(*direction).scale(rng.random_range(-1.0..=1.0) * half_length),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    pub particles: usize,
    pub motion: MotionSpec,
    pub label: u32,
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub name: String,
    pub objects: Vec<ObjectSpec>,
    pub frames: usize,
    pub horizon: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Config("scene has no objects".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        let mut labels = BTreeSet::new();
        for o in &self.objects {
            if o.particles == 0 {
                return Err(Error::Config(format!("object {} has no particles", o.label)));
            }
            if !labels.insert(o.label) {
                return Err(Error::Config(format!("label {} is used by more than one object", o.label)));
            }
            if !o.center.iter().all(|c| c.is_finite()) {
                return Err(Error::Config(format!("object {} center is not finite", o.label)));
            }
            o.shape.validate()?;
            o.motion.validate()?;
        }
        Ok(())
    }

    pub fn particle_count(&self) -> usize {
        self.objects.iter().map(|o| o.particles).sum()
    }

    /// Frame times `horizon · i / (frames − 1)`.
    pub fn timestamps(&self) -> Vec<f64> {
        let last = (self.frames - 1) as f64;
        (0..self.frames).map(|i| self.horizon * i as f64 / last).collect()
    }

    /// Noise-free initial positions and the owning object of every particle.
    pub fn sample(&self) -> Result<SampledScene> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut p0 = Vec::with_capacity(self.particle_count());
        let mut object = Vec::with_capacity(self.particle_count());
        for (k, o) in self.objects.iter().enumerate() {
            let c = Vec3::from_array(o.center);
            for _ in 0..o.particles {
                p0.push(c + o.shape.sample(&mut rng));
                object.push(k);
            }
        }
        Ok(SampledScene { p0, object })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledScene {
    pub p0: Vec<Vec3>,
    /// Index into [`SceneConfig::objects`].
    pub object: Vec<usize>,
}

/// Axis-aligned bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bbox {
    pub fn of_points(points: &[f64]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points.chunks_exact(3) {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (Vec3::from_array(self.min) + Vec3::from_array(self.max)).scale(0.5)
    }

    pub fn diagonal(&self) -> f64 {
        (Vec3::from_array(self.max) - Vec3::from_array(self.min)).norm()
    }
}

/// Dense per-frame particle positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub scene: SceneConfig,
    pub timestamps: Vec<f64>,
    /// `frames × particles × 3`, row-major.
    pub positions: Vec<f64>,
    /// Optional `frames × particles × 4` quaternions `(w, x, y, z)`.
    pub orientations: Option<Vec<f64>>,
    pub labels: Vec<u32>,
    /// Bounds of the whole generated sequence; kept unchanged by [`split`].
    pub bbox: Bbox,
    /// Index of this file's first frame in the generated sequence.
    pub first_frame: usize,
}

impl TrajectoryDataset {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn particles(&self) -> usize {
        self.labels.len()
    }

    pub fn position(&self, frame: usize, particle: usize) -> Vec3 {
        let i = (frame * self.particles() + particle) * 3;
        Vec3::from_slice(&self.positions[i..i + 3])
    }

    pub fn frame_positions(&self, frame: usize) -> Vec<Vec3> {
        (0..self.particles()).map(|i| self.position(frame, i)).collect()
    }

    /// Frame whose timestamp is within `tol` of `t`.
    pub fn frame_at(&self, t: f64, tol: f64) -> Option<usize> {
        let i = self.timestamps.partition_point(|&s| s < t - tol);
        (i < self.frames() && (self.timestamps[i] - t).abs() <= tol).then_some(i)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, n) = (self.frames(), self.particles());
        if self.positions.len() != f * n * 3 {
            return Err(Error::Dataset(format!(
                "position tensor has {} values, expected {f} × {n} × 3",
                self.positions.len()
            )));
        }
        if let Some(o) = &self.orientations {
            if o.len() != f * n * 4 {
                return Err(Error::Dataset(format!(
                    "orientation tensor has {} values, expected {f} × {n} × 4",
                    o.len()
                )));
            }
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Dataset("timestamps must be strictly increasing".into()));
        }
        if !self.positions.iter().all(|p| p.is_finite()) || !self.timestamps.iter().all(|t| t.is_finite()) {
            return Err(Error::Dataset("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    fn frame_slice(&self, frames: std::ops::Range<usize>) -> Self {
        let n = self.particles();
        Self {
            scene: self.scene.clone(),
            timestamps: self.timestamps[frames.clone()].to_vec(),
            positions: self.positions[frames.start * n * 3..frames.end * n * 3].to_vec(),
            orientations: self
                .orientations
                .as_ref()
                .map(|o| o[frames.start * n * 4..frames.end * n * 4].to_vec()),
            labels: self.labels.clone(),
            bbox: self.bbox,
            first_frame: self.first_frame + frames.start,
        }
    }
}

/// Evaluates every motion in closed form at the configured frame times.
pub fn generate(scene: &SceneConfig) -> Result<TrajectoryDataset> {
    let sampled = scene.sample()?;
    let timestamps = scene.timestamps();
    let n = sampled.p0.len();
    let mut positions = Vec::with_capacity(timestamps.len() * n * 3);
    let mut orientations = Vec::with_capacity(timestamps.len() * n * 4);
    // separate stream so noise never perturbs the sampled geometry
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, scene.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    for &t in &timestamps {
        let per_object: Vec<Quat> = scene
            .objects
            .iter()
            .map(|o| crate::geometry::orthonormal_to_quat(&o.motion.rotation(t)))
            .collect();
        for (p0, &k) in sampled.p0.iter().zip(&sampled.object) {
            let mut p = scene.objects[k].motion.position(*p0, t);
            if scene.noise_sigma > 0.0 {
                for a in 0..3 {
                    p[a] += noise.sample(&mut noise_rng);
                }
            }
            positions.extend_from_slice(&p.to_array());
            orientations.extend_from_slice(&per_object[k].to_array());
        }
    }
    let labels = sampled.object.iter().map(|&k| scene.objects[k].label).collect();
    let bbox = Bbox::of_points(&positions);
    Ok(TrajectoryDataset {
        scene: scene.clone(),
        timestamps,
        positions,
        orientations: Some(orientations),
        labels,
        bbox,
        first_frame: 0,
    })
}

/// Analytic velocity of `particle` at time `t`.
pub fn ground_truth_velocity(scene: &SceneConfig, particle: usize, t: f64) -> Result<Vec3> {
    let sampled = scene.sample()?;
    let p0 = *sampled
        .p0
        .get(particle)
        .ok_or_else(|| Error::InvalidInput(format!("scene has no particle {particle}")))?;
    Ok(scene.objects[sampled.object[particle]].motion.velocity(p0, t))
}

/// Splits at frame `round(train_fraction · frames)` into a training prefix
/// and an extrapolation suffix.
pub fn split(dataset: &TrajectoryDataset, train_fraction: f64) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let f = dataset.frames();
    let n_train = ((train_fraction * f as f64).round() as usize).clamp(1, f);
    Ok((dataset.frame_slice(0..n_train), dataset.frame_slice(n_train..f)))
}

/// Frame count and horizon of the built-in scenes: 1/60 frame gap, and the
/// first 61 of 81 frames (t ≤ 1) form the 75% training split.
pub const PRESET_FRAMES: usize = 81;
pub const PRESET_HORIZON: f64 = 4.0 / 3.0;

pub const PRESET_NAMES: [&str; 3] = ["fall_spin", "oscillate", "screw"];

fn boxed(half: f64) -> Shape {
    Shape::Box {
        half_extents: [half; 3],
    }
}

/// Built-in scenes: `fall_spin` (thrown box under gravity, spinning wheel,
/// static box), `oscillate` (spring box and pendulum) and `screw` (screw
/// motion next to a drifting box). `particles` is per object.
pub fn preset(name: &str, particles: usize, seed: u64) -> Result<SceneConfig> {
    let objects = match name {
        "fall_spin" | "fall+spin" => vec![
            ObjectSpec {
                shape: boxed(0.3),
                center: [-1.5, 0.0, 0.0],
                particles,
                motion: MotionSpec::ConstantAcceleration {
                    velocity: [0.4, 1.2, 0.0],
                    acceleration: [0.0, -2.0, 0.0],
                },
                label: 0,
            },
            ObjectSpec {
                shape: Shape::Box {
                    half_extents: [0.6, 0.6, 0.1],
                },
                center: [1.2, 0.0, 0.0],
                particles,
                motion: MotionSpec::ConstantAngular {
                    axis: [0.0, 0.0, 1.0],
                    rate: 1.5,
                    pivot: [1.2, 0.0, 0.0],
                },
                label: 1,
            },
            ObjectSpec {
                shape: boxed(0.3),
                center: [0.0, -1.2, 0.0],
                particles,
                motion: MotionSpec::Static,
                label: 2,
            },
        ],
        "oscillate" => vec![
            ObjectSpec {
                shape: boxed(0.3),
                center: [-1.0, 0.0, 0.0],
                particles,
                motion: MotionSpec::HarmonicLinear {
                    axis: [0.0, 1.0, 0.0],
                    amplitude: 0.4,
                    frequency: 1.5,
                    phase: 0.0,
                },
                label: 0,
            },
            ObjectSpec {
                shape: boxed(0.25),
                center: [1.0, -0.8, 0.0],
                particles,
                motion: MotionSpec::HarmonicAngular {
                    axis: [0.0, 0.0, 1.0],
                    amplitude: 0.4,
                    frequency: 1.2,
                    phase: 0.0,
                    pivot: [1.0, 0.6, 0.0],
                },
                label: 1,
            },
        ],
        "screw" => vec![
            ObjectSpec {
                shape: Shape::Box {
                    half_extents: [0.5, 0.15, 0.3],
                },
                center: [-0.8, 0.0, 0.0],
                particles,
                motion: MotionSpec::Screw {
                    velocity: [0.0, 0.6, 0.0],
                    axis: [0.0, 1.0, 0.0],
                    rate: 2.0,
                    pivot: [-0.8, 0.0, 0.0],
                },
                label: 0,
            },
            ObjectSpec {
                shape: boxed(0.3),
                center: [1.0, 0.0, 0.0],
                particles,
                motion: MotionSpec::ConstantVelocity {
                    velocity: [0.0, -0.5, 0.2],
                },
                label: 1,
            },
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown scene preset {other:?}; expected one of {PRESET_NAMES:?}"
            )))
        }
    };
    let scene = SceneConfig {
        name: name.replace('+', "_"),
        objects,
        frames: PRESET_FRAMES,
        horizon: PRESET_HORIZON,
        noise_sigma: 0.0,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(motion: MotionSpec) -> SceneConfig {
        SceneConfig {
            name: String::new(),
            objects: vec![ObjectSpec {
                shape: boxed(0.5),
                center: [1.0, 2.0, 3.0],
                particles: 20,
                motion,
                label: 7,
            }],
            frames: 41,
            horizon: 2.0,
            noise_sigma: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn static_object_never_moves() {
        let d = generate(&single(MotionSpec::Static)).unwrap();
        for f in 1..d.frames() {
            assert_eq!(d.frame_positions(f), d.frame_positions(0));
        }
    }

    #[test]
    fn constant_acceleration_matches_closed_form() {
        let a = [0.0, -9.8, 0.0];
        let scene = single(MotionSpec::ConstantAcceleration {
            velocity: [0.0; 3],
            acceleration: a,
        });
        let d = generate(&scene).unwrap();
        let p0 = scene.sample().unwrap().p0;
        for (f, &t) in d.timestamps.iter().enumerate() {
            for (i, p) in p0.iter().enumerate() {
                let expect = Vec3::new(p.x, p.y + a[1] * (0.5 * t * t), p.z);
                assert_eq!(d.position(f, i), expect);
            }
        }
    }

    #[test]
    fn half_turn_rate_returns_after_two_units() {
        let m = MotionSpec::ConstantAngular {
            axis: [0.0, 0.0, 1.0],
            rate: std::f64::consts::PI,
            pivot: [0.0; 3],
        };
        let p0 = Vec3::new(1.0, 0.0, 0.0);
        assert!((m.position(p0, 2.0) - p0).norm() < 1e-12);
        assert!((m.position(p0, 1.0) - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn ground_truth_velocity_examples() {
        assert_eq!(ground_truth_velocity(&single(MotionSpec::Static), 3, 0.7).unwrap(), Vec3::zero());
        let v = [0.3, -1.0, 2.0];
        let s = single(MotionSpec::ConstantVelocity { velocity: v });
        for t in [0.0, 0.5, 1.9] {
            assert_eq!(ground_truth_velocity(&s, 5, t).unwrap(), Vec3::from_array(v));
        }
        let (amp, w, phi) = (0.4, 3.0, 0.2);
        let s = single(MotionSpec::HarmonicLinear {
            axis: [0.0, 1.0, 0.0],
            amplitude: amp,
            frequency: w,
            phase: phi,
        });
        for t in [0.0, 0.3, 1.1] {
            let v = ground_truth_velocity(&s, 0, t).unwrap();
            assert!((v - Vec3::new(0.0, amp * w * (w * t + phi).cos(), 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn split_sizes() {
        let mut s = single(MotionSpec::Static);
        s.frames = 88;
        let d = generate(&s).unwrap();
        let (a, b) = split(&d, 0.75).unwrap();
        assert_eq!((a.frames(), b.frames()), (66, 22));
        assert_eq!(b.first_frame, 66);
        assert!(a.timestamps.last().unwrap() < &b.timestamps[0]);
        let (a, b) = split(&d, 1.0).unwrap();
        assert_eq!((a.frames(), b.frames()), (88, 0));
    }

    #[test]
    fn presets_have_the_expected_layout() {
        let a = preset("fall+spin", 100, 0).unwrap();
        assert_eq!(a.objects.len(), 3);
        let d = generate(&a).unwrap();
        assert_eq!(d.labels.iter().collect::<BTreeSet<_>>().len(), 3);
        let (train, extra) = split(&d, 0.75).unwrap();
        assert_eq!((train.frames(), extra.frames()), (61, 20));
        assert!((train.timestamps[60] - 1.0).abs() < 1e-12);
        assert!((train.timestamps[1] - 1.0 / 60.0).abs() < 1e-15);
        for name in PRESET_NAMES {
            let n = preset(name, 150, 1).unwrap().particle_count();
            assert!((300..=1500).contains(&n), "{name}: {n}");
        }
    }

    #[test]
    fn config_errors() {
        let mut s = single(MotionSpec::Static);
        s.objects.push(s.objects[0].clone());
        assert!(matches!(generate(&s), Err(Error::Config(_))));
        s.objects.clear();
        assert!(matches!(generate(&s), Err(Error::Config(_))));
        let s = single(MotionSpec::ConstantAngular {
            axis: [0.0, 0.0, 2.0],
            rate: 1.0,
            pivot: [0.0; 3],
        });
        assert!(generate(&s).is_err());
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let mut s = preset("screw", 120, 9).unwrap();
        s.noise_sigma = 1e-3;
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn noise_leaves_geometry_sampling_alone() {
        let clean = preset("oscillate", 100, 4).unwrap();
        let mut noisy = clean.clone();
        noisy.noise_sigma = 1e-3;
        let (a, b) = (generate(&clean).unwrap(), generate(&noisy).unwrap());
        let max = a
            .positions
            .iter()
            .zip(&b.positions)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max > 0.0 && max < 1e-2);
    }

    fn motions() -> impl Strategy<Value = MotionSpec> {
        let v = proptest::array::uniform3(-2.0..2.0f64);
        let axis = proptest::array::uniform3(-1.0..1.0f64)
            .prop_filter("non-zero", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-2)
            .prop_map(|a| {
                let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                [a[0] / n, a[1] / n, a[2] / n]
            });
        prop_oneof![
            v.clone().prop_map(|velocity| MotionSpec::ConstantVelocity { velocity }),
            (v.clone(), v.clone()).prop_map(|(velocity, acceleration)| MotionSpec::ConstantAcceleration {
                velocity,
                acceleration
            }),
            (axis.clone(), -3.0..3.0f64, v.clone()).prop_map(|(axis, rate, pivot)| MotionSpec::ConstantAngular {
                axis,
                rate,
                pivot
            }),
            (axis.clone(), 0.0..1.0f64, 0.5..4.0f64, -1.0..1.0f64).prop_map(|(axis, amplitude, frequency, phase)| {
                MotionSpec::HarmonicLinear {
                    axis,
                    amplitude,
                    frequency,
                    phase,
                }
            }),
            (axis.clone(), 0.0..1.0f64, 0.5..4.0f64, -1.0..1.0f64, v.clone()).prop_map(
                |(axis, amplitude, frequency, phase, pivot)| MotionSpec::HarmonicAngular {
                    axis,
                    amplitude,
                    frequency,
                    phase,
                    pivot
                }
            ),
            (v.clone(), axis, -3.0..3.0f64, v).prop_map(|(velocity, axis, rate, pivot)| MotionSpec::Screw {
                velocity,
                axis,
                rate,
                pivot
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn objects_stay_rigid(m in motions(), seed in 0u64..100) {
            let mut s = single(m);
            s.objects[0].particles = 8;
            s.seed = seed;
            let d = generate(&s).unwrap();
            let first = d.frame_positions(0);
            for f in 1..d.frames() {
                let cur = d.frame_positions(f);
                for i in 0..8 {
                    for j in 0..i {
                        let a = (first[i] - first[j]).norm();
                        let b = (cur[i] - cur[j]).norm();
                        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                    }
                }
            }
        }

        #[test]
        fn velocity_matches_central_differences(m in motions(), t in 0.1..1.9f64) {
            let p0 = Vec3::new(0.3, -0.2, 0.9);
            let h = 1e-3;
            let fd = (m.position(p0, t + h) - m.position(p0, t - h)).scale(0.5 / h);
            // O(h²) with third derivatives bounded by the parameter ranges
            prop_assert!((fd - m.velocity(p0, t)).norm() <= 1e-4, "{:?}", m);
        }
    }
}
