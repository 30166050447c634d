//! Deformation-aided fitting of the velocity model to particle trajectories.
//!
//! Each step samples frames `t`, deforms the canonical particles to
//! `t' = t − Δt`, transports them one mid-point step to `t`, and penalizes the
//! distance to the observed positions at both times:
//!
//! ```text
//! loss = λ_vel · MSE(transported, observed_t) + λ_deform · MSE(deformed, observed_t')
//! ```
//!
//! Without a deformation field the canonical particles are transported from
//! `t = 0` in two steps of `t/2` and only the first term is used.
//!
//! All work happens in a normalized model space (see [`Normalization`]).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::quat_compose;
use crate::networks::batch::CodeBatch;
use crate::networks::{AblationFlags, NetworkConfig, PhysicsCode, VelocityHead};
use crate::optim::{Adam, AdamConfig};
use crate::scenegen::{Bbox, TrajectoryDataset};
use crate::transport::{advance_positions, backprop_step, transport_step, Kernel};
use crate::velocity_field::VelocityComponents;
use crate::{Gradients, KernelSet, Networks, Vec3};

/// Default transport step.
pub const DEFAULT_DT: f64 = 1.0 / 60.0;

/// Tolerance for matching `t − Δt` to a frame timestamp.
const FRAME_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dt: f64,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub lambda_deform: f64,
    pub lambda_vel: f64,
    /// Sampled frames per step; every particle is used at each.
    pub timestamps_per_step: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            iterations: 2000,
            optimizer: AdamConfig::default(),
            lambda_deform: 1.0,
            lambda_vel: 1.0,
            timestamps_per_step: 4,
            seed: 0,
            network: NetworkConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.lambda_deform >= 0.0 && self.lambda_vel >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.timestamps_per_step == 0 {
            return Err(Error::Config("timestamps_per_step must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.decay_factor > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings: {o:?}")));
        }
        self.network.validate()?;
        self.ablation.validate()
    }
}

/// Affine map from scene coordinates to model coordinates, `(p − center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Maps the box into the unit ball.
    pub fn from_bbox(b: &Bbox) -> Self {
        let half = 0.5 * b.diagonal();
        Self {
            center: b.center().to_array(),
            scale: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn to_model(&self, p: Vec3) -> Vec3 {
        (p - Vec3::from_array(self.center)).scale(1.0 / self.scale)
    }

    pub fn to_scene(&self, p: Vec3) -> Vec3 {
        p.scale(self.scale) + Vec3::from_array(self.center)
    }
}

/// A training dataset moved into model space, with the usable frame pairs.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub normalization: Normalization,
    pub timestamps: Vec<f64>,
    /// Per frame, model-space positions.
    pub frames: Vec<Vec<Vec3>>,
    /// `(frame at t, frame at t − Δt)`; the second is `None` without a deformation field.
    pub samples: Vec<(usize, Option<usize>)>,
}

impl TrainingData {
    pub fn new(dataset: &TrajectoryDataset, dt: f64, ablation: &AblationFlags) -> Result<Self> {
        Self::with_normalization(dataset, dt, ablation, Normalization::from_bbox(&dataset.bbox))
    }

    pub fn with_normalization(
        dataset: &TrajectoryDataset,
        dt: f64,
        ablation: &AblationFlags,
        normalization: Normalization,
    ) -> Result<Self> {
        dataset.validate()?;
        if dataset.frames() < 2 || dataset.particles() == 0 {
            return Err(Error::Dataset("training needs at least two frames and one particle".into()));
        }
        if dataset.timestamps[0].abs() > FRAME_TOL {
            return Err(Error::Dataset(format!(
                "the first frame must be the canonical frame at t = 0, got t = {}",
                dataset.timestamps[0]
            )));
        }
        let frames = (0..dataset.frames())
            .map(|f| dataset.frame_positions(f).into_iter().map(|p| normalization.to_model(p)).collect())
            .collect();
        let samples: Vec<_> = if ablation.no_deform_field {
            (1..dataset.frames()).map(|i| (i, None)).collect()
        } else {
            (1..dataset.frames())
                .filter_map(|i| dataset.frame_at(dataset.timestamps[i] - dt, FRAME_TOL).map(|j| (i, Some(j))))
                .collect()
        };
        if samples.is_empty() {
            return Err(Error::Dataset(format!("no pair of frames is separated by dt = {dt}")));
        }
        Ok(Self {
            normalization,
            timestamps: dataset.timestamps.clone(),
            frames,
            samples,
        })
    }

    pub fn canonical(&self) -> &[Vec3] {
        &self.frames[0]
    }

    pub fn particles(&self) -> usize {
        self.frames[0].len()
    }
}

/// Loss of one step, averaged over the sampled frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub velocity: f64,
    pub deform: f64,
}

/// Kernels at the canonical positions carrying their physics codes.
pub fn canonical_kernels(nets: &Networks, positions: &[Vec3]) -> Result<KernelSet> {
    let codes = nets.eval_codes(positions)?.codes;
    let l = nets.code_dim();
    Ok(KernelSet {
        kernels: positions
            .iter()
            .enumerate()
            .map(|(i, p)| Kernel::at(*p, PhysicsCode(codes[i * l..(i + 1) * l].to_vec())))
            .collect(),
        time: 0.0,
    })
}

/// Applies the deformation field: `p = p₀ + δp`, `r = r₀ ∘ δr`, `s = s₀ ⊙ δs`.
pub fn deform_to(canonical: &KernelSet, t: f64, nets: &Networks) -> Result<KernelSet> {
    let codes = canonical.stacked_codes(nets.code_dim())?;
    let batch = nets.eval_deform(&canonical.positions(), t, &codes)?;
    let kernels = canonical
        .kernels
        .iter()
        .zip(&batch.deltas)
        .map(|(k, d)| Kernel {
            position: k.position + d.dp,
            rotation: quat_compose(&k.rotation, &d.dr),
            scale: k.scale.hadamard(d.ds),
            opacity: k.opacity,
            color: k.color,
            code: k.code.clone(),
        })
        .collect();
    Ok(KernelSet { kernels, time: t })
}

/// `f_neck(z) · f_motion(p, t)`, the velocity of the non-divergence-free ablation.
pub fn ablation_velocity_nobasis(z: &PhysicsCode<f64>, p: Vec3, t: f64, nets: &Networks) -> Result<Vec3> {
    match nets.head {
        VelocityHead::Unconstrained { .. } => nets.velocity(z, p, t),
        _ => Err(Error::Config("model was not built with no_divfree_basis".into())),
    }
}

/// `𝕍_t = MLP(z, t)`, the components of the ablation without the bottleneck product.
pub fn ablation_velocity_nodecomp(z: &PhysicsCode<f64>, t: f64, nets: &Networks) -> Result<VelocityComponents<f64>> {
    match nets.head {
        VelocityHead::Direct { .. } => nets.velocity_components(z, t),
        _ => Err(Error::Config("model was not built with no_bottleneck_decomp".into())),
    }
}

fn mse(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).norm_squared()).sum::<f64>() / a.len() as f64
}

/// `∂(w · MSE)/∂a`.
fn mse_grad(a: &[Vec3], b: &[Vec3], w: f64) -> Vec<Vec3> {
    let k = 2.0 * w / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (*x - *y).scale(k)).collect()
}

struct SampleOutput {
    loss: StepLoss,
    grads: Gradients,
    d_codes: Vec<f64>,
}

fn sample_loss(
    nets: &Networks,
    data: &TrainingData,
    config: &TrainConfig,
    codes: &[f64],
    sample: (usize, Option<usize>),
    want_grad: bool,
) -> Result<SampleOutput> {
    let (fi, prev) = sample;
    let t = data.timestamps[fi];
    let target = &data.frames[fi];
    let canonical = data.canonical();
    let mut grads = nets.zero_gradients();
    let mut d_codes = vec![0.0; codes.len()];
    match prev {
        Some(pj) => {
            let t_prev = data.timestamps[pj];
            let deform = nets.eval_deform(canonical, t_prev, codes)?;
            let start: Vec<Vec3> = canonical.iter().zip(&deform.deltas).map(|(p, d)| *p + d.dp).collect();
            let step = advance_positions(nets, codes, &start, t_prev, t - t_prev)?;
            let velocity = mse(&step.positions, target);
            let deform_loss = mse(&start, &data.frames[pj]);
            let loss = StepLoss {
                total: config.lambda_vel * velocity + config.lambda_deform * deform_loss,
                velocity,
                deform: deform_loss,
            };
            if want_grad {
                let up = mse_grad(&step.positions, target, config.lambda_vel);
                let mut d_start = backprop_step(nets, &step, &up, &mut grads, &mut d_codes)?;
                for (d, g) in d_start.iter_mut().zip(mse_grad(&start, &data.frames[pj], config.lambda_deform)) {
                    *d += g;
                }
                nets.backprop_deform(&deform, &d_start, &mut grads, &mut d_codes)?;
            }
            Ok(SampleOutput { loss, grads, d_codes })
        }
        None => {
            let half = 0.5 * t;
            let first = advance_positions(nets, codes, canonical, 0.0, half)?;
            let second = advance_positions(nets, codes, &first.positions, half, half)?;
            let velocity = mse(&second.positions, target);
            let loss = StepLoss {
                total: config.lambda_vel * velocity,
                velocity,
                deform: 0.0,
            };
            if want_grad {
                let up = mse_grad(&second.positions, target, config.lambda_vel);
                let d_mid = backprop_step(nets, &second, &up, &mut grads, &mut d_codes)?;
                backprop_step(nets, &first, &d_mid, &mut grads, &mut d_codes)?;
            }
            Ok(SampleOutput { loss, grads, d_codes })
        }
    }
}

fn run_samples(
    nets: &Networks,
    data: &TrainingData,
    config: &TrainConfig,
    codes: &[f64],
    samples: &[(usize, Option<usize>)],
    want_grad: bool,
    threads: usize,
) -> Result<Vec<SampleOutput>> {
    let threads = threads.clamp(1, samples.len().max(1));
    if threads == 1 {
        return samples
            .iter()
            .map(|&s| sample_loss(nets, data, config, codes, s, want_grad))
            .collect();
    }
    // contiguous chunks, reassembled in sample order
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&s| sample_loss(nets, data, config, codes, s, want_grad))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}

fn reduce(outputs: Vec<SampleOutput>) -> (StepLoss, Option<(Gradients, Vec<f64>)>) {
    let n = outputs.len() as f64;
    let mut loss = StepLoss::default();
    let mut acc: Option<(Gradients, Vec<f64>)> = None;
    for o in outputs {
        loss.total += o.loss.total / n;
        loss.velocity += o.loss.velocity / n;
        loss.deform += o.loss.deform / n;
        match &mut acc {
            None => acc = Some((o.grads, o.d_codes)),
            Some((g, d)) => {
                g.add(&o.grads);
                for (a, b) in d.iter_mut().zip(&o.d_codes) {
                    *a += *b;
                }
            }
        }
    }
    if let Some((g, d)) = &mut acc {
        g.scale(1.0 / n);
        d.iter_mut().for_each(|x| *x /= n);
    }
    (loss, acc)
}

/// Loss over the given `(frame, previous frame)` samples.
pub fn batch_loss(
    nets: &Networks,
    data: &TrainingData,
    config: &TrainConfig,
    samples: &[(usize, Option<usize>)],
) -> Result<StepLoss> {
    let codes = nets.eval_codes(data.canonical())?.codes;
    let outs = run_samples(nets, data, config, &codes, samples, false, 1)?;
    Ok(reduce(outs).0)
}

/// Loss and its gradient w.r.t. every network parameter.
pub fn loss_and_gradient(
    nets: &Networks,
    data: &TrainingData,
    config: &TrainConfig,
    samples: &[(usize, Option<usize>)],
    threads: usize,
) -> Result<(StepLoss, Gradients)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let code_batch: CodeBatch<f64> = nets.eval_codes(data.canonical())?;
    let outs = run_samples(nets, data, config, &code_batch.codes, samples, true, threads)?;
    let (loss, acc) = reduce(outs);
    let (mut grads, d_codes) = acc.expect("at least one sample");
    nets.backprop_codes(&code_batch, &d_codes, &mut grads)?;
    Ok((loss, grads))
}

/// Stateful optimizer loop over one dataset.
pub struct Trainer {
    pub nets: Networks,
    pub data: TrainingData,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    threads: usize,
    iteration: usize,
}

impl Trainer {
    pub fn new(dataset: &TrajectoryDataset, config: TrainConfig, threads: usize) -> Result<Self> {
        config.validate()?;
        let data = TrainingData::new(dataset, config.dt, &config.ablation)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = Networks::init(
            config.network.clone(),
            config.ablation,
            data.particles(),
            data.canonical(),
            &mut init_rng,
        )?;
        Ok(Self::from_parts(nets, data, config, threads))
    }

    /// Continues from existing networks.
    pub fn from_parts(nets: Networks, data: TrainingData, config: TrainConfig, threads: usize) -> Self {
        let sizes: Vec<usize> = nets.param_blocks().iter().map(|b| b.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Self {
            adam: Adam::new(config.optimizer.clone(), &sizes),
            nets,
            data,
            config,
            rng,
            threads: threads.max(1),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One optimizer update. On a non-finite loss or gradient the networks are
    /// left untouched and [`Error::Diverged`] is returned.
    pub fn step(&mut self) -> Result<StepLoss> {
        let samples: Vec<_> = (0..self.config.timestamps_per_step)
            .map(|_| self.data.samples[self.rng.random_range(0..self.data.samples.len())])
            .collect();
        let diverged = |nets: &Networks, iteration| Error::Diverged {
            iteration,
            last_good: Box::new(nets.clone()),
        };
        let (loss, grads) = match loss_and_gradient(&self.nets, &self.data, &self.config, &samples, self.threads) {
            Ok(v) => v,
            Err(Error::NumericOverflow { .. }) => return Err(diverged(&self.nets, self.iteration)),
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(diverged(&self.nets, self.iteration));
        }
        let lr = self.config.optimizer.rate_at(self.iteration, self.config.iterations);
        let g = grads.blocks();
        self.adam.step(&mut self.nets.param_blocks_mut(), &g, lr);
        self.iteration += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
    /// Zero when produced in determinism mode.
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

/// Networks plus what is needed to query them in scene coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub nets: Networks,
    pub normalization: Normalization,
    /// Model-space canonical positions.
    pub canonical: Vec<Vec3>,
    pub dt: f64,
    /// Last training timestamp.
    pub train_end: f64,
    pub config: TrainConfig,
}

impl TrainedModel {
    pub fn canonical_kernels(&self) -> Result<KernelSet> {
        canonical_kernels(&self.nets, &self.canonical)
    }

    /// Model-space kernels at `t`: deformed, or transported from `t = 0` in two
    /// steps without a deformation field.
    pub fn state_at(&self, t: f64) -> Result<KernelSet> {
        let canonical = self.canonical_kernels()?;
        if self.nets.deform.is_some() {
            deform_to(&canonical, t, &self.nets)
        } else if t > 0.0 {
            let mid = transport_step(&canonical, 0.5 * t, &self.nets)?;
            let mut end = transport_step(&mid, 0.5 * t, &self.nets)?;
            end.time = t;
            Ok(end)
        } else {
            Ok(canonical)
        }
    }

    /// Time at which extrapolation starts: the last supervised start state.
    pub fn extrapolation_start(&self) -> f64 {
        (self.train_end - self.dt).max(0.0)
    }

    /// Scene-space kernels at increasing times. Times up to
    /// [`Self::extrapolation_start`] come straight from [`Self::state_at`];
    /// later ones are transported forward in steps no longer than `dt`.
    pub fn predict(&self, times: &[f64]) -> Result<Vec<KernelSet>> {
        if times.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::InvalidInput("prediction times must be non-decreasing".into()));
        }
        let start = self.extrapolation_start();
        let mut cur: Option<KernelSet> = None;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            let state = if t <= start {
                self.state_at(t)?
            } else {
                let mut s = match cur.take() {
                    Some(s) => s,
                    None => self.state_at(start)?,
                };
                let span = t - s.time;
                if span > 0.0 {
                    let n = ((span / self.dt) - 1e-9).ceil().max(1.0) as usize;
                    let h = span / n as f64;
                    for _ in 0..n {
                        s = transport_step(&s, h, &self.nets)?;
                    }
                    s.time = t;
                }
                cur = Some(s.clone());
                s
            };
            out.push(self.to_scene(state));
        }
        Ok(out)
    }

    fn to_scene(&self, mut set: KernelSet) -> KernelSet {
        for k in &mut set.kernels {
            k.position = self.normalization.to_scene(k.position);
            k.scale = k.scale.scale(self.normalization.scale);
        }
        set
    }
}

/// Fits a fresh model. Deterministic for a given dataset, config and seed,
/// whatever the thread count.
pub fn train(dataset: &TrajectoryDataset, config: &TrainConfig, threads: usize) -> Result<(TrainedModel, TrainReport)> {
    train_with(dataset, config, threads, |_, _| {})
}

/// [`train`] with a per-iteration callback `(iteration, loss)`.
pub fn train_with<F: FnMut(usize, &StepLoss)>(
    dataset: &TrajectoryDataset,
    config: &TrainConfig,
    threads: usize,
    mut on_step: F,
) -> Result<(TrainedModel, TrainReport)> {
    let clock = Instant::now();
    let mut trainer = Trainer::new(dataset, config.clone(), threads)?;
    let mut losses = Vec::with_capacity(config.iterations);
    for i in 0..config.iterations {
        let loss = trainer.step()?;
        on_step(i, &loss);
        losses.push(loss.total);
    }
    let model = TrainedModel {
        canonical: trainer.data.canonical().to_vec(),
        normalization: trainer.data.normalization,
        dt: config.dt,
        train_end: *trainer.data.timestamps.last().expect("non-empty"),
        config: config.clone(),
        nets: trainer.nets,
    };
    let report = TrainReport {
        iterations: losses.len(),
        losses,
        seed: config.seed,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((model, report))
}
