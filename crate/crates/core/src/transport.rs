//! Interleaved mid-point transport of rigid kernels through the learned field.
//!
//! One step from `t'` to `t' + Δt`:
//!
//! ```text
//! v      = v(p_{t'}, t')
//! p_mid  = p_{t'} + Δt/2 · v
//! v_mid  = v(p_mid, t' + Δt/2)
//! p_t    = p_{t'} + Δt · v_mid
//! R_t    = (I + Δt · ∂v_mid/∂p_mid) · R_{t'}     (projected back onto SO(3))
//! s_t    = s_{t'}
//! ```
//!
//! Opacity, color and physics code ride along unchanged.

use crate::error::{Error, Result};
use crate::geometry::{orthonormal_to_quat, project_to_rotation, quat_to_rot, Matrix3, UnitQuaternion, Vector3};
use crate::networks::batch::FieldBatch;
use crate::networks::{Gradients, Networks, PhysicsCode};
use crate::scalar::Scalar;

/// One rigid particle.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    pub position: Vector3<T>,
    pub rotation: UnitQuaternion<T>,
    /// Per-axis scales, positive.
    pub scale: Vector3<T>,
    pub opacity: T,
    pub color: [T; 3],
    pub code: PhysicsCode<T>,
}

impl<T: Scalar> Kernel<T> {
    /// Unit-size, opaque, gray kernel at `position`.
    pub fn at(position: Vector3<T>, code: PhysicsCode<T>) -> Self {
        let s = T::lit(0.01);
        let half = T::lit(0.5);
        Self {
            position,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(s, s, s),
            opacity: T::one(),
            color: [half; 3],
            code,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.x > T::zero() && self.scale.y > T::zero() && self.scale.z > T::zero()) {
            return Err(Error::InvalidInput("kernel scale must be positive".into()));
        }
        if !(self.opacity >= T::zero() && self.opacity <= T::one()) {
            return Err(Error::InvalidInput("kernel opacity must lie in [0, 1]".into()));
        }
        if !self.position.is_finite() {
            return Err(Error::InvalidInput("kernel position is not finite".into()));
        }
        Ok(())
    }
}

/// Kernels at a common timestamp. Particle identity is the index.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet<T> {
    pub kernels: Vec<Kernel<T>>,
    pub time: T,
}

impl<T: Scalar> KernelSet<T> {
    pub fn positions(&self) -> Vec<Vector3<T>> {
        self.kernels.iter().map(|k| k.position).collect()
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Codes stacked `n × L`.
    pub fn stacked_codes(&self, dim: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.kernels.len() * dim);
        for k in &self.kernels {
            if k.code.0.len() != dim {
                return Err(Error::shape("kernel physics code", dim, k.code.0.len()));
            }
            out.extend_from_slice(&k.code.0);
        }
        Ok(out)
    }
}

/// Positions after one mid-point step, with what the reverse pass needs.
#[derive(Clone, Debug)]
pub struct PositionStep<T> {
    pub positions: Vec<Vector3<T>>,
    first: FieldBatch<T>,
    mid: FieldBatch<T>,
    dt: T,
}

impl<T: Scalar> PositionStep<T> {
    /// Field evaluated at the mid-point positions and time.
    pub fn mid_field(&self) -> &FieldBatch<T> {
        &self.mid
    }
}

fn check_finite<T: Scalar>(v: &[Vector3<T>], what: &str) -> Result<()> {
    match v.iter().position(|p| !p.is_finite()) {
        Some(particle) => Err(Error::NumericOverflow {
            particle,
            what: what.to_string(),
        }),
        None => Ok(()),
    }
}

/// Position part of one mid-point step for particles with codes `codes` (`n × L`).
pub fn advance_positions<T: Scalar>(
    nets: &Networks<T>,
    codes: &[T],
    positions: &[Vector3<T>],
    t: T,
    dt: T,
) -> Result<PositionStep<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    let half = dt * T::lit(0.5);
    let first = nets.eval_field(codes, positions, t)?;
    check_finite(&first.velocities, "velocity at the step start")?;
    let mid_pos: Vec<_> = positions
        .iter()
        .zip(&first.velocities)
        .map(|(p, v)| *p + v.scale(half))
        .collect();
    let mid = nets.eval_field(codes, &mid_pos, t + half)?;
    check_finite(&mid.velocities, "mid-point velocity")?;
    let out: Vec<_> = positions
        .iter()
        .zip(&mid.velocities)
        .map(|(p, v)| *p + v.scale(dt))
        .collect();
    check_finite(&out, "transported position")?;
    Ok(PositionStep {
        positions: out,
        first,
        mid,
        dt,
    })
}

/// Reverse pass of [`advance_positions`]. Returns the gradient w.r.t. the
/// input positions; parameter and code gradients are accumulated.
pub fn backprop_step<T: Scalar>(
    nets: &Networks<T>,
    step: &PositionStep<T>,
    d_out: &[Vector3<T>],
    grads: &mut Gradients<T>,
    d_codes: &mut [T],
) -> Result<Vec<Vector3<T>>> {
    let n = step.positions.len();
    if d_out.len() != n {
        return Err(Error::shape("position gradient", n, d_out.len()));
    }
    let half = step.dt * T::lit(0.5);
    // p_t = p' + Δt·v_mid(p_mid)
    let mut d_in = d_out.to_vec();
    let dv_mid: Vec<_> = d_out.iter().map(|g| g.scale(step.dt)).collect();
    let mut d_mid = vec![Vector3::zero(); n];
    nets.backprop_field(&step.mid, &dv_mid, grads, d_codes, &mut d_mid)?;
    // p_mid = p' + Δt/2·v(p')
    let dv_first: Vec<_> = d_mid.iter().map(|g| g.scale(half)).collect();
    for (a, b) in d_in.iter_mut().zip(&d_mid) {
        *a += *b;
    }
    nets.backprop_field(&step.first, &dv_first, grads, d_codes, &mut d_in)?;
    Ok(d_in)
}

/// One interleaved mid-point step of every kernel from `set.time` to `set.time + dt`.
pub fn transport_step<T: Scalar>(set: &KernelSet<T>, dt: T, nets: &Networks<T>) -> Result<KernelSet<T>> {
    let codes = set.stacked_codes(nets.code_dim())?;
    let step = advance_positions(nets, &codes, &set.positions(), set.time, dt)?;
    let jac = nets.field_jacobians(step.mid_field())?;
    let mut kernels = Vec::with_capacity(set.len());
    for (i, (k, p)) in set.kernels.iter().zip(&step.positions).enumerate() {
        let rotation = rotate(&k.rotation, &jac[i], dt).map_err(|e| match e {
            Error::InvalidInput(what) | Error::DegenerateRotation(what) => Error::NumericOverflow { particle: i, what },
            other => other,
        })?;
        kernels.push(Kernel {
            position: *p,
            rotation,
            scale: k.scale,
            opacity: k.opacity,
            color: k.color,
            code: k.code.clone(),
        });
    }
    Ok(KernelSet {
        kernels,
        time: set.time + dt,
    })
}

/// `R_t = proj((I + Δt·J)·R_{t'})`.
fn rotate<T: Scalar>(r: &UnitQuaternion<T>, jac: &Matrix3<T>, dt: T) -> Result<UnitQuaternion<T>> {
    let updated = (Matrix3::identity() + jac.scale(dt)) * quat_to_rot(r);
    Ok(orthonormal_to_quat(&project_to_rotation(&updated)?))
}

/// `n_steps` equal mid-point steps from `set.time` to `t1`.
pub fn transport_span<T: Scalar>(set: &KernelSet<T>, t1: T, n_steps: usize, nets: &Networks<T>) -> Result<KernelSet<T>> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("at least one step is required".into()));
    }
    if !(t1 > set.time) {
        return Err(Error::InvalidInput(format!(
            "target time {t1} must be after the start time {}",
            set.time
        )));
    }
    let dt = (t1 - set.time) / T::from_usize(n_steps).expect("step count");
    let t0 = set.time;
    let mut cur = set.clone();
    for s in 0..n_steps {
        cur = transport_step(&cur, dt, nets)?;
        // avoid drift in the accumulated time stamp
        cur.time = t0 + dt * T::from_usize(s + 1).expect("step count");
    }
    cur.time = t1;
    Ok(cur)
}

/// Gradients of `Σᵢ upstreamᵢ · p_t,i` for one transport step.
#[derive(Clone, Debug)]
pub struct TransportGradient<T> {
    pub params: Gradients<T>,
    /// W.r.t. the input positions.
    pub positions: Vec<Vector3<T>>,
    /// W.r.t. the kernels' physics codes, `n × L`.
    pub codes: Vec<T>,
}

/// Reverse-mode gradient of the transported positions w.r.t. the network
/// parameters (rotation and scale outputs do not contribute).
pub fn transport_gradient<T: Scalar>(
    set: &KernelSet<T>,
    dt: T,
    nets: &Networks<T>,
    upstream: &[Vector3<T>],
) -> Result<TransportGradient<T>> {
    if upstream.len() != set.len() {
        return Err(Error::shape("upstream position gradients", set.len(), upstream.len()));
    }
    let codes = set.stacked_codes(nets.code_dim())?;
    let step = advance_positions(nets, &codes, &set.positions(), set.time, dt)?;
    let mut params = nets.zero_gradients();
    let mut d_codes = vec![T::zero(); codes.len()];
    let positions = backprop_step(nets, &step, upstream, &mut params, &mut d_codes)?;
    Ok(TransportGradient {
        params,
        positions,
        codes: d_codes,
    })
}
