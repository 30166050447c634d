//! Batched evaluation over particles, with the matching reverse passes.

use super::{unconstrained_velocity, CodeNet, DeformationDelta, Gradients, MlpTape, Networks, VelocityHead};
use crate::error::{Error, Result};
use crate::geometry::{Matrix3, Vector3};
use crate::scalar::Scalar;
use crate::velocity_field::{eval_velocity, VelocityComponents};

/// Codes of a set of particles, `n × L` row-major.
#[derive(Clone, Debug)]
pub struct CodeBatch<T> {
    pub codes: Vec<T>,
    tape: Option<MlpTape<T>>,
}

/// Velocities of a set of particles at one time.
#[derive(Clone, Debug)]
pub struct FieldBatch<T> {
    pub velocities: Vec<Vector3<T>>,
    /// Per-particle `𝕍`; empty for the unconstrained head.
    pub components: Vec<VelocityComponents<T>>,
    positions: Vec<Vector3<T>>,
    tape: FieldTape<T>,
}

#[derive(Clone, Debug)]
enum FieldTape<T> {
    Factored {
        neck: MlpTape<T>,
        h: Vec<T>,
        w: Vec<T>,
        weight: MlpTape<T>,
    },
    Direct {
        tape: MlpTape<T>,
    },
    Unconstrained {
        neck: MlpTape<T>,
        h: Vec<T>,
        m: Vec<T>,
        motion: MlpTape<T>,
    },
}

/// Deformation outputs for a set of particles at one time.
#[derive(Clone, Debug)]
pub struct DeformBatch<T> {
    pub deltas: Vec<DeformationDelta<T>>,
    tape: MlpTape<T>,
}

impl<T: Scalar> Networks<T> {
    /// Physics codes of particles with canonical positions `p0` (particle
    /// index = position in the slice).
    pub fn eval_codes(&self, p0: &[Vector3<T>]) -> Result<CodeBatch<T>> {
        match &self.code {
            CodeNet::Field(net) => {
                let input: Vec<T> = p0.iter().flat_map(|p| p.to_array()).collect();
                let (codes, tape) = net.forward_batch(&input, p0.len())?;
                Ok(CodeBatch {
                    codes,
                    tape: Some(tape),
                })
            }
            CodeNet::Table { dim, codes } => {
                if codes.len() != p0.len() * dim {
                    return Err(Error::shape("code table rows", codes.len() / dim, p0.len()));
                }
                Ok(CodeBatch {
                    codes: codes.clone(),
                    tape: None,
                })
            }
        }
    }

    pub fn backprop_codes(&self, batch: &CodeBatch<T>, d_codes: &[T], grads: &mut Gradients<T>) -> Result<()> {
        if d_codes.len() != batch.codes.len() {
            return Err(Error::shape("code gradient", batch.codes.len(), d_codes.len()));
        }
        match (&self.code, &batch.tape) {
            (CodeNet::Field(net), Some(tape)) => {
                net.backward_batch(tape, d_codes, &mut grads.code, false)?;
            }
            (CodeNet::Table { .. }, None) => {
                for (g, d) in grads.code.iter_mut().zip(d_codes) {
                    *g += *d;
                }
            }
            _ => return Err(Error::Config("code batch does not match the model".into())),
        }
        Ok(())
    }

    /// Velocities of particles with codes `codes` (`n × L`) at `positions`, time `t`.
    pub fn eval_field(&self, codes: &[T], positions: &[Vector3<T>], t: T) -> Result<FieldBatch<T>> {
        let n = positions.len();
        let l = self.code_dim();
        if codes.len() != n * l {
            return Err(Error::shape("codes", n * l, codes.len()));
        }
        match &self.head {
            VelocityHead::Factored { neck, weight } => {
                let (h, neck_tape) = neck.forward_batch(codes, n)?;
                let (w, weight_tape) = weight.forward_batch(&[t], 1)?;
                let k = self.config.bottleneck;
                let mut components = Vec::with_capacity(n);
                let mut velocities = Vec::with_capacity(n);
                for (i, p) in positions.iter().enumerate() {
                    let hi = &h[i * k..(i + 1) * k];
                    let mut v = [T::zero(); 6];
                    for (kk, &hk) in hi.iter().enumerate() {
                        let row = &w[kk * 6..kk * 6 + 6];
                        for j in 0..6 {
                            v[j] += hk * row[j];
                        }
                    }
                    let comps = VelocityComponents(v);
                    velocities.push(eval_velocity(&comps, *p));
                    components.push(comps);
                }
                Ok(FieldBatch {
                    velocities,
                    components,
                    positions: positions.to_vec(),
                    tape: FieldTape::Factored {
                        neck: neck_tape,
                        h,
                        w,
                        weight: weight_tape,
                    },
                })
            }
            VelocityHead::Direct { mlp } => {
                let mut input = Vec::with_capacity(n * (l + 1));
                for i in 0..n {
                    input.push(t);
                    input.extend_from_slice(&codes[i * l..(i + 1) * l]);
                }
                let (out, tape) = mlp.forward_batch(&input, n)?;
                let components: Vec<_> = out.chunks_exact(6).map(VelocityComponents::from_slice).collect();
                let velocities = components
                    .iter()
                    .zip(positions)
                    .map(|(c, p)| eval_velocity(c, *p))
                    .collect();
                Ok(FieldBatch {
                    velocities,
                    components,
                    positions: positions.to_vec(),
                    tape: FieldTape::Direct { tape },
                })
            }
            VelocityHead::Unconstrained { neck, motion } => {
                let (h, neck_tape) = neck.forward_batch(codes, n)?;
                let input: Vec<T> = positions.iter().flat_map(|p| [p.x, p.y, p.z, t]).collect();
                let (m, motion_tape) = motion.forward_batch(&input, n)?;
                let k = self.config.bottleneck;
                let velocities = (0..n)
                    .map(|i| unconstrained_velocity(&h[i * k..(i + 1) * k], &m[i * 3 * k..(i + 1) * 3 * k]))
                    .collect();
                Ok(FieldBatch {
                    velocities,
                    components: Vec::new(),
                    positions: positions.to_vec(),
                    tape: FieldTape::Unconstrained {
                        neck: neck_tape,
                        h,
                        m,
                        motion: motion_tape,
                    },
                })
            }
        }
    }

    /// `∂v/∂p` for every particle of the batch.
    pub fn field_jacobians(&self, batch: &FieldBatch<T>) -> Result<Vec<Matrix3<T>>> {
        match (&self.head, &batch.tape) {
            (VelocityHead::Unconstrained { motion, .. }, FieldTape::Unconstrained { h, motion: tape, .. }) => {
                let n = batch.positions.len();
                let k = self.config.bottleneck;
                let mut jac = vec![Matrix3::zero(); n];
                let mut scratch = vec![T::zero(); motion.params.len()];
                for a in 0..3 {
                    let mut up = vec![T::zero(); n * 3 * k];
                    for i in 0..n {
                        for kk in 0..k {
                            up[i * 3 * k + kk * 3 + a] = h[i * k + kk];
                        }
                    }
                    let ig = motion
                        .backward_batch(tape, &up, &mut scratch, true)?
                        .expect("input gradient requested");
                    for (i, j) in jac.iter_mut().enumerate() {
                        for b in 0..3 {
                            j.m[a][b] = ig[i * 4 + b];
                        }
                    }
                }
                Ok(jac)
            }
            (VelocityHead::Unconstrained { .. }, _) | (_, FieldTape::Unconstrained { .. }) => {
                Err(Error::Config("field batch does not match the model".into()))
            }
            _ => Ok(batch
                .components
                .iter()
                .map(crate::velocity_field::velocity_jacobian)
                .collect()),
        }
    }

    /// Reverse pass for upstream velocity gradients `dv`. Accumulates parameter
    /// gradients into `grads`, code gradients into `d_codes` (`n × L`) and
    /// position gradients into `d_positions`.
    pub fn backprop_field(
        &self,
        batch: &FieldBatch<T>,
        dv: &[Vector3<T>],
        grads: &mut Gradients<T>,
        d_codes: &mut [T],
        d_positions: &mut [Vector3<T>],
    ) -> Result<()> {
        let n = batch.positions.len();
        let l = self.code_dim();
        let k = self.config.bottleneck;
        if dv.len() != n || d_positions.len() != n {
            return Err(Error::shape("velocity gradient", n, dv.len().min(d_positions.len())));
        }
        if d_codes.len() != n * l {
            return Err(Error::shape("code gradient", n * l, d_codes.len()));
        }
        match (&self.head, &batch.tape) {
            (VelocityHead::Factored { neck, weight }, FieldTape::Factored { neck: nt, h, w, weight: wt }) => {
                let mut dw = vec![T::zero(); 6 * k];
                let mut dh = vec![T::zero(); n * k];
                for i in 0..n {
                    let dcomp = component_gradient(&batch.components[i], batch.positions[i], dv[i], &mut d_positions[i]);
                    let hi = &h[i * k..(i + 1) * k];
                    let dhi = &mut dh[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let row = &w[kk * 6..kk * 6 + 6];
                        let drow = &mut dw[kk * 6..kk * 6 + 6];
                        let mut acc = T::zero();
                        for j in 0..6 {
                            drow[j] += hi[kk] * dcomp[j];
                            acc += row[j] * dcomp[j];
                        }
                        dhi[kk] = acc;
                    }
                }
                let (g_neck, g_weight) = grads.head.split_at_mut(1);
                let ig = neck
                    .backward_batch(nt, &dh, &mut g_neck[0], true)?
                    .expect("input gradient requested");
                add_into(d_codes, &ig);
                weight.backward_batch(wt, &dw, &mut g_weight[0], false)?;
            }
            (VelocityHead::Direct { mlp }, FieldTape::Direct { tape }) => {
                let mut up = Vec::with_capacity(n * 6);
                for i in 0..n {
                    let dcomp = component_gradient(&batch.components[i], batch.positions[i], dv[i], &mut d_positions[i]);
                    up.extend_from_slice(&dcomp);
                }
                let ig = mlp
                    .backward_batch(tape, &up, &mut grads.head[0], true)?
                    .expect("input gradient requested");
                for i in 0..n {
                    add_into(&mut d_codes[i * l..(i + 1) * l], &ig[i * (l + 1) + 1..(i + 1) * (l + 1)]);
                }
            }
            (
                VelocityHead::Unconstrained { neck, motion },
                FieldTape::Unconstrained {
                    neck: nt,
                    h,
                    m,
                    motion: mt,
                },
            ) => {
                let mut dm = vec![T::zero(); n * 3 * k];
                let mut dh = vec![T::zero(); n * k];
                for i in 0..n {
                    let g = dv[i];
                    for kk in 0..k {
                        let base = i * 3 * k + kk * 3;
                        let hk = h[i * k + kk];
                        dm[base] = hk * g.x;
                        dm[base + 1] = hk * g.y;
                        dm[base + 2] = hk * g.z;
                        dh[i * k + kk] = m[base] * g.x + m[base + 1] * g.y + m[base + 2] * g.z;
                    }
                }
                let (g_neck, g_motion) = grads.head.split_at_mut(1);
                let ig = motion
                    .backward_batch(mt, &dm, &mut g_motion[0], true)?
                    .expect("input gradient requested");
                for (i, dp) in d_positions.iter_mut().enumerate() {
                    *dp += Vector3::from_slice(&ig[i * 4..i * 4 + 3]);
                }
                let ig = neck
                    .backward_batch(nt, &dh, &mut g_neck[0], true)?
                    .expect("input gradient requested");
                add_into(d_codes, &ig);
            }
            _ => return Err(Error::Config("field batch does not match the model".into())),
        }
        Ok(())
    }

    /// Deformation of particles with canonical positions `p0` and codes `codes` to time `t`.
    pub fn eval_deform(&self, p0: &[Vector3<T>], t: T, codes: &[T]) -> Result<DeformBatch<T>> {
        let net = self
            .deform
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no deformation field".into()))?;
        let n = p0.len();
        let l = self.code_dim();
        let with_code = !self.ablation.no_code_in_deform;
        if with_code && codes.len() != n * l {
            return Err(Error::shape("codes", n * l, codes.len()));
        }
        let width = net.input_dim();
        let mut input = Vec::with_capacity(n * width);
        for (i, p) in p0.iter().enumerate() {
            input.extend_from_slice(&[p.x, p.y, p.z, t]);
            if with_code {
                input.extend_from_slice(&codes[i * l..(i + 1) * l]);
            }
        }
        let (out, tape) = net.forward_batch(&input, n)?;
        let deltas = out
            .chunks_exact(net.output_dim())
            .map(DeformationDelta::from_raw)
            .collect();
        Ok(DeformBatch { deltas, tape })
    }

    /// Reverse pass through the displacement outputs only.
    pub fn backprop_deform(
        &self,
        batch: &DeformBatch<T>,
        d_dp: &[Vector3<T>],
        grads: &mut Gradients<T>,
        d_codes: &mut [T],
    ) -> Result<()> {
        let net = self
            .deform
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no deformation field".into()))?;
        let n = batch.deltas.len();
        if d_dp.len() != n {
            return Err(Error::shape("displacement gradient", n, d_dp.len()));
        }
        let out = net.output_dim();
        let mut up = vec![T::zero(); n * out];
        for (i, g) in d_dp.iter().enumerate() {
            up[i * out] = g.x;
            up[i * out + 1] = g.y;
            up[i * out + 2] = g.z;
        }
        let with_code = !self.ablation.no_code_in_deform;
        let ig = net.backward_batch(&batch.tape, &up, &mut grads.deform, with_code)?;
        if let Some(ig) = ig {
            let l = self.code_dim();
            let width = net.input_dim();
            for i in 0..n {
                add_into(&mut d_codes[i * l..(i + 1) * l], &ig[i * width + 4..(i + 1) * width]);
            }
        }
        Ok(())
    }
}

/// Gradient of `g · (𝕍·𝓑(p))` w.r.t. the six components; adds the position
/// gradient `g × ω` into `d_position`.
fn component_gradient<T: Scalar>(
    comps: &VelocityComponents<T>,
    p: Vector3<T>,
    g: Vector3<T>,
    d_position: &mut Vector3<T>,
) -> [T; 6] {
    let w = comps.angular();
    *d_position += g.cross(w);
    let dw = p.cross(g);
    [g.x, g.y, g.z, dw.z, dw.y, dw.x]
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
