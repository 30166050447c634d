//! The coordinate networks of the velocity model and their ablation variants.
//!
//! * `f_code`: canonical position → physics code `z ∈ ℝᴸ`
//! * `f_neck`: `z` → bottleneck vector `h ∈ ℝᴷ`
//! * `f_weight`: time → `K × 6` weight matrix `W_t`; `𝕍_t = h · W_t`
//! * `f_deform`: `(p₀, t, z)` → `(δp, δr, δs)`
//!
//! Batched evaluation and reverse passes live in [`batch`].

pub mod batch;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{mlp_forward, mlp_gradient, Mlp, MlpSpec, MlpTape};

use crate::error::{Error, Result};
use crate::geometry::{UnitQuaternion, Vector3};
use crate::scalar::Scalar;
use crate::velocity_field::{eval_velocity, VelocityComponents};

/// Architecture hyper-parameters. Defaults are the published ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Physics code dimension `L`.
    pub code_dim: usize,
    /// Number of motion patterns `K`.
    pub bottleneck: usize,
    pub encoding_degree: usize,
    pub code_hidden: Vec<usize>,
    /// Hidden widths of `f_neck`; empty means `[4L, 4L]`.
    pub neck_hidden: Vec<usize>,
    pub weight_hidden: Vec<usize>,
    pub weight_skips: Vec<usize>,
    pub deform_hidden: Vec<usize>,
    pub deform_skips: Vec<usize>,
}

pub const DEFAULT_CODE_DIM: usize = 16;
pub const DEFAULT_BOTTLENECK: usize = 16;
/// `K` used for cluttered multi-object scenes.
pub const CLUTTERED_BOTTLENECK: usize = 32;
pub const DEFAULT_ENCODING_DEGREE: usize = 8;

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            code_dim: DEFAULT_CODE_DIM,
            bottleneck: DEFAULT_BOTTLENECK,
            encoding_degree: DEFAULT_ENCODING_DEGREE,
            // 4 linear layers
            code_hidden: vec![128; 3],
            neck_hidden: Vec::new(),
            // 5 linear layers, skip on the third
            weight_hidden: vec![128; 4],
            weight_skips: vec![3],
            // 6 linear layers, skip on the third
            deform_hidden: vec![128; 5],
            deform_skips: vec![3],
        }
    }
}

impl NetworkConfig {
    /// The wider deformation network used for hard real-world captures.
    pub fn large_deform() -> Self {
        Self {
            deform_hidden: vec![256; 7],
            ..Self::default()
        }
    }

    fn neck_widths(&self) -> Vec<usize> {
        if self.neck_hidden.is_empty() {
            vec![4 * self.code_dim; 2]
        } else {
            self.neck_hidden.clone()
        }
    }

    pub fn code_spec(&self) -> MlpSpec {
        MlpSpec {
            encoded_inputs: 3,
            raw_inputs: 0,
            encoding_degree: self.encoding_degree,
            hidden: self.code_hidden.clone(),
            output: self.code_dim,
            skips: Vec::new(),
        }
    }

    pub fn neck_spec(&self) -> MlpSpec {
        MlpSpec {
            encoded_inputs: 0,
            raw_inputs: self.code_dim,
            encoding_degree: 0,
            hidden: self.neck_widths(),
            output: self.bottleneck,
            skips: Vec::new(),
        }
    }

    pub fn weight_spec(&self) -> MlpSpec {
        MlpSpec {
            encoded_inputs: 1,
            raw_inputs: 0,
            encoding_degree: self.encoding_degree,
            hidden: self.weight_hidden.clone(),
            output: 6 * self.bottleneck,
            skips: self.weight_skips.clone(),
        }
    }

    /// `𝕍_t = MLP(z, t)` used when the bottleneck factorization is removed.
    pub fn direct_spec(&self) -> MlpSpec {
        MlpSpec {
            encoded_inputs: 1,
            raw_inputs: self.code_dim,
            encoding_degree: self.encoding_degree,
            hidden: self.weight_hidden.clone(),
            output: 6,
            skips: self.weight_skips.clone(),
        }
    }

    /// `f_motion(p, t)`, reshaped to `K × 3`, used without the rigid basis.
    pub fn motion_spec(&self) -> MlpSpec {
        MlpSpec {
            encoded_inputs: 4,
            raw_inputs: 0,
            encoding_degree: self.encoding_degree,
            hidden: self.weight_hidden.clone(),
            output: 3 * self.bottleneck,
            skips: self.weight_skips.clone(),
        }
    }

    pub fn deform_spec(&self, ablation: &AblationFlags) -> MlpSpec {
        MlpSpec {
            encoded_inputs: 4,
            raw_inputs: if ablation.no_code_in_deform { 0 } else { self.code_dim },
            encoding_degree: self.encoding_degree,
            hidden: self.deform_hidden.clone(),
            output: if ablation.no_scale_deform { 7 } else { 10 },
            skips: self.deform_skips.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || self.bottleneck == 0 {
            return Err(Error::Config("code_dim and bottleneck must be positive".into()));
        }
        self.code_spec().validate()?;
        self.neck_spec().validate()?;
        self.weight_spec().validate()?;
        self.deform_spec(&AblationFlags::default()).validate()
    }
}

/// The ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// A free per-particle code table replaces `f_code`.
    pub learnable_code: bool,
    /// Velocity is `f_neck(z) · f_motion(p, t)`, not divergence-free.
    pub no_divfree_basis: bool,
    /// `𝕍_t = MLP(z, t)` without the bottleneck product.
    pub no_bottleneck_decomp: bool,
    /// No deformation field; kernels are transported from `t = 0` in two steps.
    pub no_deform_field: bool,
    /// `f_deform(p₀, t)` without the physics code.
    pub no_code_in_deform: bool,
    /// `δs` fixed to one.
    pub no_scale_deform: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = [
        "learnable_code",
        "no_divfree_basis",
        "no_bottleneck_decomp",
        "no_deform_field",
        "no_code_in_deform",
        "no_scale_deform",
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name {
            "full" | "none" => {}
            "learnable_code" => f.learnable_code = true,
            "no_divfree_basis" => f.no_divfree_basis = true,
            "no_bottleneck_decomp" => f.no_bottleneck_decomp = true,
            "no_deform_field" => f.no_deform_field = true,
            "no_code_in_deform" => f.no_code_in_deform = true,
            "no_scale_deform" => f.no_scale_deform = true,
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        }
        Ok(f)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let on = [
            self.learnable_code,
            self.no_divfree_basis,
            self.no_bottleneck_decomp,
            self.no_deform_field,
            self.no_code_in_deform,
            self.no_scale_deform,
        ];
        Self::NAMES
            .iter()
            .zip(on)
            .filter_map(|(n, b)| b.then_some(*n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_divfree_basis && self.no_bottleneck_decomp {
            return Err(Error::Config(
                "no_divfree_basis and no_bottleneck_decomp replace the same head; pick one".into(),
            ));
        }
        Ok(())
    }
}

/// Per-particle latent physics code `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsCode<T>(pub Vec<T>);

/// Bottleneck vector `h ∈ ℝᴷ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckVector<T>(pub Vec<T>);

/// `K × 6` matrix, row-major: element `(k, j)` is `data[k * 6 + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix<T> {
    pub rows: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn get(&self, k: usize, j: usize) -> T {
        self.data[k * 6 + j]
    }
}

/// Output of `f_deform`: displacement, rotation change and scale factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformationDelta<T> {
    pub dp: Vector3<T>,
    pub dr: UnitQuaternion<T>,
    pub ds: Vector3<T>,
}

impl<T: Scalar> DeformationDelta<T> {
    pub fn identity() -> Self {
        Self {
            dp: Vector3::zero(),
            dr: UnitQuaternion::identity(),
            ds: Vector3::new(T::one(), T::one(), T::one()),
        }
    }

    /// Maps raw network outputs: `δr = normalize((1,0,0,0) + raw[3..7])`
    /// (identity when that vanishes) and `δs = exp(raw[7..10])`.
    pub fn from_raw(raw: &[T]) -> Self {
        let dp = Vector3::new(raw[0], raw[1], raw[2]);
        let dr = UnitQuaternion::new(T::one() + raw[3], raw[4], raw[5], raw[6])
            .unwrap_or_else(|_| UnitQuaternion::identity());
        let ds = if raw.len() >= 10 {
            Vector3::new(raw[7].exp(), raw[8].exp(), raw[9].exp())
        } else {
            Vector3::new(T::one(), T::one(), T::one())
        };
        Self { dp, dr, ds }
    }
}

/// Source of the physics codes.
#[derive(Clone, Debug, PartialEq)]
pub enum CodeNet<T> {
    /// `z = f_code(p₀)`.
    Field(Mlp<T>),
    /// One free code per particle, `particles × dim` row-major.
    Table { dim: usize, codes: Vec<T> },
}

/// How `(z, p, t)` becomes a velocity.
#[derive(Clone, Debug, PartialEq)]
pub enum VelocityHead<T> {
    /// `v = f_neck(z) · f_weight(t) · 𝓑(p)`.
    Factored { neck: Mlp<T>, weight: Mlp<T> },
    /// `v = MLP(z, t) · 𝓑(p)`.
    Direct { mlp: Mlp<T> },
    /// `v = f_neck(z) · f_motion(p, t)`; not divergence-free.
    Unconstrained { neck: Mlp<T>, motion: Mlp<T> },
}

/// All networks of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T> {
    pub config: NetworkConfig,
    pub ablation: AblationFlags,
    pub code: CodeNet<T>,
    pub head: VelocityHead<T>,
    pub deform: Option<Mlp<T>>,
}

impl<T: Scalar> Networks<T> {
    /// Fresh parameters. The output layers of the deformation and velocity
    /// networks start at zero, so the initial motion is the identity.
    /// `particles` sizes the code table of the learnable-code ablation.
    pub fn init<R: Rng + ?Sized>(
        config: NetworkConfig,
        ablation: AblationFlags,
        particles: usize,
        canonical: &[Vector3<T>],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        let code_field = Mlp::init(config.code_spec(), rng, false)?;
        let code = if ablation.learnable_code {
            if canonical.len() != particles {
                return Err(Error::shape("canonical positions", particles, canonical.len()));
            }
            // same starting codes as the field variant
            let mut codes = Vec::with_capacity(particles * config.code_dim);
            for p in canonical {
                codes.extend(code_field.forward(&p.to_array())?);
            }
            CodeNet::Table {
                dim: config.code_dim,
                codes,
            }
        } else {
            CodeNet::Field(code_field)
        };
        let head = if ablation.no_bottleneck_decomp {
            VelocityHead::Direct {
                mlp: Mlp::init(config.direct_spec(), rng, true)?,
            }
        } else if ablation.no_divfree_basis {
            VelocityHead::Unconstrained {
                neck: Mlp::init(config.neck_spec(), rng, false)?,
                motion: Mlp::init(config.motion_spec(), rng, true)?,
            }
        } else {
            VelocityHead::Factored {
                neck: Mlp::init(config.neck_spec(), rng, false)?,
                weight: Mlp::init(config.weight_spec(), rng, true)?,
            }
        };
        let deform = if ablation.no_deform_field {
            None
        } else {
            Some(Mlp::init(config.deform_spec(&ablation), rng, true)?)
        };
        Ok(Self {
            config,
            ablation,
            code,
            head,
            deform,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.config.code_dim
    }

    /// Whether the velocity field is divergence-free by construction.
    pub fn is_divergence_free(&self) -> bool {
        !matches!(self.head, VelocityHead::Unconstrained { .. })
    }

    /// `f_code(p₀)`. Fails for the learnable-code ablation, use [`Self::code_for`].
    pub fn f_code(&self, p0: Vector3<T>) -> Result<PhysicsCode<T>> {
        match &self.code {
            CodeNet::Field(net) => Ok(PhysicsCode(net.forward(&p0.to_array())?)),
            CodeNet::Table { .. } => Err(Error::Config(
                "codes are a per-particle table; query by particle index".into(),
            )),
        }
    }

    /// Code of particle `index` with canonical position `p0`.
    pub fn code_for(&self, index: usize, p0: Vector3<T>) -> Result<PhysicsCode<T>> {
        match &self.code {
            CodeNet::Field(_) => self.f_code(p0),
            CodeNet::Table { dim, codes } => {
                let row = codes
                    .get(index * dim..(index + 1) * dim)
                    .ok_or_else(|| Error::InvalidInput(format!("no code for particle {index}")))?;
                Ok(PhysicsCode(row.to_vec()))
            }
        }
    }

    fn check_code(&self, z: &PhysicsCode<T>) -> Result<()> {
        if z.0.len() != self.code_dim() {
            return Err(Error::shape("physics code", self.code_dim(), z.0.len()));
        }
        Ok(())
    }

    fn neck(&self) -> Option<&Mlp<T>> {
        match &self.head {
            VelocityHead::Factored { neck, .. } | VelocityHead::Unconstrained { neck, .. } => Some(neck),
            VelocityHead::Direct { .. } => None,
        }
    }

    pub fn f_neck(&self, z: &PhysicsCode<T>) -> Result<BottleneckVector<T>> {
        self.check_code(z)?;
        let neck = self
            .neck()
            .ok_or_else(|| Error::Config("this model has no bottleneck network".into()))?;
        Ok(BottleneckVector(neck.forward(&z.0)?))
    }

    pub fn f_weight(&self, t: T) -> Result<WeightMatrix<T>> {
        match &self.head {
            VelocityHead::Factored { weight, .. } => Ok(WeightMatrix {
                rows: self.config.bottleneck,
                data: weight.forward(&[t])?,
            }),
            _ => Err(Error::Config("this model has no weight network".into())),
        }
    }

    /// `𝕍_t` for code `z` at time `t`.
    pub fn velocity_components(&self, z: &PhysicsCode<T>, t: T) -> Result<VelocityComponents<T>> {
        self.check_code(z)?;
        match &self.head {
            VelocityHead::Factored { .. } => {
                let h = self.f_neck(z)?;
                let w = self.f_weight(t)?;
                Ok(bottleneck_product(&h, &w))
            }
            VelocityHead::Direct { mlp } => {
                let mut input = vec![t];
                input.extend_from_slice(&z.0);
                Ok(VelocityComponents::from_slice(&mlp.forward(&input)?))
            }
            VelocityHead::Unconstrained { .. } => Err(Error::Config(
                "the unconstrained head has no velocity components".into(),
            )),
        }
    }

    /// Velocity of a particle with code `z` located at `p` at time `t`.
    pub fn velocity(&self, z: &PhysicsCode<T>, p: Vector3<T>, t: T) -> Result<Vector3<T>> {
        match &self.head {
            VelocityHead::Unconstrained { motion, .. } => {
                let h = self.f_neck(z)?;
                let m = motion.forward(&[p.x, p.y, p.z, t])?;
                Ok(unconstrained_velocity(&h.0, &m))
            }
            _ => Ok(eval_velocity(&self.velocity_components(z, t)?, p)),
        }
    }

    /// `f_deform(p₀, t, z)`; `z` is ignored when the code is not fed to it.
    pub fn f_deform(&self, p0: Vector3<T>, t: T, z: &PhysicsCode<T>) -> Result<DeformationDelta<T>> {
        let net = self
            .deform
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no deformation field".into()))?;
        let mut input = vec![p0.x, p0.y, p0.z, t];
        if !self.ablation.no_code_in_deform {
            self.check_code(z)?;
            input.extend_from_slice(&z.0);
        }
        Ok(DeformationDelta::from_raw(&net.forward(&input)?))
    }

    /// Parameter blocks in a fixed order: code, head (one or two), deform.
    pub fn param_blocks(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::with_capacity(4);
        v.push(match &self.code {
            CodeNet::Field(m) => &m.params,
            CodeNet::Table { codes, .. } => codes,
        });
        match &self.head {
            VelocityHead::Factored { neck, weight } => {
                v.push(&neck.params);
                v.push(&weight.params);
            }
            VelocityHead::Direct { mlp } => v.push(&mlp.params),
            VelocityHead::Unconstrained { neck, motion } => {
                v.push(&neck.params);
                v.push(&motion.params);
            }
        }
        if let Some(d) = &self.deform {
            v.push(&d.params);
        }
        v
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::with_capacity(4);
        v.push(match &mut self.code {
            CodeNet::Field(m) => &mut m.params,
            CodeNet::Table { codes, .. } => codes,
        });
        match &mut self.head {
            VelocityHead::Factored { neck, weight } => {
                v.push(&mut neck.params);
                v.push(&mut weight.params);
            }
            VelocityHead::Direct { mlp } => v.push(&mut mlp.params),
            VelocityHead::Unconstrained { neck, motion } => {
                v.push(&mut neck.params);
                v.push(&mut motion.params);
            }
        }
        if let Some(d) = &mut self.deform {
            v.push(&mut d.params);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.param_blocks().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::shape("flat parameters", n, flat.len()));
        }
        let mut off = 0;
        for b in self.param_blocks_mut() {
            let len = b.len();
            b.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        let blocks = self.param_blocks();
        let n_head = blocks.len() - 1 - usize::from(self.deform.is_some());
        Gradients {
            code: vec![T::zero(); blocks[0].len()],
            head: blocks[1..1 + n_head].iter().map(|b| vec![T::zero(); b.len()]).collect(),
            deform: self
                .deform
                .as_ref()
                .map(|d| vec![T::zero(); d.params.len()])
                .unwrap_or_default(),
        }
    }
}

/// Gradient buffers laid out like [`Networks::param_blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub code: Vec<T>,
    pub head: Vec<Vec<T>>,
    /// Empty when the model has no deformation field.
    pub deform: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn blocks(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.code];
        v.extend(self.head.iter().map(|b| b.as_slice()));
        if !self.deform.is_empty() {
            v.push(&self.deform);
        }
        v
    }

    pub fn flat(&self) -> Vec<T> {
        self.blocks().concat()
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        std::iter::once(&mut self.code)
            .chain(self.head.iter_mut())
            .chain(std::iter::once(&mut self.deform))
    }

    pub fn scale(&mut self, k: T) {
        self.blocks_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn add(&mut self, other: &Self) {
        let others: Vec<&Vec<T>> = std::iter::once(&other.code)
            .chain(other.head.iter())
            .chain(std::iter::once(&other.deform))
            .collect();
        for (a, b) in self.blocks_mut().zip(others) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|g| g.is_finite()))
    }
}

/// `𝕍 = h · W`.
pub fn bottleneck_product<T: Scalar>(h: &BottleneckVector<T>, w: &WeightMatrix<T>) -> VelocityComponents<T> {
    let mut v = [T::zero(); 6];
    for (k, &hk) in h.0.iter().enumerate() {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj += hk * w.data[k * 6 + j];
        }
    }
    VelocityComponents(v)
}

/// `v_a = Σ_k h_k M[k][a]` with `M` the `K × 3` reshape of `f_motion`.
pub(crate) fn unconstrained_velocity<T: Scalar>(h: &[T], m: &[T]) -> Vector3<T> {
    let mut v = Vector3::zero();
    for (k, &hk) in h.iter().enumerate() {
        v.x += hk * m[k * 3];
        v.y += hk * m[k * 3 + 1];
        v.z += hk * m[k * 3 + 2];
    }
    v
}
