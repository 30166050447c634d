//! Rigid-motion grouping with soft object codes.
//!
//! Each particle holds a distribution `o_p` over `K_obj` objects. For every
//! object a weighted Kabsch fit gives a rigid transform `T_k` between two
//! frames; particles should move like the code-weighted blend of those
//! transforms, and neighbours should share codes.

use nalgebra::{Matrix3 as NMat3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::{Mat3, Vec3};

/// `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }
}

/// Relative singular-value floor below which the cross-covariance is rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Rigid transform minimizing `Σ wᵢ ‖R·aᵢ + t − bᵢ‖²`.
///
/// Needs at least three non-collinear points with positive weight.
pub fn weighted_kabsch(from: &[Vec3], to: &[Vec3], weights: &[f64]) -> Result<RigidTransform> {
    if from.len() != to.len() {
        return Err(Error::shape("target points", from.len(), to.len()));
    }
    if weights.len() != from.len() {
        return Err(Error::shape("weights", from.len(), weights.len()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    let mut ca = Vec3::zero();
    let mut cb = Vec3::zero();
    for ((a, b), &w) in from.iter().zip(to).zip(weights) {
        ca += a.scale(w);
        cb += b.scale(w);
    }
    ca = ca.scale(1.0 / total);
    cb = cb.scale(1.0 / total);
    // H = Σ w (a − ca)(b − cb)ᵀ
    let mut h = NMat3::<f64>::zeros();
    let mut spread = 0.0;
    for ((a, b), &w) in from.iter().zip(to).zip(weights) {
        let da = *a - ca;
        let db = *b - cb;
        spread += w * da.norm_squared();
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += w * da[r] * db[c];
            }
        }
    }
    let svd = SVD::new(h, true, true);
    let mut s = svd.singular_values;
    s.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
    if !(s[0] > 0.0 && s[1] > RANK_TOL * s[0].max(spread)) {
        return Err(Error::DegenerateConfiguration(format!(
            "point configuration has rank < 2 (singular values {:?})",
            s.as_slice()
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = NMat3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let rotation = Mat3::from_rows([
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ]);
    Ok(RigidTransform {
        rotation,
        translation: cb - rotation.mul_vec(ca),
    })
}

/// Soft assignment of `n` particles to `k` objects, `n × k` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCodes {
    pub k: usize,
    pub probs: Vec<f64>,
}

impl ObjectCodes {
    /// Row-wise softmax of `logits`.
    pub fn from_logits(logits: &[f64], k: usize) -> Self {
        let mut probs = vec![0.0; logits.len()];
        for (row, out) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, l) in out.iter_mut().zip(row) {
                *o = (l - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        Self { k, probs }
    }

    /// Hard one-hot codes.
    pub fn one_hot(ids: &[usize], k: usize) -> Result<Self> {
        let mut probs = vec![0.0; ids.len() * k];
        for (i, &id) in ids.iter().enumerate() {
            if id >= k {
                return Err(Error::InvalidInput(format!("object id {id} out of range for {k} objects")));
            }
            probs[i * k + id] = 1.0;
        }
        Ok(Self { k, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Most likely object per particle; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
                    .0
            })
            .collect()
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.probs[i * self.k + j]).collect()
    }
}

/// Objects whose total weight is below this fraction of the particle count
/// keep the identity transform.
const EMPTY_OBJECT_WEIGHT: f64 = 1e-9;

fn object_transforms(from: &[Vec3], to: &[Vec3], codes: &ObjectCodes) -> Result<Vec<RigidTransform>> {
    (0..codes.k)
        .map(|j| {
            let w = codes.column(j);
            if w.iter().sum::<f64>() <= EMPTY_OBJECT_WEIGHT * from.len() as f64 {
                Ok(RigidTransform::identity())
            } else {
                weighted_kabsch(from, to, &w)
            }
        })
        .collect()
}

fn check_codes(from: &[Vec3], to: &[Vec3], codes: &ObjectCodes) -> Result<()> {
    if from.len() != to.len() {
        return Err(Error::shape("target points", from.len(), to.len()));
    }
    if codes.len() != from.len() {
        return Err(Error::shape("object codes", from.len(), codes.len()));
    }
    if from.is_empty() {
        return Err(Error::InvalidInput("no points".into()));
    }
    Ok(())
}

/// Per-particle residuals `Σ_k o_pk·T_k(p) − p_t`.
fn dynamic_residuals(
    from: &[Vec3],
    to: &[Vec3],
    codes: &ObjectCodes,
    transforms: &[RigidTransform],
) -> Vec<Vec3> {
    from.iter()
        .zip(to)
        .enumerate()
        .map(|(i, (p, q))| {
            let mut blend = Vec3::zero();
            for (o, t) in codes.row(i).iter().zip(transforms) {
                blend += t.apply(*p).scale(*o);
            }
            blend - *q
        })
        .collect()
}

/// `(1/N) Σ_p ‖Σ_k o_pk·(T_k ∘ p) − (p + m_p)‖` with `p + m_p` the position in `to`.
pub fn ogc_dynamic_loss(from: &[Vec3], to: &[Vec3], codes: &ObjectCodes) -> Result<f64> {
    check_codes(from, to, codes)?;
    let transforms = object_transforms(from, to, codes)?;
    let r = dynamic_residuals(from, to, codes, &transforms);
    Ok(r.iter().map(|v| v.norm()).sum::<f64>() / from.len() as f64)
}

/// The `h` nearest other points of every point, nearest first, ties by index.
pub fn nearest_neighbours(points: &[Vec3], h: usize) -> Vec<Vec<usize>> {
    let h = h.min(points.len().saturating_sub(1));
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((*p - *q).norm_squared(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(h).map(|(_, j)| j).collect()
        })
        .collect()
}

fn smooth_from_neighbours(codes: &ObjectCodes, nn: &[Vec<usize>]) -> f64 {
    let n = codes.len();
    let mut total = 0.0;
    for (i, nbrs) in nn.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let s: f64 = nbrs
            .iter()
            .map(|&j| codes.row(i).iter().zip(codes.row(j)).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum();
        total += s / nbrs.len() as f64;
    }
    total / n as f64
}

/// `(1/N) Σ_p (1/H) Σ_h ‖o_p − o_{p_h}‖₁` over the `H` nearest neighbours in `points`.
pub fn ogc_smooth_loss(points: &[Vec3], codes: &ObjectCodes, neighbours: usize) -> Result<f64> {
    if codes.len() != points.len() {
        return Err(Error::shape("object codes", points.len(), codes.len()));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("no points".into()));
    }
    Ok(smooth_from_neighbours(codes, &nearest_neighbours(points, neighbours)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OgcConfig {
    /// Maximum number of objects `K_obj`.
    pub objects: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Neighbours per point in the smoothness term.
    pub neighbours: usize,
}

pub const DEFAULT_OBJECTS: usize = 8;
pub const DEFAULT_OGC_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_OGC_ITERATIONS: usize = 1000;
pub const DEFAULT_NEIGHBOURS: usize = 8;

impl Default for OgcConfig {
    fn default() -> Self {
        Self {
            objects: DEFAULT_OBJECTS,
            learning_rate: DEFAULT_OGC_LEARNING_RATE,
            iterations: DEFAULT_OGC_ITERATIONS,
            neighbours: DEFAULT_NEIGHBOURS,
        }
    }
}

/// Fits object codes with Adam on `mean_f ℓ_dynamic(P₀, P_f) + ℓ_smooth(P₀)`.
///
/// The per-object Kabsch transforms are recomputed every iteration and held
/// fixed while differentiating, so gradients flow only through the blend
/// weights.
pub fn optimize_object_codes(from: &[Vec3], frames: &[Vec<Vec3>], config: &OgcConfig, seed: u64) -> Result<ObjectCodes> {
    let (n, k) = (from.len(), config.objects);
    if k == 0 {
        return Err(Error::Config("need at least one object".into()));
    }
    if frames.is_empty() {
        return Err(Error::InvalidInput("no target frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let mut logits: Vec<f64> = (0..n * k).map(|_| init.sample(&mut rng)).collect();
    let nn = nearest_neighbours(from, config.neighbours);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            decay_at: f64::INFINITY,
            ..AdamConfig::default()
        },
        &[n * k],
    );
    for _ in 0..config.iterations {
        let codes = ObjectCodes::from_logits(&logits, k);
        let mut d_probs = vec![0.0; n * k];
        for to in frames {
            check_codes(from, to, &codes)?;
            let transforms = object_transforms(from, to, &codes)?;
            let r = dynamic_residuals(from, to, &codes, &transforms);
            let scale = 1.0 / (n as f64 * frames.len() as f64);
            for (i, (p, ri)) in from.iter().zip(&r).enumerate() {
                let len = ri.norm();
                if len == 0.0 {
                    continue;
                }
                let dir = ri.scale(scale / len);
                for (j, t) in transforms.iter().enumerate() {
                    d_probs[i * k + j] += dir.dot(t.apply(*p));
                }
            }
        }
        for (i, nbrs) in nn.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / (n as f64 * nbrs.len() as f64);
            for &j in nbrs {
                for c in 0..k {
                    let s = (codes.probs[i * k + c] - codes.probs[j * k + c]).signum() * w;
                    d_probs[i * k + c] += s;
                    d_probs[j * k + c] -= s;
                }
            }
        }
        // softmax backward, row by row
        let mut d_logits = vec![0.0; n * k];
        for i in 0..n {
            let p = codes.row(i);
            let g = &d_probs[i * k..(i + 1) * k];
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for c in 0..k {
                d_logits[i * k + c] = p[c] * (g[c] - dot);
            }
        }
        adam.step(&mut [&mut logits], &[&d_logits], config.learning_rate);
    }
    Ok(ObjectCodes::from_logits(&logits, k))
}
