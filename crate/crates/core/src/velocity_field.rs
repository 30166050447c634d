//! Divergence-free rigid velocity parameterization.
//!
//! A particle's velocity is `v(p) = 𝕍 · 𝓑(p)` where `𝕍` holds six motion
//! components and the rows of `𝓑(p)` span the instantaneous rigid motions:
//! three translations and three rotations about the coordinate axes. Every
//! row is a divergence-free vector field and `𝕍` does not depend on `p`, so
//! the combined field is divergence-free for any choice of components.

use crate::geometry::{Matrix3, Vector3};
use crate::scalar::Scalar;

/// Six motion components ordered `[vˣ, vʸ, vᶻ, wᶻ, wʸ, wˣ]`.
///
/// The angular part is stored z-first to line up with the basis rows; use
/// [`VelocityComponents::angular`] to get `ω = (wˣ, wʸ, wᶻ)` in the usual order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VelocityComponents<T>(pub [T; 6]);

impl<T: Scalar> VelocityComponents<T> {
    pub fn zero() -> Self {
        Self([T::zero(); 6])
    }

    pub fn from_slice(s: &[T]) -> Self {
        let mut v = [T::zero(); 6];
        v.copy_from_slice(&s[..6]);
        Self(v)
    }

    /// Builds components from a linear velocity and an angular velocity `ω`.
    pub fn from_parts(linear: Vector3<T>, angular: Vector3<T>) -> Self {
        Self([linear.x, linear.y, linear.z, angular.z, angular.y, angular.x])
    }

    #[inline]
    pub fn linear(&self) -> Vector3<T> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    /// Angular velocity `ω = (wˣ, wʸ, wᶻ)`.
    #[inline]
    pub fn angular(&self) -> Vector3<T> {
        Vector3::new(self.0[5], self.0[4], self.0[3])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// The 6x3 basis matrix `𝓑(p)`, one row per motion component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisMatrix<T> {
    pub rows: [Vector3<T>; 6],
}

pub fn basis_matrix<T: Scalar>(p: Vector3<T>) -> BasisMatrix<T> {
    let o = T::zero();
    let l = T::one();
    BasisMatrix {
        rows: [
            Vector3::new(l, o, o),
            Vector3::new(o, l, o),
            Vector3::new(o, o, l),
            Vector3::new(-p.y, p.x, o),
            Vector3::new(p.z, o, -p.x),
            Vector3::new(o, -p.z, p.y),
        ],
    }
}

/// `𝕍 · 𝓑(p)`.
pub fn eval_velocity<T: Scalar>(v: &VelocityComponents<T>, p: Vector3<T>) -> Vector3<T> {
    let b = basis_matrix(p);
    let mut out = Vector3::zero();
    for (k, row) in b.rows.iter().enumerate() {
        out += row.scale(v.0[k]);
    }
    out
}

/// `∂v/∂p`, the skew matrix of `ω`. Independent of position.
pub fn velocity_jacobian<T: Scalar>(v: &VelocityComponents<T>) -> Matrix3<T> {
    Matrix3::skew(v.angular())
}

/// Central-difference divergence of an arbitrary field at `p`.
pub fn divergence_of<T, F>(field: F, p: Vector3<T>, h: T) -> T
where
    T: Scalar,
    F: Fn(Vector3<T>) -> Vector3<T>,
{
    let two_h = h + h;
    (0..3)
        .map(|i| {
            let mut plus = p;
            let mut minus = p;
            plus[i] += h;
            minus[i] -= h;
            (field(plus)[i] - field(minus)[i]) / two_h
        })
        .sum()
}

/// Central-difference estimate of `∇·v` for the field `𝕍 · 𝓑(p)`.
pub fn numeric_divergence<T: Scalar>(v: &VelocityComponents<T>, p: Vector3<T>, h: T) -> T {
    divergence_of(|q| eval_velocity(v, q), p, h)
}

/// Default finite-difference step, in scene units.
pub const DEFAULT_FD_STEP: f64 = 1e-4;
