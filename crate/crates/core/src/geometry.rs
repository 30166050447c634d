//! Small fixed-size algebra: 3-vectors, 3x3 matrices, unit quaternions and
//! the sinusoidal positional encoding fed to every coordinate network.
//!
//! Quaternions follow the Hamilton convention and are stored scalar-first.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vector3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vector3<T> {
    #[inline]
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn from_slice(s: &[T]) -> Self {
        Self::new(s[0], s[1], s[2])
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn scale(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }

    /// Elementwise product.
    #[inline]
    pub fn hadamard(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Scalar>(self) -> Vector3<U> {
        Vector3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Scalar> Add for Vector3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> AddAssign for Vector3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl<T: Scalar> Sub for Vector3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> SubAssign for Vector3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

impl<T: Scalar> Neg for Vector3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Scalar> Mul<T> for Vector3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, k: T) -> Self {
        self.scale(k)
    }
}

impl<T> Index<usize> for Vector3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vector3 index {i} out of range"),
        }
    }
}

impl<T> IndexMut<usize> for Vector3<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vector3 index {i} out of range"),
        }
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Matrix3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Scalar> Matrix3<T> {
    #[inline]
    pub const fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn zero() -> Self {
        Self::from_rows([[T::zero(); 3]; 3])
    }

    pub fn identity() -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            r.m[i][i] = T::one();
        }
        r
    }

    /// Cross-product matrix: `skew(w) * v == w.cross(v)`.
    pub fn skew(w: Vector3<T>) -> Self {
        let o = T::zero();
        Self::from_rows([[o, -w.z, w.y], [w.z, o, -w.x], [-w.y, w.x, o]])
    }

    pub fn transpose(&self) -> Self {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[j][i];
            }
        }
        r
    }

    pub fn scale(&self, k: T) -> Self {
        let mut r = *self;
        r.m.iter_mut().flatten().for_each(|v| *v = *v * k);
        r
    }

    pub fn mul_vec(&self, v: Vector3<T>) -> Vector3<T> {
        let m = &self.m;
        Vector3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn determinant(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate, `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.determinant();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let m = &self.m;
        let c = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d];
        let adj = [
            [
                c(1, 1, 2, 2) - c(1, 2, 2, 1),
                c(0, 2, 2, 1) - c(0, 1, 2, 2),
                c(0, 1, 1, 2) - c(0, 2, 1, 1),
            ],
            [
                c(1, 2, 2, 0) - c(1, 0, 2, 2),
                c(0, 0, 2, 2) - c(0, 2, 2, 0),
                c(0, 2, 1, 0) - c(0, 0, 1, 2),
            ],
            [
                c(1, 0, 2, 1) - c(1, 1, 2, 0),
                c(0, 1, 2, 0) - c(0, 0, 2, 1),
                c(0, 0, 1, 1) - c(0, 1, 1, 0),
            ],
        ];
        Some(Self::from_rows(adj).scale(T::one() / det))
    }

    pub fn frobenius_norm(&self) -> T {
        self.m.iter().flatten().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    /// Deviation from orthogonality, `‖RᵀR − I‖_F`.
    pub fn orthogonality_error(&self) -> T {
        (self.transpose() * *self - Self::identity()).frobenius_norm()
    }
}

impl<T: Scalar> Add for Matrix3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] += o.m[i][j];
            }
        }
        r
    }
}

impl<T: Scalar> Sub for Matrix3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] -= o.m[i][j];
            }
        }
        r
    }
}

impl<T: Scalar> Mul for Matrix3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        r
    }
}

impl<T: Scalar> Mul<Vector3<T>> for Matrix3<T> {
    type Output = Vector3<T>;
    fn mul(self, v: Vector3<T>) -> Vector3<T> {
        self.mul_vec(v)
    }
}

/// Unit quaternion `(w, x, y, z)`, Hamilton convention. `q` and `-q` describe
/// the same orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion<T> {
    w: T,
    x: T,
    y: T,
    z: T,
}

impl<T: Scalar> UnitQuaternion<T> {
    pub fn identity() -> Self {
        Self {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    /// Normalizes `(w, x, y, z)`; fails on non-finite or zero-norm input.
    pub fn new(w: T, x: T, y: T, z: T) -> Result<Self> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n <= T::min_positive_value() {
            return Err(Error::InvalidInput("zero-norm quaternion".into()));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<T>, angle: T) -> Result<Self> {
        let n = axis.norm();
        if !(n > T::zero()) || !angle.is_finite() {
            return Err(Error::InvalidInput("degenerate rotation axis".into()));
        }
        let half = angle / T::lit(2.0);
        let s = half.sin() / n;
        Self::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    #[inline]
    pub fn w(&self) -> T {
        self.w
    }
    #[inline]
    pub fn x(&self) -> T {
        self.x
    }
    #[inline]
    pub fn y(&self) -> T {
        self.y
    }
    #[inline]
    pub fn z(&self) -> T {
        self.z
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Sign-insensitive distance between orientations: `min(‖a−b‖, ‖a+b‖)`.
    pub fn distance(&self, o: &Self) -> T {
        let a = self.to_array();
        let b = o.to_array();
        let minus = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<T>().sqrt();
        let plus = (0..4).map(|i| (a[i] + b[i]).powi(2)).sum::<T>().sqrt();
        minus.min(plus)
    }
}

/// Rotation matrix of a unit quaternion. The input is renormalized first.
pub fn quat_to_rot<T: Scalar>(q: &UnitQuaternion<T>) -> Matrix3<T> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::from_rows([
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ])
}

/// Largest accepted `‖RᵀR − I‖_F` for [`rot_to_quat`].
pub const MAX_ORTHOGONALITY_ERROR: f64 = 0.3;

/// Nearest rotation (orthogonal polar factor) of a non-singular matrix.
///
/// Uses the Newton iteration `X ← (X + X⁻ᵀ)/2`, which converges quadratically
/// near the orthogonal group. Fails if the matrix is singular or its polar
/// factor is a reflection.
pub fn project_to_rotation<T: Scalar>(r: &Matrix3<T>) -> Result<Matrix3<T>> {
    if !r.is_finite() {
        return Err(Error::InvalidInput("non-finite rotation matrix".into()));
    }
    let half = T::lit(0.5);
    let tol = T::epsilon() * T::lit(8.0);
    let mut x = *r;
    for _ in 0..64 {
        let inv_t = x
            .inverse()
            .ok_or_else(|| Error::DegenerateRotation("singular matrix".into()))?
            .transpose();
        let next = (x + inv_t).scale(half);
        let delta = (next - x).frobenius_norm();
        x = next;
        if delta <= tol {
            break;
        }
    }
    if !(x.determinant() > T::zero()) {
        return Err(Error::DegenerateRotation(
            "determinant is not positive after projection".into(),
        ));
    }
    Ok(x)
}

/// Unit quaternion of the rotation nearest to `r`.
///
/// Accepts mildly non-orthogonal input (`‖RᵀR − I‖_F ≤ 0.3`) and projects it
/// with [`project_to_rotation`] before conversion.
pub fn rot_to_quat<T: Scalar>(r: &Matrix3<T>) -> Result<UnitQuaternion<T>> {
    if !r.is_finite() {
        return Err(Error::InvalidInput("non-finite rotation matrix".into()));
    }
    let err = r.orthogonality_error();
    if err > T::lit(MAX_ORTHOGONALITY_ERROR) {
        return Err(Error::InvalidInput(format!(
            "matrix too far from orthogonal: ‖RᵀR − I‖_F = {err}"
        )));
    }
    let rot = project_to_rotation(r)?;
    Ok(orthonormal_to_quat(&rot))
}

/// Shepperd's method; `r` must already be a proper rotation.
pub(crate) fn orthonormal_to_quat<T: Scalar>(r: &Matrix3<T>) -> UnitQuaternion<T> {
    let m = &r.m;
    let one = T::one();
    let two = T::lit(2.0);
    let quarter = T::lit(0.25);
    let tr = r.trace();
    let (w, x, y, z);
    if tr > m[0][0] && tr > m[1][1] && tr > m[2][2] {
        let s = (one + tr).sqrt() * two;
        w = quarter * s;
        x = (m[2][1] - m[1][2]) / s;
        y = (m[0][2] - m[2][0]) / s;
        z = (m[1][0] - m[0][1]) / s;
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * two;
        w = (m[2][1] - m[1][2]) / s;
        x = quarter * s;
        y = (m[0][1] + m[1][0]) / s;
        z = (m[0][2] + m[2][0]) / s;
    } else if m[1][1] > m[2][2] {
        let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * two;
        w = (m[0][2] - m[2][0]) / s;
        x = (m[0][1] + m[1][0]) / s;
        y = quarter * s;
        z = (m[1][2] + m[2][1]) / s;
    } else {
        let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * two;
        w = (m[1][0] - m[0][1]) / s;
        x = (m[0][2] + m[2][0]) / s;
        y = (m[1][2] + m[2][1]) / s;
        z = quarter * s;
    }
    let mut q = UnitQuaternion::new(w, x, y, z).expect("rotation matrix yields a finite quaternion");
    if q.w < T::zero() {
        q = UnitQuaternion {
            w: -q.w,
            x: -q.x,
            y: -q.y,
            z: -q.z,
        };
    }
    q
}

/// Hamilton product `a ∘ b`, renormalized. `quat_to_rot(a ∘ b) = R(a)·R(b)`.
pub fn quat_compose<T: Scalar>(a: &UnitQuaternion<T>, b: &UnitQuaternion<T>) -> UnitQuaternion<T> {
    let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
    let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
    let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
    let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
    UnitQuaternion::new(w, x, y, z).unwrap_or_else(|_| UnitQuaternion::identity())
}

impl<T: Scalar> Mul for UnitQuaternion<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        quat_compose(&self, &o)
    }
}

/// Number of features produced per input component.
#[inline]
pub const fn encoding_width(degree: usize) -> usize {
    1 + 2 * degree
}

/// Sinusoidal encoding `[x, sin(2⁰x), cos(2⁰x), …, sin(2^{d−1}x), cos(2^{d−1}x)]`
/// of each component in turn. No `π` factor is applied.
pub fn positional_encoding<T: Scalar>(x: &[T], degree: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len() * encoding_width(degree)];
    encode_into(x, degree, &mut out);
    out
}

pub(crate) fn encode_into<T: Scalar>(x: &[T], degree: usize, out: &mut [T]) {
    let w = encoding_width(degree);
    debug_assert_eq!(out.len(), x.len() * w);
    for (j, &v) in x.iter().enumerate() {
        let o = &mut out[j * w..(j + 1) * w];
        o[0] = v;
        let mut freq = T::one();
        for k in 0..degree {
            let a = freq * v;
            o[1 + 2 * k] = a.sin();
            o[2 + 2 * k] = a.cos();
            freq = freq + freq;
        }
    }
}

/// Accumulates `∂/∂x` of `upstream · encoding(x)` into `grad`.
pub(crate) fn encode_backward<T: Scalar>(x: &[T], degree: usize, upstream: &[T], grad: &mut [T]) {
    let w = encoding_width(degree);
    for (j, &v) in x.iter().enumerate() {
        let g = &upstream[j * w..(j + 1) * w];
        let mut acc = g[0];
        let mut freq = T::one();
        for k in 0..degree {
            let a = freq * v;
            acc += freq * (g[1 + 2 * k] * a.cos() - g[2 + 2 * k] * a.sin());
            freq = freq + freq;
        }
        grad[j] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn sandwich(q: &UnitQuaternion<f64>, v: Vector3<f64>) -> Vector3<f64> {
        // independent Hamilton product on raw arrays
        fn mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        }
        let qa = q.to_array();
        let qc = [qa[0], -qa[1], -qa[2], -qa[3]];
        let r = mul(mul(qa, [0.0, v.x, v.y, v.z]), qc);
        Vector3::new(r[1], r[2], r[3])
    }

    fn quat_strategy() -> impl Strategy<Value = UnitQuaternion<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| UnitQuaternion::new(w, x, y, z).unwrap())
    }

    fn vec_strategy() -> impl Strategy<Value = Vector3<f64>> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    fn mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (*a - *b).frobenius_norm() <= tol
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rot(&UnitQuaternion::<f64>::identity());
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = UnitQuaternion::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()).unwrap();
        let v = quat_to_rot(&q) * Vector3::new(1.0, 0.0, 0.0);
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn non_finite_quaternion_rejected() {
        assert!(matches!(
            UnitQuaternion::new(f64::NAN, 0.0, 0.0, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(UnitQuaternion::new(0.0f64, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn identity_matrix_to_quaternion() {
        let q = rot_to_quat(&Matrix3::<f64>::identity()).unwrap();
        assert!(q.distance(&UnitQuaternion::identity()) < 1e-15);
    }

    #[test]
    fn perturbed_rotation_is_projected() {
        // (I + Δt·J)·I with J skew, Δt = 0.01
        let j = Matrix3::skew(Vector3::<f64>::new(0.3, -1.2, 2.0));
        let r = Matrix3::identity() + j.scale(0.01);
        assert!(r.orthogonality_error() > 1e-5);
        let q = rot_to_quat(&r).unwrap();
        let back = quat_to_rot(&q);
        assert!(back.orthogonality_error() < 1e-9);
        assert!((back.determinant() - 1.0).abs() < 1e-9);
        // polar oracle: for R = I + εS with S skew, the polar factor is
        // (I + εS)(I − ε²S²)^(-1/2); its quaternion has axis ∥ ω and angle atan(ε‖ω‖)
        let w = Vector3::<f64>::new(0.3, -1.2, 2.0);
        let angle = (0.01 * w.norm()).atan();
        let expected = UnitQuaternion::from_axis_angle(w, angle).unwrap();
        assert!(q.distance(&expected) < 1e-12, "{q:?} vs {expected:?}");
    }

    #[test]
    fn reflection_rejected() {
        let mut r = Matrix3::<f64>::identity();
        r.m[2][2] = -1.0;
        assert!(matches!(rot_to_quat(&r), Err(Error::DegenerateRotation(_))));
    }

    #[test]
    fn far_from_orthogonal_rejected() {
        let r = Matrix3::<f64>::identity().scale(2.0);
        assert!(matches!(rot_to_quat(&r), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn compose_with_identity_and_half_turn() {
        let a = UnitQuaternion::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 0.7).unwrap();
        assert!(quat_compose(&a, &UnitQuaternion::identity()).distance(&a) < 1e-15);
        let q90 = UnitQuaternion::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), FRAC_PI_2).unwrap();
        let q180 = UnitQuaternion::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), PI).unwrap();
        assert!(quat_compose(&q90, &q90).distance(&q180) < 1e-15);
    }

    #[test]
    fn encoding_at_zero() {
        let e = positional_encoding(&[0.0f64], 8);
        assert_eq!(e.len(), 17);
        assert_eq!(e[0], 0.0);
        for k in 0..8 {
            assert_eq!(e[1 + 2 * k], 0.0);
            assert_eq!(e[2 + 2 * k], 1.0);
        }
    }

    #[test]
    fn encoding_at_half_pi() {
        let e = positional_encoding(&[FRAC_PI_2], 2);
        let expected = [FRAC_PI_2, 1.0, 0.0, 0.0, -1.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn encoding_backward_matches_finite_differences() {
        let x = [0.3f64, -1.1];
        let d = 4;
        let up: Vec<f64> = (0..x.len() * encoding_width(d)).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = vec![0.0; 2];
        encode_backward(&x, d, &up, &mut g);
        let f = |x: &[f64]| -> f64 {
            positional_encoding(x, d).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        for j in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn works_in_single_precision() {
        let q = UnitQuaternion::<f32>::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), 0.5).unwrap();
        let r = quat_to_rot(&q);
        assert!(r.orthogonality_error() < 1e-5);
        let back = rot_to_quat(&r).unwrap();
        assert!(back.distance(&q) < 1e-5);
    }

    proptest! {
        #[test]
        fn rotation_matches_sandwich(q in quat_strategy(), v in vec_strategy()) {
            let r = quat_to_rot(&q);
            prop_assert!((r * v - sandwich(&q, v)).norm() < 1e-9 * (1.0 + v.norm()));
        }

        #[test]
        fn rotation_is_proper_orthogonal(q in quat_strategy()) {
            let r = quat_to_rot(&q);
            prop_assert!(r.orthogonality_error() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn round_trip_up_to_sign(q in quat_strategy()) {
            let back = rot_to_quat(&quat_to_rot(&q)).unwrap();
            prop_assert!(back.distance(&q) < 1e-9);
        }

        #[test]
        fn compose_matches_matrix_product(a in quat_strategy(), b in quat_strategy()) {
            let lhs = quat_to_rot(&quat_compose(&a, &b));
            let rhs = quat_to_rot(&a) * quat_to_rot(&b);
            prop_assert!(mat_close(&lhs, &rhs, 1e-9));
        }

        #[test]
        fn encoding_length(n in 1usize..6, d in 1usize..10) {
            let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            let a = positional_encoding(&x, d);
            prop_assert_eq!(a.len(), n * (1 + 2 * d));
            prop_assert_eq!(a, positional_encoding(&x, d));
        }
    }
}
