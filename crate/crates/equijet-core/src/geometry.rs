//! 3D rotation algebra and the group actions on each feature representation.
//!
//! Rotations act on the three representations used throughout the crate:
//! scalars are fixed, vectors map as `v -> R v`, and order-2 tensors map by
//! conjugation `T -> R T R^T`. [`Rotation`] guarantees a proper rotation
//! (orthogonal, determinant +1); [`random_rotation`] draws Haar-uniform group
//! elements via normalized random quaternions for Monte Carlo equivariance
//! checks.

use crate::math;
use core::fmt;
use core::ops::{Add, Index, Mul, Neg, Sub};
use rand::Rng;
use rand_distr::StandardNormal;

/// Orthogonality / determinant tolerance for accepting a matrix as a rotation.
pub const ROTATION_TOL: f64 = 1e-12;

/// Errors from rotation construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    /// The rotation axis has zero (or non-finite) length.
    DegenerateAxis,
    /// The matrix is not orthogonal with determinant +1 within tolerance.
    NotARotation,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::DegenerateAxis => write!(f, "degenerate axis"),
            GeometryError::NotARotation => {
                write!(f, "matrix is not a proper rotation")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GeometryError {}

/// A 3-vector with double-precision components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        math::sqrt(self.norm_squared())
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(self * (1.0 / n))
        } else {
            None
        }
    }

    /// Outer product `self * o^T` as a 3x3 tensor.
    pub fn outer(self, o: Vec3) -> Mat3 {
        Mat3::new([
            self.x * o.x,
            self.x * o.y,
            self.x * o.z,
            self.y * o.x,
            self.y * o.y,
            self.y * o.z,
            self.z * o.x,
            self.z * o.y,
            self.z * o.z,
        ])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn from_slice(s: &[f64]) -> Vec3 {
        Vec3::new(s[0], s[1], s[2])
    }

    pub fn write_to(self, s: &mut [f64]) {
        s[0] = self.x;
        s[1] = self.y;
        s[2] = self.z;
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// A 3x3 matrix stored row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub e: [f64; 9],
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3 { e: [0.0; 9] };
    pub const IDENTITY: Mat3 =
        Mat3 { e: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] };

    pub const fn new(e: [f64; 9]) -> Self {
        Mat3 { e }
    }

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3::new([r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[3 * i + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.e[3 * i + j] = v;
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.e[3 * i], self.e[3 * i + 1], self.e[3 * i + 2])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.e[j], self.e[3 + j], self.e[6 + j])
    }

    pub fn transpose(&self) -> Mat3 {
        let e = &self.e;
        Mat3::new([e[0], e[3], e[6], e[1], e[4], e[7], e[2], e[5], e[8]])
    }

    pub fn trace(&self) -> f64 {
        self.e[0] + self.e[4] + self.e[8]
    }

    pub fn det(&self) -> f64 {
        let e = &self.e;
        e[0] * (e[4] * e[8] - e[5] * e[7]) - e[1] * (e[3] * e[8] - e[5] * e[6])
            + e[2] * (e[3] * e[7] - e[4] * e[6])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    /// Component-wise (Frobenius) inner product `sum_ij A_ij B_ij`.
    pub fn frobenius_dot(&self, o: &Mat3) -> f64 {
        let mut acc = 0.0;
        for k in 0..9 {
            acc += self.e[k] * o.e[k];
        }
        acc
    }

    /// Frobenius norm `sqrt(sum_ij T_ij^2)`.
    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.frobenius_dot(self))
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().all(|v| v.is_finite())
    }

    pub fn from_slice(s: &[f64]) -> Mat3 {
        let mut e = [0.0; 9];
        e.copy_from_slice(&s[..9]);
        Mat3::new(e)
    }

    pub fn write_to(&self, s: &mut [f64]) {
        s[..9].copy_from_slice(&self.e);
    }

    /// Skew-symmetric cross-product matrix `[n]_x` with `[n]_x v = n x v`.
    pub fn cross_matrix(n: Vec3) -> Mat3 {
        Mat3::new([0.0, -n.z, n.y, n.z, 0.0, -n.x, -n.y, n.x, 0.0])
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut e = [0.0; 9];
        for k in 0..9 {
            e[k] = self.e[k] + o.e[k];
        }
        Mat3::new(e)
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut e = [0.0; 9];
        for k in 0..9 {
            e[k] = self.e[k] - o.e[k];
        }
        Mat3::new(e)
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    fn mul(self, k: f64) -> Mat3 {
        let mut e = [0.0; 9];
        for i in 0..9 {
            e[i] = self.e[i] * k;
        }
        Mat3::new(e)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut e = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += self.get(i, k) * o.get(k, j);
                }
                e[3 * i + j] = acc;
            }
        }
        Mat3::new(e)
    }
}

impl Index<(usize, usize)> for Mat3 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.e[3 * i + j]
    }
}

/// A proper rotation: orthogonal matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Mat3,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { m: Mat3::IDENTITY };

    /// Wraps a matrix after checking orthogonality and determinant within
    /// [`ROTATION_TOL`].
    pub fn from_matrix(m: Mat3) -> Result<Rotation, GeometryError> {
        let r = Rotation { m };
        if r.orthogonality_residual() <= ROTATION_TOL
            && math::abs(m.det() - 1.0) <= ROTATION_TOL
        {
            Ok(r)
        } else {
            Err(GeometryError::NotARotation)
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    /// `|| R^T R - I ||_F`, zero for an exactly orthogonal matrix.
    pub fn orthogonality_residual(&self) -> f64 {
        (self.m.transpose() * self.m - Mat3::IDENTITY).frobenius_norm()
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { m: self.m.transpose() }
    }

    /// Applies the vector representation: `v -> R v`.
    pub fn apply_to_vector(&self, v: Vec3) -> Vec3 {
        self.m.mul_vec(v)
    }

    /// Applies the order-2 tensor representation: `T -> R T R^T`.
    pub fn apply_to_tensor(&self, t: &Mat3) -> Mat3 {
        self.m * *t * self.m.transpose()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, o: Rotation) -> Rotation {
        Rotation { m: self.m * o.m }
    }
}

/// Rotation by `angle` radians about `axis` (right-hand rule), via the
/// Rodrigues formula `R = I + sin(t) K + (1 - cos(t)) K^2` with `K = [n]_x`.
///
/// A zero angle yields the identity exactly. A zero-length axis is rejected.
pub fn rotation_from_axis_angle(
    axis: Vec3,
    angle: f64,
) -> Result<Rotation, GeometryError> {
    let n = axis.normalized().ok_or(GeometryError::DegenerateAxis)?;
    let k = Mat3::cross_matrix(n);
    let m = Mat3::IDENTITY + k * math::sin(angle)
        + (k * k) * (1.0 - math::cos(angle));
    Ok(Rotation { m })
}

/// A Haar-uniform random rotation, drawn by normalizing a 4-vector of
/// standard Gaussians into a unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let n2 = w * w + x * x + y * y + z * z;
        if n2 < 1e-12 {
            continue; // astronomically rare; resample rather than divide by ~0
        }
        let s = 1.0 / math::sqrt(n2);
        let (w, x, y, z) = (w * s, x * s, y * s, z * s);
        let m = Mat3::new([
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ]);
        return Rotation { m };
    }
}
