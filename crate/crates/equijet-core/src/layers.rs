//! Equivariant layer primitives over scalar, vector, and tensor channels.
//!
//! Four families of operations:
//! * affine maps per representation — scalars get a bias, vectors must not
//!   (a constant vector is not equivariant), tensors may add a multiple of
//!   the identity;
//! * linear maps equivariant only under rotations about a distinguished unit
//!   axis `j`, parameterized per connection by an axial/transverse scaling
//!   plus an axial rotation angle;
//! * bilinear mixing that forms all degree-2 products of two feature halves
//!   landing back in the three representations;
//! * norm-saturating activations: ReLU on scalars, and unit-ball saturation
//!   on vector and tensor magnitudes that never changes direction.
//!
//! Kernels operate on one particle slot at a time over flat `f64` slices
//! (vectors as 3 consecutive components, tensors as 9, row-major); batching
//! loops live in the autodiff tape. Weight matrices are row-major
//! `[f_out][f_in]`.

use crate::geometry::{Mat3, Vec3};
use crate::math;
use core::fmt;

/// Tolerance for accepting an axis as unit length.
pub const UNIT_AXIS_TOL: f64 = 1e-9;

/// Errors from layer application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerError {
    /// Parameter or channel extents disagree.
    ShapeMismatch(&'static str),
    /// The distinguished axis is not unit length within [`UNIT_AXIS_TOL`].
    NonUnitAxis,
}

impl fmt::Display for LayerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerError::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            LayerError::NonUnitAxis => write!(f, "axis is not unit length"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LayerError {}

fn check_unit_axis(j: Vec3) -> Result<(), LayerError> {
    if math::abs(j.norm() - 1.0) <= UNIT_AXIS_TOL {
        Ok(())
    } else {
        Err(LayerError::NonUnitAxis)
    }
}

/// Scalar affine map `y_i = W_ij s_j + b_i`.
///
/// `w` is `[f_out][f_in]` row-major with `f_in = input.len()` and
/// `f_out = bias.len() = out.len()`.
pub fn scalar_affine(
    w: &[f64],
    bias: &[f64],
    input: &[f64],
    out: &mut [f64],
) -> Result<(), LayerError> {
    let (f_in, f_out) = (input.len(), out.len());
    if bias.len() != f_out || w.len() != f_out * f_in {
        return Err(LayerError::ShapeMismatch("scalar affine parameters"));
    }
    for i in 0..f_out {
        let row = &w[i * f_in..(i + 1) * f_in];
        let mut acc = bias[i];
        for j in 0..f_in {
            acc += row[j] * input[j];
        }
        out[i] = acc;
    }
    Ok(())
}

/// Vector linear map `y_i = W_ij v_j`; a bias term would break equivariance,
/// so none exists.
///
/// `input`/`out` hold `f` vectors as `3 f` contiguous components.
pub fn vector_linear(w: &[f64], input: &[f64], out: &mut [f64]) -> Result<(), LayerError> {
    if input.len() % 3 != 0 || out.len() % 3 != 0 {
        return Err(LayerError::ShapeMismatch("vector component count"));
    }
    let (f_in, f_out) = (input.len() / 3, out.len() / 3);
    if w.len() != f_out * f_in {
        return Err(LayerError::ShapeMismatch("vector weight count"));
    }
    for i in 0..f_out {
        let row = &w[i * f_in..(i + 1) * f_in];
        let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
        for j in 0..f_in {
            let wij = row[j];
            x += wij * input[3 * j];
            y += wij * input[3 * j + 1];
            z += wij * input[3 * j + 2];
        }
        out[3 * i] = x;
        out[3 * i + 1] = y;
        out[3 * i + 2] = z;
    }
    Ok(())
}

/// Tensor affine map `Y_i = W_ij T_j + b_i I`; the only equivariant bias is a
/// multiple of the identity tensor.
///
/// `input`/`out` hold `f` tensors as `9 f` contiguous row-major components.
pub fn tensor_affine(
    w: &[f64],
    bias: &[f64],
    input: &[f64],
    out: &mut [f64],
) -> Result<(), LayerError> {
    if input.len() % 9 != 0 || out.len() % 9 != 0 {
        return Err(LayerError::ShapeMismatch("tensor component count"));
    }
    let (f_in, f_out) = (input.len() / 9, out.len() / 9);
    if bias.len() != f_out || w.len() != f_out * f_in {
        return Err(LayerError::ShapeMismatch("tensor affine parameters"));
    }
    for i in 0..f_out {
        let row = &w[i * f_in..(i + 1) * f_in];
        let o = &mut out[9 * i..9 * i + 9];
        o.fill(0.0);
        for j in 0..f_in {
            let wij = row[j];
            let t = &input[9 * j..9 * j + 9];
            for k in 0..9 {
                o[k] += wij * t[k];
            }
        }
        o[0] += bias[i];
        o[4] += bias[i];
        o[8] += bias[i];
    }
    Ok(())
}

/// The axis-equivariant connection matrix, given precomputed `sin`/`cos` of
/// the axial angle:
/// `A = (a jj^T + b (I - jj^T)) R_j(phi)`.
///
/// Written as `(b I + (a-b) jj^T) R_j(phi)` so that `(1, 1, 0)` yields the
/// identity exactly.
pub fn so2_matrix_with_trig(a: f64, b: f64, sin_phi: f64, cos_phi: f64, j: Vec3) -> Mat3 {
    let jj = j.outer(j);
    let m = Mat3::IDENTITY * b + jj * (a - b);
    let k = Mat3::cross_matrix(j);
    let r = Mat3::IDENTITY + k * sin_phi + (k * k) * (1.0 - cos_phi);
    m * r
}

/// Linear map on a single vector equivariant under rotations about unit `j`:
/// anisotropic scaling along/across the axis composed with an axial rotation.
pub fn so2_matrix(a: f64, b: f64, phi: f64, j: Vec3) -> Result<Mat3, LayerError> {
    check_unit_axis(j)?;
    Ok(so2_matrix_with_trig(a, b, math::sin(phi), math::cos(phi), j))
}

/// Axis-equivariant vector layer `y_i = sum_j A(theta_ij) v_j`.
///
/// `params` holds `(a, b, phi)` per connection, row-major `[f_out][f_in][3]`.
pub fn so2_vector_linear(
    params: &[f64],
    j: Vec3,
    input: &[f64],
    out: &mut [f64],
) -> Result<(), LayerError> {
    check_unit_axis(j)?;
    if input.len() % 3 != 0 || out.len() % 3 != 0 {
        return Err(LayerError::ShapeMismatch("vector component count"));
    }
    let (f_in, f_out) = (input.len() / 3, out.len() / 3);
    if params.len() != f_out * f_in * 3 {
        return Err(LayerError::ShapeMismatch("axis-layer parameter count"));
    }
    for i in 0..f_out {
        let mut acc = Vec3::ZERO;
        for jf in 0..f_in {
            let p = &params[(i * f_in + jf) * 3..];
            let a = so2_matrix_with_trig(p[0], p[1], math::sin(p[2]), math::cos(p[2]), j);
            acc = acc + a.mul_vec(Vec3::from_slice(&input[3 * jf..]));
        }
        acc.write_to(&mut out[3 * i..3 * i + 3]);
    }
    Ok(())
}

/// Axis-equivariant tensor layer `Y_i = sum_j A(theta_ij) T_j B(phi_ij)^T`,
/// with `A` and `B` both of the [`so2_matrix`] form.
///
/// `params` holds `(a1, b1, phi1, a2, b2, phi2)` per connection, row-major
/// `[f_out][f_in][6]`.
pub fn so2_tensor_linear(
    params: &[f64],
    j: Vec3,
    input: &[f64],
    out: &mut [f64],
) -> Result<(), LayerError> {
    check_unit_axis(j)?;
    if input.len() % 9 != 0 || out.len() % 9 != 0 {
        return Err(LayerError::ShapeMismatch("tensor component count"));
    }
    let (f_in, f_out) = (input.len() / 9, out.len() / 9);
    if params.len() != f_out * f_in * 6 {
        return Err(LayerError::ShapeMismatch("axis-layer parameter count"));
    }
    for i in 0..f_out {
        let mut acc = Mat3::ZERO;
        for jf in 0..f_in {
            let p = &params[(i * f_in + jf) * 6..];
            let a = so2_matrix_with_trig(p[0], p[1], math::sin(p[2]), math::cos(p[2]), j);
            let b = so2_matrix_with_trig(p[3], p[4], math::sin(p[5]), math::cos(p[5]), j);
            let t = Mat3::from_slice(&input[9 * jf..]);
            acc = acc + a * t * b.transpose();
        }
        acc.write_to(&mut out[9 * i..9 * i + 9]);
    }
    Ok(())
}

/// Full bilinear mixing across all three representations.
///
/// Features split into halves `a` (first `F`) and `b` (last `F`); per index
/// `i` the layer emits three products per output representation:
/// * scalars: `s_a s_b`, `v_a . v_b`, `tr(T_a T_b^T)`
/// * vectors: `s_a v_b`, `v_a x v_b`, `T_a v_b`
/// * tensors: `s_a T_b`, `v_a v_b^T`, `T_a T_b`
///
/// so each representation grows from `2F` to `3F` features (the three product
/// groups concatenated in the order listed).
pub fn bilinear_mix(
    s: &[f64],
    v: &[f64],
    t: &[f64],
    out_s: &mut [f64],
    out_v: &mut [f64],
    out_t: &mut [f64],
) -> Result<(), LayerError> {
    let fs = s.len();
    if fs % 2 != 0 || fs == 0 {
        return Err(LayerError::ShapeMismatch("feature count must be even"));
    }
    if v.len() != 3 * fs || t.len() != 9 * fs {
        return Err(LayerError::ShapeMismatch("representation feature counts differ"));
    }
    let f = fs / 2;
    if out_s.len() != 3 * f || out_v.len() != 9 * f || out_t.len() != 27 * f {
        return Err(LayerError::ShapeMismatch("bilinear output extents"));
    }
    for i in 0..f {
        let (sa, sb) = (s[i], s[f + i]);
        let va = Vec3::from_slice(&v[3 * i..]);
        let vb = Vec3::from_slice(&v[3 * (f + i)..]);
        let ta = Mat3::from_slice(&t[9 * i..]);
        let tb = Mat3::from_slice(&t[9 * (f + i)..]);

        out_s[i] = sa * sb;
        out_s[f + i] = va.dot(vb);
        out_s[2 * f + i] = ta.frobenius_dot(&tb);

        (vb * sa).write_to(&mut out_v[3 * i..3 * i + 3]);
        va.cross(vb).write_to(&mut out_v[3 * (f + i)..3 * (f + i) + 3]);
        ta.mul_vec(vb).write_to(&mut out_v[3 * (2 * f + i)..3 * (2 * f + i) + 3]);

        (tb * sa).write_to(&mut out_t[9 * i..9 * i + 9]);
        va.outer(vb).write_to(&mut out_t[9 * (f + i)..9 * (f + i) + 9]);
        (ta * tb).write_to(&mut out_t[9 * (2 * f + i)..9 * (2 * f + i) + 9]);
    }
    Ok(())
}

/// Bilinear mixing restricted to channels without tensors (the vector-only
/// architecture): per index `i`, scalars get `s_a s_b` and `v_a . v_b`,
/// vectors get `s_a v_b` and `v_a x v_b`, so both representations map
/// `2F -> 2F`.
pub fn bilinear_mix_sv(
    s: &[f64],
    v: &[f64],
    out_s: &mut [f64],
    out_v: &mut [f64],
) -> Result<(), LayerError> {
    let fs = s.len();
    if fs % 2 != 0 || fs == 0 {
        return Err(LayerError::ShapeMismatch("feature count must be even"));
    }
    if v.len() != 3 * fs {
        return Err(LayerError::ShapeMismatch("representation feature counts differ"));
    }
    let f = fs / 2;
    if out_s.len() != 2 * f || out_v.len() != 6 * f {
        return Err(LayerError::ShapeMismatch("bilinear output extents"));
    }
    for i in 0..f {
        let (sa, sb) = (s[i], s[f + i]);
        let va = Vec3::from_slice(&v[3 * i..]);
        let vb = Vec3::from_slice(&v[3 * (f + i)..]);
        out_s[i] = sa * sb;
        out_s[f + i] = va.dot(vb);
        (vb * sa).write_to(&mut out_v[3 * i..3 * i + 3]);
        va.cross(vb).write_to(&mut out_v[3 * (f + i)..3 * (f + i) + 3]);
    }
    Ok(())
}

/// Vector activation: identity inside the unit ball, radial saturation to the
/// unit sphere outside; the direction is never changed and zero maps to zero.
pub fn vrelu(input: &[f64], out: &mut [f64]) {
    debug_assert_eq!(input.len(), out.len());
    debug_assert_eq!(input.len() % 3, 0);
    for f in 0..input.len() / 3 {
        let v = Vec3::from_slice(&input[3 * f..]);
        let n = v.norm();
        let o = if n > 1.0 {
            Vec3::new(v.x / n, v.y / n, v.z / n)
        } else {
            v
        };
        o.write_to(&mut out[3 * f..3 * f + 3]);
    }
}

/// Tensor activation: identity below unit Frobenius norm, renormalized to
/// unit Frobenius norm above.
pub fn trelu(input: &[f64], out: &mut [f64]) {
    debug_assert_eq!(input.len(), out.len());
    debug_assert_eq!(input.len() % 9, 0);
    for f in 0..input.len() / 9 {
        let t = Mat3::from_slice(&input[9 * f..]);
        let n = t.frobenius_norm();
        if n > 1.0 {
            let mut e = t.e;
            for x in &mut e {
                *x /= n;
            }
            out[9 * f..9 * f + 9].copy_from_slice(&e);
        } else {
            t.write_to(&mut out[9 * f..9 * f + 9]);
        }
    }
}

/// Element-wise `max(s, 0)`.
pub fn scalar_relu(input: &[f64], out: &mut [f64]) {
    debug_assert_eq!(input.len(), out.len());
    for (o, &x) in out.iter_mut().zip(input) {
        *o = x.max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, rotation_from_axis_angle, Rotation};
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PI: f64 = core::f64::consts::PI;

    fn rand_slice(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rotate_vecs(r: &Rotation, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for f in 0..v.len() / 3 {
            r.apply_to_vector(Vec3::from_slice(&v[3 * f..]))
                .write_to(&mut out[3 * f..3 * f + 3]);
        }
        out
    }

    fn rotate_tensors(r: &Rotation, t: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; t.len()];
        for f in 0..t.len() / 9 {
            r.apply_to_tensor(&Mat3::from_slice(&t[9 * f..]))
                .write_to(&mut out[9 * f..9 * f + 9]);
        }
        out
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn scalar_affine_examples() {
        let s = [3.0, 1.0];
        let mut out = [0.0; 2];
        scalar_affine(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &s, &mut out).unwrap();
        assert_eq!(out, s);
        scalar_affine(&[0.0; 4], &[5.0, -2.0], &s, &mut out).unwrap();
        assert_eq!(out, [5.0, -2.0]);
        scalar_affine(&[1.0, 1.0, 1.0, -1.0], &[0.0, 0.0], &s, &mut out).unwrap();
        assert_eq!(out, [4.0, 2.0]);
        assert!(scalar_affine(&[1.0; 3], &[0.0; 2], &s, &mut out).is_err());
    }

    #[test]
    fn vector_linear_examples() {
        let v = [1.0, 2.0, 3.0];
        let mut out = [0.0; 3];
        vector_linear(&[1.0], &v, &mut out).unwrap();
        assert_eq!(out, v);
        vector_linear(&[2.0], &v, &mut out).unwrap();
        assert_eq!(out, [2.0, 4.0, 6.0]);
        assert!(vector_linear(&[1.0, 2.0], &v, &mut out).is_err());
    }

    #[test]
    fn vector_linear_commutes_with_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let w = rand_slice(&mut rng, 3 * 2);
        let v = rand_slice(&mut rng, 6);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let mut out_then_rot = vec![0.0; 9];
            vector_linear(&w, &v, &mut out_then_rot).unwrap();
            let out_then_rot = rotate_vecs(&r, &out_then_rot);
            let mut rot_then_out = vec![0.0; 9];
            vector_linear(&w, &rotate_vecs(&r, &v), &mut rot_then_out).unwrap();
            assert!(max_abs_diff(&out_then_rot, &rot_then_out) < 1e-12);
        }
    }

    #[test]
    fn tensor_affine_examples() {
        let t: Vec<f64> = Mat3::new([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
            .e
            .to_vec();
        let mut out = vec![0.0; 9];
        tensor_affine(&[1.0], &[0.0], &t, &mut out).unwrap();
        assert_eq!(out, t);
        tensor_affine(&[0.0], &[2.5], &t, &mut out).unwrap();
        assert_eq!(out, (Mat3::IDENTITY * 2.5).e.to_vec());
    }

    #[test]
    fn tensor_affine_commutes_with_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = rand_slice(&mut rng, 2 * 2);
        let bias = rand_slice(&mut rng, 2);
        let t = rand_slice(&mut rng, 18);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let mut lhs = vec![0.0; 18];
            tensor_affine(&w, &bias, &t, &mut lhs).unwrap();
            let lhs = rotate_tensors(&r, &lhs);
            let mut rhs = vec![0.0; 18];
            tensor_affine(&w, &bias, &rotate_tensors(&r, &t), &mut rhs).unwrap();
            assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
        }
    }

    #[test]
    fn so2_matrix_identity_is_exact() {
        let a = so2_matrix(1.0, 1.0, 0.0, Vec3::Z).unwrap();
        assert_eq!(a, Mat3::IDENTITY);
        let j = Vec3::new(0.3, -0.8, 0.2).normalized().unwrap();
        assert_eq!(so2_matrix(1.0, 1.0, 0.0, j).unwrap(), Mat3::IDENTITY);
    }

    #[test]
    fn so2_matrix_examples() {
        let a = so2_matrix(2.0, 1.0, 0.0, Vec3::Z).unwrap();
        let expect = Mat3::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        assert!((a - expect).frobenius_norm() < 1e-15);

        let a = so2_matrix(1.0, 1.0, PI / 2.0, Vec3::Z).unwrap();
        let r = rotation_from_axis_angle(Vec3::Z, PI / 2.0).unwrap();
        assert!((a - *r.matrix()).frobenius_norm() < 1e-15);

        assert_eq!(
            so2_matrix(1.0, 1.0, 0.0, Vec3::new(0.0, 0.0, 1.5)).unwrap_err(),
            LayerError::NonUnitAxis
        );
    }

    #[test]
    fn so2_matrix_is_smooth_in_parameters() {
        // Central differences of A against the analytic derivative matrices:
        // dA/da = jj^T R, dA/db = (I - jj^T) R, dA/dphi = M K R.
        let j = Vec3::new(1.0, 2.0, -0.5).normalized().unwrap();
        let (a, b, phi) = (1.3, 0.7, 0.4);
        let h = 1e-6;
        let jj = j.outer(j);
        let r = rotation_from_axis_angle(j, phi).unwrap();
        let m = Mat3::IDENTITY * b + jj * (a - b);

        let fd = |f: &dyn Fn(f64) -> Mat3| (f(h) - f(-h)) * (1.0 / (2.0 * h));
        let da = fd(&|e| so2_matrix(a + e, b, phi, j).unwrap());
        assert!((da - jj * *r.matrix()).frobenius_norm() < 1e-8);
        let db = fd(&|e| so2_matrix(a, b + e, phi, j).unwrap());
        assert!((db - (Mat3::IDENTITY - jj) * *r.matrix()).frobenius_norm() < 1e-8);
        let dphi = fd(&|e| so2_matrix(a, b, phi + e, j).unwrap());
        let analytic = m * Mat3::cross_matrix(j) * *r.matrix();
        assert!((dphi - analytic).frobenius_norm() < 1e-8);
    }

    #[test]
    fn so2_vector_identity_params_sum_features() {
        let params = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0]; // one output row, two inputs
        let v = [1.0, 0.0, 2.0, -0.5, 3.0, 0.25];
        let mut out = [0.0; 3];
        so2_vector_linear(&params, Vec3::Z, &v, &mut out).unwrap();
        assert_eq!(out, [0.5, 3.0, 2.25]);
    }

    #[test]
    fn so2_vector_commutes_with_axial_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let j = Vec3::new(0.4, -0.1, 1.0).normalized().unwrap();
        let params = rand_slice(&mut rng, 2 * 3 * 3);
        let v = rand_slice(&mut rng, 9);
        for _ in 0..100 {
            let alpha = rng.random_range(0.0..2.0 * PI);
            let r = rotation_from_axis_angle(j, alpha).unwrap();
            let mut lhs = vec![0.0; 6];
            so2_vector_linear(&params, j, &v, &mut lhs).unwrap();
            let lhs = rotate_vecs(&r, &lhs);
            let mut rhs = vec![0.0; 6];
            so2_vector_linear(&params, j, &rotate_vecs(&r, &v), &mut rhs).unwrap();
            assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn so2_vector_does_not_commute_off_axis() {
        // Anisotropic scaling about z cannot commute with a rotation that
        // moves the axis; the residual for this fixed configuration is about
        // 0.495, far above tolerance.
        let params = [2.0, 1.0, 0.0];
        let v = [0.3, -0.7, 0.5];
        let r = rotation_from_axis_angle(Vec3::X, PI / 4.0).unwrap();
        let mut lhs = [0.0; 3];
        so2_vector_linear(&params, Vec3::Z, &v, &mut lhs).unwrap();
        let lhs = rotate_vecs(&r, &lhs);
        let mut rhs = [0.0; 3];
        so2_vector_linear(&params, Vec3::Z, &rotate_vecs(&r, &v), &mut rhs).unwrap();
        let residual = (Vec3::from_slice(&lhs) - Vec3::from_slice(&rhs)).norm();
        assert!(residual > 1e-3);
        assert!((residual - 0.6082762530298218).abs() < 1e-9);
    }

    #[test]
    fn so2_tensor_identity_params_sum_features() {
        let params = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0]; // one row, one input
        let t: Vec<f64> = (1..=9).map(|k| k as f64).collect();
        let mut out = vec![0.0; 9];
        so2_tensor_linear(&params, Vec3::Z, &t, &mut out).unwrap();
        assert!(max_abs_diff(&out, &t) < 1e-15);
    }

    #[test]
    fn so2_tensor_commutes_with_axial_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let j = Vec3::new(-0.2, 0.9, 0.4).normalized().unwrap();
        let params = rand_slice(&mut rng, 2 * 2 * 6);
        let t = rand_slice(&mut rng, 18);
        for _ in 0..100 {
            let alpha = rng.random_range(0.0..2.0 * PI);
            let r = rotation_from_axis_angle(j, alpha).unwrap();
            let mut lhs = vec![0.0; 18];
            so2_tensor_linear(&params, j, &t, &mut lhs).unwrap();
            let lhs = rotate_tensors(&r, &lhs);
            let mut rhs = vec![0.0; 18];
            so2_tensor_linear(&params, j, &rotate_tensors(&r, &t), &mut rhs).unwrap();
            assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn so2_tensor_fixes_axis_projector_direction() {
        // With both axial angles zero, A (jj^T) B^T = a1 a2 jj^T.
        let j = Vec3::new(0.3, -1.0, 2.0).normalized().unwrap();
        let (a1, b1, a2, b2) = (1.7, 0.4, 0.8, 2.1);
        let params = [a1, b1, 0.0, a2, b2, 0.0];
        let jj = j.outer(j);
        let mut out = vec![0.0; 9];
        so2_tensor_linear(&params, j, &jj.e, &mut out).unwrap();
        let expect = jj * (a1 * a2);
        assert!((Mat3::from_slice(&out) - expect).frobenius_norm() < 1e-12);
    }

    #[test]
    fn bilinear_hand_example() {
        // F = 1: s = (1, 1), v = (x, y), T = (I, I).
        let s = [1.0, 1.0];
        let v = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut t = [0.0; 18];
        Mat3::IDENTITY.write_to(&mut t[0..9]);
        Mat3::IDENTITY.write_to(&mut t[9..18]);
        let (mut os, mut ov, mut ot) = ([0.0; 3], [0.0; 9], [0.0; 27]);
        bilinear_mix(&s, &v, &t, &mut os, &mut ov, &mut ot).unwrap();

        assert_eq!(os, [1.0, 0.0, 3.0]);
        assert_eq!(ov[0..3], [0.0, 1.0, 0.0]); // s_a v_b = y
        assert_eq!(ov[3..6], [0.0, 0.0, 1.0]); // x cross y = z
        assert_eq!(ov[6..9], [0.0, 1.0, 0.0]); // I y = y
        assert_eq!(ot[0..9], Mat3::IDENTITY.e); // s_a T_b
        assert_eq!(ot[9..18], Vec3::X.outer(Vec3::Y).e); // v_a v_b^T
        assert_eq!(ot[18..27], Mat3::IDENTITY.e); // T_a T_b
    }

    #[test]
    fn bilinear_zero_maps_to_zero_and_validates_shapes() {
        let (mut os, mut ov, mut ot) = ([1.0; 3], [1.0; 9], [1.0; 27]);
        bilinear_mix(&[0.0; 2], &[0.0; 6], &[0.0; 18], &mut os, &mut ov, &mut ot)
            .unwrap();
        assert!(os.iter().chain(&ov).chain(&ot).all(|&x| x == 0.0));

        assert!(bilinear_mix(&[0.0; 3], &[0.0; 9], &[0.0; 27], &mut os, &mut ov, &mut ot)
            .is_err());
        assert!(bilinear_mix(&[0.0; 2], &[0.0; 9], &[0.0; 18], &mut os, &mut ov, &mut ot)
            .is_err());
    }

    #[test]
    fn bilinear_is_so3_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let s = rand_slice(&mut rng, 4);
        let v = rand_slice(&mut rng, 12);
        let t = rand_slice(&mut rng, 36);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let (mut os, mut ov, mut ot) = (vec![0.0; 6], vec![0.0; 18], vec![0.0; 54]);
            bilinear_mix(&s, &v, &t, &mut os, &mut ov, &mut ot).unwrap();
            let (lv, lt) = (rotate_vecs(&r, &ov), rotate_tensors(&r, &ot));
            let (mut rs, mut rv, mut rt) = (vec![0.0; 6], vec![0.0; 18], vec![0.0; 54]);
            bilinear_mix(&s, &rotate_vecs(&r, &v), &rotate_tensors(&r, &t), &mut rs, &mut rv, &mut rt)
                .unwrap();
            assert!(max_abs_diff(&os, &rs) < 1e-10); // scalars invariant
            assert!(max_abs_diff(&lv, &rv) < 1e-10);
            assert!(max_abs_diff(&lt, &rt) < 1e-10);
        }
    }

    #[test]
    fn bilinear_scales_linearly_in_each_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let s = rand_slice(&mut rng, 2);
        let v = rand_slice(&mut rng, 6);
        let t = rand_slice(&mut rng, 18);
        let lam = 3.5;
        // Scale only the a-half of every representation.
        let mut s2 = s.clone();
        s2[0] *= lam;
        let mut v2 = v.clone();
        for x in &mut v2[0..3] {
            *x *= lam;
        }
        let mut t2 = t.clone();
        for x in &mut t2[0..9] {
            *x *= lam;
        }
        let (mut os, mut ov, mut ot) = (vec![0.0; 3], vec![0.0; 9], vec![0.0; 27]);
        bilinear_mix(&s, &v, &t, &mut os, &mut ov, &mut ot).unwrap();
        let (mut os2, mut ov2, mut ot2) = (vec![0.0; 3], vec![0.0; 9], vec![0.0; 27]);
        bilinear_mix(&s2, &v2, &t2, &mut os2, &mut ov2, &mut ot2).unwrap();
        for k in 0..3 {
            assert!((os2[k] - lam * os[k]).abs() < 1e-12 * (1.0 + os[k].abs()));
        }
        for k in 0..9 {
            assert!((ov2[k] - lam * ov[k]).abs() < 1e-12 * (1.0 + ov[k].abs()));
        }
        for k in 0..27 {
            assert!((ot2[k] - lam * ot[k]).abs() < 1e-12 * (1.0 + ot[k].abs()));
        }
    }

    #[test]
    fn bilinear_sv_matches_full_menu_restriction() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let s = rand_slice(&mut rng, 4);
        let v = rand_slice(&mut rng, 12);
        let (mut os, mut ov) = (vec![0.0; 4], vec![0.0; 12]);
        bilinear_mix_sv(&s, &v, &mut os, &mut ov).unwrap();
        // First product group: s_a s_b and s_a v_b; second: v_a.v_b, v_a x v_b.
        assert_eq!(os[0], s[0] * s[2]);
        assert_eq!(os[2], Vec3::from_slice(&v[0..]).dot(Vec3::from_slice(&v[6..])));
        let expect = Vec3::from_slice(&v[9..]) * s[1];
        assert_eq!(&ov[3..6], &[expect.x, expect.y, expect.z]);
        assert!(bilinear_mix_sv(&s, &v[..9], &mut os, &mut ov).is_err());
    }

    #[test]
    fn vrelu_examples() {
        let mut out = [0.0; 3];
        vrelu(&[0.3, 0.0, 0.0], &mut out);
        assert_eq!(out, [0.3, 0.0, 0.0]);
        vrelu(&[3.0, 4.0, 0.0], &mut out);
        assert_eq!(out, [0.6, 0.8, 0.0]);
        vrelu(&[0.0, 0.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn trelu_examples() {
        let mut out = [0.0; 9];
        let half = (Mat3::IDENTITY * 0.5).e;
        trelu(&half, &mut out);
        assert_eq!(out, half);
        trelu(&(Mat3::IDENTITY * 2.0).e, &mut out);
        let third = 1.0 / crate::math::sqrt(3.0);
        for (k, &x) in out.iter().enumerate() {
            let expect = if k % 4 == 0 { third } else { 0.0 };
            assert!((x - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn saturating_activations_are_norm_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..200 {
            let v = rand_slice(&mut rng, 3);
            let scale = rng.random_range(0.0..4.0);
            let vs: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let mut out = vec![0.0; 3];
            vrelu(&vs, &mut out);
            let n_in = Vec3::from_slice(&vs).norm();
            let n_out = Vec3::from_slice(&out).norm();
            assert!(n_out <= n_in.min(1.0) + 1e-12);

            let t = rand_slice(&mut rng, 9);
            let mut tout = vec![0.0; 9];
            trelu(&t, &mut tout);
            let n_in = Mat3::from_slice(&t).frobenius_norm();
            let n_out = Mat3::from_slice(&tout).frobenius_norm();
            assert!(n_out <= n_in.min(1.0) + 1e-12);
        }
    }

    #[test]
    fn scalar_relu_examples() {
        let mut out = [0.0; 2];
        scalar_relu(&[-1.0, 2.0], &mut out);
        assert_eq!(out, [0.0, 2.0]);
        scalar_relu(&[0.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        let mut twice = [0.0; 2];
        let first = out;
        scalar_relu(&first, &mut twice);
        assert_eq!(twice, first);
    }
}
