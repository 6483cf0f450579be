//! Batched feature channels for the three rotation representations.
//!
//! A [`RepChannels`] value holds, for every event in a batch and every
//! particle slot, `F_s` scalar features, `F_v` vector features (3 components
//! each), and `F_t` order-2 tensor features (9 components each); any count may
//! be zero. Batches use a fixed number of particle slots with a boolean
//! [`Mask`] marking which slots hold real particles; padded slots carry
//! all-zero features so that masked sum-pooling is the only place the mask
//! must be consulted.

use crate::geometry::{Mat3, Rotation, Vec3};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Shape mismatch between containers that must agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeError {
    /// What disagreed, e.g. `"batch size"`.
    pub what: &'static str,
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "shape mismatch: {}", self.what)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ShapeError {}

/// Validity flags for the particle slots of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    slots: usize,
    valid: Vec<bool>,
}

impl Mask {
    /// All slots valid.
    pub fn all_valid(batch: usize, slots: usize) -> Mask {
        Mask { batch, slots, valid: vec![true; batch * slots] }
    }

    /// All slots padded.
    pub fn all_invalid(batch: usize, slots: usize) -> Mask {
        Mask { batch, slots, valid: vec![false; batch * slots] }
    }

    /// Per-event prefix counts: event `b` has `counts[b]` leading valid slots.
    pub fn from_counts(counts: &[usize], slots: usize) -> Mask {
        let mut m = Mask::all_invalid(counts.len(), slots);
        for (b, &n) in counts.iter().enumerate() {
            for p in 0..n.min(slots) {
                m.set(b, p, true);
            }
        }
        m
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn get(&self, b: usize, p: usize) -> bool {
        self.valid[b * self.slots + p]
    }

    pub fn set(&mut self, b: usize, p: usize, v: bool) {
        self.valid[b * self.slots + p] = v;
    }

    /// Number of valid slots in event `b`.
    pub fn count(&self, b: usize) -> usize {
        self.valid[b * self.slots..(b + 1) * self.slots]
            .iter()
            .filter(|&&v| v)
            .count()
    }
}

/// Batched features in the scalar, vector, and tensor representations.
///
/// Storage is flat and row-major: `scalars[b][p][f]`, `vectors[b][p][f][xyz]`,
/// `tensors[b][p][f][3x3 row-major]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepChannels {
    batch: usize,
    slots: usize,
    fs: usize,
    fv: usize,
    ft: usize,
    scalars: Vec<f64>,
    vectors: Vec<f64>,
    tensors: Vec<f64>,
}

impl RepChannels {
    /// An all-zero container of the given shape.
    pub fn zeros(batch: usize, slots: usize, fs: usize, fv: usize, ft: usize) -> Self {
        RepChannels {
            batch,
            slots,
            fs,
            fv,
            ft,
            scalars: vec![0.0; batch * slots * fs],
            vectors: vec![0.0; batch * slots * fv * 3],
            tensors: vec![0.0; batch * slots * ft * 9],
        }
    }

    /// Same shape, all entries zero.
    pub fn zeros_like(&self) -> Self {
        RepChannels::zeros(self.batch, self.slots, self.fs, self.fv, self.ft)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn scalar_features(&self) -> usize {
        self.fs
    }

    pub fn vector_features(&self) -> usize {
        self.fv
    }

    pub fn tensor_features(&self) -> usize {
        self.ft
    }

    pub fn same_shape(&self, o: &RepChannels) -> bool {
        self.batch == o.batch
            && self.slots == o.slots
            && self.fs == o.fs
            && self.fv == o.fv
            && self.ft == o.ft
    }

    /// Flat index of scalar feature block `(b, p)`; features are contiguous.
    #[inline]
    pub fn s_base(&self, b: usize, p: usize) -> usize {
        (b * self.slots + p) * self.fs
    }

    /// Flat index of the 3 components of vector feature `(b, p, f)`.
    #[inline]
    pub fn v_base(&self, b: usize, p: usize, f: usize) -> usize {
        ((b * self.slots + p) * self.fv + f) * 3
    }

    /// Flat index of the 9 components of tensor feature `(b, p, f)`.
    #[inline]
    pub fn t_base(&self, b: usize, p: usize, f: usize) -> usize {
        ((b * self.slots + p) * self.ft + f) * 9
    }

    pub fn scalar(&self, b: usize, p: usize, f: usize) -> f64 {
        self.scalars[self.s_base(b, p) + f]
    }

    pub fn set_scalar(&mut self, b: usize, p: usize, f: usize, v: f64) {
        let i = self.s_base(b, p) + f;
        self.scalars[i] = v;
    }

    pub fn vector(&self, b: usize, p: usize, f: usize) -> Vec3 {
        Vec3::from_slice(&self.vectors[self.v_base(b, p, f)..])
    }

    pub fn set_vector(&mut self, b: usize, p: usize, f: usize, v: Vec3) {
        let i = self.v_base(b, p, f);
        v.write_to(&mut self.vectors[i..i + 3]);
    }

    pub fn tensor(&self, b: usize, p: usize, f: usize) -> Mat3 {
        Mat3::from_slice(&self.tensors[self.t_base(b, p, f)..])
    }

    pub fn set_tensor(&mut self, b: usize, p: usize, f: usize, t: &Mat3) {
        let i = self.t_base(b, p, f);
        t.write_to(&mut self.tensors[i..i + 9]);
    }

    pub fn scalars(&self) -> &[f64] {
        &self.scalars
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn tensors(&self) -> &[f64] {
        &self.tensors
    }

    pub fn scalars_mut(&mut self) -> &mut [f64] {
        &mut self.scalars
    }

    pub fn vectors_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }

    pub fn tensors_mut(&mut self) -> &mut [f64] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.scalars.iter().all(|v| v.is_finite())
            && self.vectors.iter().all(|v| v.is_finite())
            && self.tensors.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry across all three channels (0 for empty shapes).
    pub fn max_abs(&self) -> f64 {
        self.scalars
            .iter()
            .chain(self.vectors.iter())
            .chain(self.tensors.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Largest absolute entry-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, o: &RepChannels) -> f64 {
        debug_assert!(self.same_shape(o));
        let pair = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        pair(&self.scalars, &o.scalars)
            .max(pair(&self.vectors, &o.vectors))
            .max(pair(&self.tensors, &o.tensors))
    }

    /// Checks the padding convention: every invalid slot is all-zero.
    pub fn padding_is_zero(&self, m: &Mask) -> bool {
        if m.batch() != self.batch || m.slots() != self.slots {
            return false;
        }
        for b in 0..self.batch {
            for p in 0..self.slots {
                if m.get(b, p) {
                    continue;
                }
                let s = self.s_base(b, p);
                if self.scalars[s..s + self.fs].iter().any(|&v| v != 0.0) {
                    return false;
                }
                let v = self.v_base(b, p, 0);
                if self.vectors[v..v + 3 * self.fv].iter().any(|&x| x != 0.0) {
                    return false;
                }
                let t = self.t_base(b, p, 0);
                if self.tensors[t..t + 9 * self.ft].iter().any(|&x| x != 0.0) {
                    return false;
                }
            }
        }
        true
    }
}

/// Applies a rotation channel-wise: scalars untouched, vectors `v -> R v`,
/// tensors `T -> R T R^T`.
pub fn rotate_channels(r: &Rotation, c: &RepChannels) -> RepChannels {
    let mut out = c.clone();
    for b in 0..c.batch {
        for p in 0..c.slots {
            for f in 0..c.fv {
                out.set_vector(b, p, f, r.apply_to_vector(c.vector(b, p, f)));
            }
            for f in 0..c.ft {
                out.set_tensor(b, p, f, &r.apply_to_tensor(&c.tensor(b, p, f)));
            }
        }
    }
    out
}

/// Per-feature sum over the valid particle slots of each event, producing a
/// single-slot batch.
pub fn masked_sum_pool(c: &RepChannels, m: &Mask) -> Result<RepChannels, ShapeError> {
    if m.batch() != c.batch {
        return Err(ShapeError { what: "mask batch size" });
    }
    if m.slots() != c.slots {
        return Err(ShapeError { what: "mask slot count" });
    }
    let mut out = RepChannels::zeros(c.batch, 1, c.fs, c.fv, c.ft);
    for b in 0..c.batch {
        for p in 0..c.slots {
            if !m.get(b, p) {
                continue;
            }
            let (src, dst) = (c.s_base(b, p), out.s_base(b, 0));
            for f in 0..c.fs {
                out.scalars[dst + f] += c.scalars[src + f];
            }
            let (src, dst) = (c.v_base(b, p, 0), out.v_base(b, 0, 0));
            for k in 0..3 * c.fv {
                out.vectors[dst + k] += c.vectors[src + k];
            }
            let (src, dst) = (c.t_base(b, p, 0), out.t_base(b, 0, 0));
            for k in 0..9 * c.ft {
                out.tensors[dst + k] += c.tensors[src + k];
            }
        }
    }
    Ok(out)
}

/// Concatenates feature channels representation-wise; batch and slot counts
/// must agree.
pub fn concat_features(a: &RepChannels, b: &RepChannels) -> Result<RepChannels, ShapeError> {
    if a.batch != b.batch {
        return Err(ShapeError { what: "batch size" });
    }
    if a.slots != b.slots {
        return Err(ShapeError { what: "slot count" });
    }
    let mut out =
        RepChannels::zeros(a.batch, a.slots, a.fs + b.fs, a.fv + b.fv, a.ft + b.ft);
    for ib in 0..a.batch {
        for p in 0..a.slots {
            let dst = out.s_base(ib, p);
            let sa = a.s_base(ib, p);
            out.scalars[dst..dst + a.fs].copy_from_slice(&a.scalars[sa..sa + a.fs]);
            let sb = b.s_base(ib, p);
            out.scalars[dst + a.fs..dst + a.fs + b.fs]
                .copy_from_slice(&b.scalars[sb..sb + b.fs]);

            let dst = out.v_base(ib, p, 0);
            let va = a.v_base(ib, p, 0);
            out.vectors[dst..dst + 3 * a.fv]
                .copy_from_slice(&a.vectors[va..va + 3 * a.fv]);
            let vb = b.v_base(ib, p, 0);
            out.vectors[dst + 3 * a.fv..dst + 3 * (a.fv + b.fv)]
                .copy_from_slice(&b.vectors[vb..vb + 3 * b.fv]);

            let dst = out.t_base(ib, p, 0);
            let ta = a.t_base(ib, p, 0);
            out.tensors[dst..dst + 9 * a.ft]
                .copy_from_slice(&a.tensors[ta..ta + 9 * a.ft]);
            let tb = b.t_base(ib, p, 0);
            out.tensors[dst + 9 * a.ft..dst + 9 * (a.ft + b.ft)]
                .copy_from_slice(&b.tensors[tb..tb + 9 * b.ft]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_channels(
        rng: &mut ChaCha8Rng,
        batch: usize,
        slots: usize,
        fs: usize,
        fv: usize,
        ft: usize,
    ) -> RepChannels {
        let mut c = RepChannels::zeros(batch, slots, fs, fv, ft);
        for v in c
            .scalars
            .iter_mut()
            .chain(c.vectors.iter_mut())
            .chain(c.tensors.iter_mut())
        {
            *v = rng.random_range(-1.0..1.0);
        }
        c
    }

    #[test]
    fn rotate_by_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_channels(&mut rng, 2, 3, 2, 2, 2);
        assert_eq!(rotate_channels(&Rotation::IDENTITY, &c), c);
    }

    #[test]
    fn rotation_leaves_scalars_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_channels(&mut rng, 2, 3, 4, 1, 1);
        let r = random_rotation(&mut rng);
        assert_eq!(rotate_channels(&r, &c).scalars(), c.scalars());
    }

    #[test]
    fn double_rotation_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_channels(&mut rng, 2, 2, 1, 2, 2);
        let r1 = random_rotation(&mut rng);
        let r2 = random_rotation(&mut rng);
        let twice = rotate_channels(&r1, &rotate_channels(&r2, &c));
        let once = rotate_channels(&(r1 * r2), &c);
        assert!(twice.max_abs_diff(&once) < 1e-12);
    }

    #[test]
    fn pool_of_single_valid_slot_is_verbatim() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_channels(&mut rng, 1, 5, 2, 2, 1);
        let mut m = Mask::all_invalid(1, 5);
        m.set(0, 3, true);
        let pooled = masked_sum_pool(&c, &m).unwrap();
        for f in 0..2 {
            assert_eq!(pooled.scalar(0, 0, f), c.scalar(0, 3, f));
            assert_eq!(pooled.vector(0, 0, f), c.vector(0, 3, f));
        }
        assert_eq!(pooled.tensor(0, 0, 0), c.tensor(0, 3, 0));
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_channels(&mut rng, 1, 4, 1, 1, 1);
        // Swap the contents of slots 0 and 2 by hand.
        let mut swapped = c.clone();
        for f in 0..1 {
            swapped.set_scalar(0, 0, f, c.scalar(0, 2, f));
            swapped.set_scalar(0, 2, f, c.scalar(0, 0, f));
            swapped.set_vector(0, 0, f, c.vector(0, 2, f));
            swapped.set_vector(0, 2, f, c.vector(0, 0, f));
            swapped.set_tensor(0, 0, f, &c.tensor(0, 2, f));
            swapped.set_tensor(0, 2, f, &c.tensor(0, 0, f));
        }
        let m = Mask::all_valid(1, 4);
        let a = masked_sum_pool(&c, &m).unwrap();
        let b = masked_sum_pool(&swapped, &m).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn pool_of_all_invalid_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_channels(&mut rng, 2, 3, 2, 1, 1);
        let pooled = masked_sum_pool(&c, &Mask::all_invalid(2, 3)).unwrap();
        assert_eq!(pooled.max_abs(), 0.0);
    }

    #[test]
    fn pool_rejects_mismatched_mask() {
        let c = RepChannels::zeros(2, 3, 1, 0, 0);
        assert!(masked_sum_pool(&c, &Mask::all_valid(1, 3)).is_err());
        assert!(masked_sum_pool(&c, &Mask::all_valid(2, 4)).is_err());
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_channels(&mut rng, 2, 3, 2, 1, 1);
        let empty = RepChannels::zeros(2, 3, 0, 0, 0);
        assert_eq!(concat_features(&c, &empty).unwrap(), c);
        assert_eq!(concat_features(&empty, &c).unwrap(), c);
    }

    #[test]
    fn concat_adds_feature_counts() {
        let a = RepChannels::zeros(2, 3, 1, 2, 3);
        let b = RepChannels::zeros(2, 3, 4, 5, 6);
        let out = concat_features(&a, &b).unwrap();
        assert_eq!(out.scalar_features(), 5);
        assert_eq!(out.vector_features(), 7);
        assert_eq!(out.tensor_features(), 9);
        assert!(concat_features(&a, &RepChannels::zeros(1, 3, 1, 0, 0)).is_err());
    }

    #[test]
    fn concat_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_channels(&mut rng, 2, 2, 1, 2, 1);
        let b = random_channels(&mut rng, 2, 2, 2, 1, 2);
        let r = random_rotation(&mut rng);
        let lhs = rotate_channels(&r, &concat_features(&a, &b).unwrap());
        let rhs =
            concat_features(&rotate_channels(&r, &a), &rotate_channels(&r, &b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn pool_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_channels(&mut rng, 3, 4, 2, 2, 2);
        let m = Mask::from_counts(&[1, 3, 4], 4);
        let r = random_rotation(&mut rng);
        let lhs = rotate_channels(&r, &masked_sum_pool(&c, &m).unwrap());
        let rhs = masked_sum_pool(&rotate_channels(&r, &c), &m).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn padding_audit_detects_nonzero_invalid_slots() {
        let mut c = RepChannels::zeros(1, 3, 1, 1, 0);
        let m = Mask::from_counts(&[2], 3);
        assert!(c.padding_is_zero(&m));
        c.set_scalar(0, 2, 0, 0.5);
        assert!(!c.padding_is_zero(&m));
    }

    #[test]
    fn mask_from_counts_counts() {
        let m = Mask::from_counts(&[0, 2, 5], 4);
        assert_eq!(m.count(0), 0);
        assert_eq!(m.count(1), 2);
        assert_eq!(m.count(2), 4); // clamped to the slot count
        assert!(m.get(1, 1) && !m.get(1, 2));
    }
}
