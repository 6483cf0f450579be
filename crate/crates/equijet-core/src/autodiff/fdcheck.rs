//! Central-difference verification of recorded gradients.

use super::store::ParamStore;
use alloc::vec::Vec;
use rand::Rng;

/// Scale floor for relative gradient errors: components smaller than this are
/// compared on an absolute scale so that near-zero gradients do not blow up
/// the ratio.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

/// Disagreement fraction between the two one-sided difference quotients above
/// which a probe window is treated as non-smooth and the coordinate redrawn.
///
/// On a twice-differentiable stretch the forward and backward quotients agree
/// to `h * |f''|`, far below any slope of comparable size; when a piecewise
/// boundary (a ReLU-style threshold crossing) falls inside the `±h` window
/// they differ by the full slope jump. Central differences across such a
/// boundary measure an average of the two branches rather than the derivative
/// at the point, so those coordinates carry no information about the analytic
/// gradient and are skipped.
pub const FD_KINK_FRAC: f64 = 0.25;

/// Compares `ad_grads` against central differences of `loss` for up to
/// `n_params` randomly chosen parameters (all of them if the store is small)
/// and returns the worst relative error
/// `|ad - fd| / max(|ad|, |fd|, FD_SCALE_FLOOR)`.
///
/// Coordinates whose probe window straddles an activation boundary — detected
/// by the one-sided quotients disagreeing by more than [`FD_KINK_FRAC`] of
/// their magnitude — are redrawn (up to four candidates per requested probe),
/// since the comparison is only meaningful where the loss is differentiable
/// across the whole window. If every candidate is non-smooth the worst error
/// over the skipped coordinates is returned instead, so a degenerate model
/// fails loudly rather than passing vacuously.
///
/// The store is perturbed in place and restored after each probe; `loss` must
/// re-run the full forward pass from the store it is handed.
pub fn finite_diff_check<F, R>(
    store: &mut ParamStore,
    ad_grads: &[f64],
    mut loss: F,
    n_params: usize,
    h: f64,
    rng: &mut R,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
    R: Rng + ?Sized,
{
    assert_eq!(ad_grads.len(), store.len(), "gradient length vs store");
    let total = store.len();
    if total == 0 {
        return 0.0;
    }
    let probes = n_params.min(total);
    let budget = (probes * 4).min(total);
    // Partial Fisher-Yates for distinct candidate indices.
    let mut indices: Vec<usize> = (0..total).collect();
    for k in 0..budget {
        let pick = rng.random_range(k..total);
        indices.swap(k, pick);
    }

    let base = loss(store);
    let mut worst_smooth = 0.0f64;
    let mut worst_any = 0.0f64;
    let mut kept = 0usize;
    for &i in &indices[..budget] {
        if kept == probes {
            break;
        }
        let original = store.values()[i];
        store.values_mut()[i] = original + h;
        let up = loss(store);
        store.values_mut()[i] = original - h;
        let down = loss(store);
        store.values_mut()[i] = original;
        let fd = (up - down) / (2.0 * h);
        let ad = ad_grads[i];
        let denom = ad.abs().max(fd.abs()).max(FD_SCALE_FLOOR);
        let rel = (ad - fd).abs() / denom;
        worst_any = worst_any.max(rel);

        let fwd = (up - base) / h;
        let bwd = (base - down) / h;
        let jump = (fwd - bwd).abs();
        if jump > FD_KINK_FRAC * fwd.abs().max(bwd.abs()).max(FD_SCALE_FLOOR) {
            continue;
        }
        kept += 1;
        worst_smooth = worst_smooth.max(rel);
    }
    if kept > 0 { worst_smooth } else { worst_any }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_correct_and_broken_gradients() {
        // loss = sum_i c_i x_i^2, gradient 2 c_i x_i.
        let mut builder = ParamStore::builder();
        let view = builder.register("x", 6);
        let mut store = builder.build();
        for (i, v) in store.slice_mut(view).iter_mut().enumerate() {
            *v = 0.3 + 0.1 * i as f64;
        }
        let coeff = [1.0, -2.0, 0.5, 3.0, -0.25, 1.5];
        let loss = |s: &ParamStore| -> f64 {
            s.values().iter().zip(coeff).map(|(x, c)| c * x * x).sum()
        };
        let good: alloc::vec::Vec<f64> =
            store.values().iter().zip(coeff).map(|(x, c)| 2.0 * c * x).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = finite_diff_check(&mut store, &good, loss, 6, 1e-5, &mut rng);
        assert!(err < 1e-8, "clean gradient flagged: {err:e}");

        let mut bad = good.clone();
        bad[3] += 0.5;
        let err = finite_diff_check(&mut store, &bad, loss, 6, 1e-5, &mut rng);
        assert!(err > 1e-2, "broken gradient missed: {err:e}");
    }

    #[test]
    fn boundary_straddling_probes_are_redrawn() {
        // Coordinate 0 sits 1e-7 below a ReLU-style threshold: the +h probe
        // switches the branch on, so a naive central difference reports a
        // large slope where the analytic gradient is legitimately zero.
        let mut builder = ParamStore::builder();
        let view = builder.register("x", 6);
        let mut store = builder.build();
        for (i, v) in store.slice_mut(view).iter_mut().enumerate() {
            *v = 0.3 + 0.1 * i as f64;
        }
        store.values_mut()[0] = -1e-7;
        let coeff = [10.0, -2.0, 0.5, 3.0, -0.25, 1.5];
        let loss = |s: &ParamStore| -> f64 {
            let x = s.values();
            coeff[0] * x[0].max(0.0)
                + x.iter().zip(coeff).skip(1).map(|(x, c)| c * x * x).sum::<f64>()
        };
        let mut good: alloc::vec::Vec<f64> =
            store.values().iter().zip(coeff).map(|(x, c)| 2.0 * c * x).collect();
        good[0] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let err = finite_diff_check(&mut store, &good, loss, 6, 1e-5, &mut rng);
        assert!(err < 1e-8, "boundary probe not redrawn: {err:e}");
    }

    #[test]
    fn fully_non_smooth_store_fails_loudly() {
        // Every coordinate straddles a threshold, so no smooth probe exists
        // and the check must surface the disagreement instead of passing.
        let mut builder = ParamStore::builder();
        builder.register("x", 2);
        let mut store = builder.build();
        store.values_mut().copy_from_slice(&[-1e-7, -1e-7]);
        let loss = |s: &ParamStore| -> f64 {
            s.values().iter().map(|x| 5.0 * x.max(0.0)).sum()
        };
        let grads = [0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = finite_diff_check(&mut store, &grads, loss, 2, 1e-5, &mut rng);
        assert!(err > 0.5, "degenerate store passed vacuously: {err:e}");
    }

    #[test]
    fn perturbations_are_restored() {
        let mut builder = ParamStore::builder();
        builder.register("x", 4);
        let mut store = builder.build();
        store.values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let before = store.values().to_vec();
        let grads = [0.0; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        finite_diff_check(&mut store, &grads, |_| 0.0, 4, 1e-5, &mut rng);
        assert_eq!(store.values(), &before[..]);
    }
}
