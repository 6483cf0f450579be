//! Fused softmax cross-entropy for two-class logits.

use crate::math;

/// Per-event stabilized softmax cross-entropy.
///
/// Returns `(loss, p0, p1)` where `loss = log-sum-exp(z) - z_label` and the
/// `p` are the softmax probabilities; the log-sum-exp route keeps both the
/// loss and the probabilities accurate for widely separated logits.
pub(crate) fn softmax2_ce(z0: f64, z1: f64, label: u8) -> (f64, f64, f64) {
    let (hi, lo) = if z0 >= z1 { (z0, z1) } else { (z1, z0) };
    let lse = hi + math::ln_1p(math::exp(lo - hi));
    let p0 = math::exp(z0 - lse);
    let p1 = math::exp(z1 - lse);
    let zl = if label == 0 { z0 } else { z1 };
    (lse - zl, p0, p1)
}

/// Mean two-class cross-entropy over a batch.
///
/// `logits` holds `(z0, z1)` pairs event-major (`2 B` values); labels must be
/// 0 or 1.
pub fn cross_entropy_loss(logits: &[f64], labels: &[u8]) -> Result<f64, super::TapeError> {
    use super::TapeError;
    if logits.len() != 2 * labels.len() || labels.is_empty() {
        return Err(TapeError::Shape("logit/label counts"));
    }
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(TapeError::InvalidLabel(b));
        }
        let (l, _, _) = softmax2_ce(logits[2 * b], logits[2 * b + 1], label);
        total += l;
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_logits_give_ln2() {
        let l = cross_entropy_loss(&[0.0, 0.0], &[0]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy_loss(&[0.0, 0.0], &[1]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_tiny_loss() {
        // ln(1 + exp(-20)), which naive exp-then-ln arithmetic gets wrong.
        let l = cross_entropy_loss(&[10.0, -10.0], &[0]).unwrap();
        assert!((l - 2.061153620314381e-9).abs() < 1e-15);
    }

    #[test]
    fn loss_is_nonnegative() {
        for &(z0, z1) in &[(0.0, 0.0), (3.0, -1.0), (-7.5, 2.0), (1e3, 1e3)] {
            for label in [0u8, 1] {
                let l = cross_entropy_loss(&[z0, z1], &[label]).unwrap();
                assert!(l >= 0.0);
            }
        }
    }

    #[test]
    fn batch_mean_and_validation() {
        let l = cross_entropy_loss(&[0.0, 0.0, 10.0, -10.0], &[0, 0]).unwrap();
        let expect = 0.5 * (core::f64::consts::LN_2 + 2.061153620314381e-9);
        assert!((l - expect).abs() < 1e-15);
        assert!(cross_entropy_loss(&[0.0, 0.0], &[2]).is_err());
        assert!(cross_entropy_loss(&[0.0, 0.0, 0.0], &[0]).is_err());
        assert!(cross_entropy_loss(&[], &[]).is_err());
    }
}
