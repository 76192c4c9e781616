//! Softmax and the cross-entropy loss head.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<R: Real>(logits: &Tensor<R>) -> Result<Tensor<R>> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "softmax expects [B, K] logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(vec![b, k]);
    for i in 0..b {
        let row = logits.row(i);
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = R::zero();
        let orow = &mut out.data_mut()[i * k..(i + 1) * k];
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over the batch plus its logit gradient
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<R: Real>(
    logits: &Tensor<R>,
    labels: &[usize],
) -> Result<(R, Tensor<R>)> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits)?;
    let batch = R::from_f64(b as f64);
    let mut loss = R::zero();
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i)[y];
        // Clamp keeps the limit case finite; softmax already guarantees p > 0
        // for finite logits.
        loss -= p.max(R::from_f64(1e-300)).ln();
        grad.data_mut()[i * k + y] -= R::one();
    }
    loss /= batch;
    grad.scale(R::one() / batch);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_two_way_loss_is_ln_two() {
        let logits = Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_margin_drives_loss_to_zero() {
        let logits = Tensor::from_rows(&[vec![50.0f64, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let logits = Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::new(
            vec![8, 5],
            (0..40).map(|_| rng.gen_range(-4.0..4.0f64)).collect(),
        )
        .unwrap();
        let p = softmax(&logits).unwrap();
        for i in 0..8 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = [2, 0, 1, 3];
        let f = |v: &[f64]| {
            let logits = Tensor::new(vec![4, 3], v.to_vec()).unwrap();
            softmax_cross_entropy(
                &logits,
                &labels[..4].iter().map(|&y| y % 3).collect::<Vec<_>>(),
            )
            .unwrap()
            .0
        };
        let numeric = finite_diff_grad(f, &point, 1e-5);
        let logits = Tensor::new(vec![4, 3], point.clone()).unwrap();
        let labels3: Vec<usize> = labels.iter().map(|&y| y % 3).collect();
        let (_, analytic) = softmax_cross_entropy(&logits, &labels3).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            let denom = 1.0f64.max(a.abs()).max(n.abs());
            assert!(((a - n) / denom).abs() < 1e-6);
        }
    }
}
