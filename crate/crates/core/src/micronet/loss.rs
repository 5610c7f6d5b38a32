use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Clamp applied by [`inverse_logistic`] to keep logits bounded.
pub const LOGIT_CLAMP_EPS: f64 = 1e-7;

/// `1 / (1 + e^-x)`, evaluated without overflow for either sign.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(p / (1 - p))` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn inverse_logistic(p: f64) -> f64 {
    logit_clamped(p, LOGIT_CLAMP_EPS)
}

pub(crate) fn logit_clamped(p: f64, eps: f64) -> f64 {
    let p = if p.is_nan() {
        0.5
    } else {
        p.clamp(eps, 1.0 - eps)
    };
    p.ln() - (-p).ln_1p()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `ln Σ exp(v)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of one logit vector against `label`; returns the loss and
/// `softmax - onehot`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a `[batch, C]` logit matrix; the gradient is
/// scaled by `1 / batch`.
pub fn softmax_xent_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = labels.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for (r, &label) in labels.iter().enumerate() {
        let (loss, g) = softmax_xent(logits.row(r), label)?;
        total += loss;
        for (d, v) in grad.row_mut(r).iter_mut().zip(g) {
            *d = v / n;
        }
    }
    Ok((total / n, grad))
}

/// Sum of squared errors and its gradient `2 (output - target)`.
pub fn squared_error(output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    output.check_same_shape(target)?;
    let diff: Vec<f64> = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(o, t)| o - t)
        .collect();
    let loss = diff.iter().map(|d| d * d).sum();
    let grad = Tensor::new(
        output.shape().to_vec(),
        diff.iter().map(|d| 2.0 * d).collect(),
    )?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn logistic_examples() {
        assert_eq!(logistic(0.0), 0.5);
        assert_eq!(inverse_logistic(0.5), 0.0);
        assert!((logistic(inverse_logistic(0.9)) - 0.9).abs() < 1e-12);
        assert!(inverse_logistic(0.0).is_finite());
        assert!(inverse_logistic(1.0).is_finite());
        assert!((inverse_logistic(2.0) - inverse_logistic(1.0 - 1e-7)).abs() < 1e-12);
        assert_eq!(logistic(-1000.0), 0.0);
        assert_eq!(logistic(1000.0), 1.0);
    }

    #[test]
    fn xent_uniform_and_stable() {
        let (loss, _) = softmax_xent(&[0.3; 7], 2).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        let (loss, grad) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!(matches!(
            softmax_xent(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn xent_gradient_matches_central_differences() {
        let logits = [0.7, -1.3, 2.1, 0.05, -0.4];
        let label = 3;
        let (_, grad) = softmax_xent(&logits, label).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits;
            let mut down = logits;
            up[i] += h;
            down[i] -= h;
            let numeric = (softmax_xent(&up, label).unwrap().0
                - softmax_xent(&down, label).unwrap().0)
                / (2.0 * h);
            assert!((numeric - grad[i]).abs() / grad[i].abs().max(1e-6) < 1e-6);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn logistic_round_trip(p in 1e-6f64..(1.0 - 1e-6)) {
            prop_assert!((logistic(inverse_logistic(p)) - p).abs() < 1e-12);
        }
    }
}
