use super::{NnError, Result, Tensor};
use crate::data::{ClassLabel, ClassWeights, NUM_CLASSES};

/// Probabilities are clamped to at least this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-weight * ln(max(p_label, PROB_FLOOR))` computed through log-softmax
/// so the result stays accurate when `p_label` is tiny.
pub(crate) fn sample_loss(logits: &[f64], label: ClassLabel, weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let log_p = (logits[label.index()] - max - lse).max(PROB_FLOOR.ln());
    -weight * log_p
}

/// Row-wise softmax of `[B, 8]` logits (max-subtracted).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[1] != NUM_CLASSES {
        return Err(NnError::ShapeMismatch(format!(
            "softmax expects [B, 8], got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    let rows = (0..logits.batch()).map(|b| softmax_row(logits.row(b))).collect();
    Tensor::stack(&[NUM_CLASSES], rows)
}

/// Mean over the batch of `-w[y] * ln(p[y])`: the weighted cross-entropy with
/// one-hot targets.
pub fn weighted_ce_loss(probs: &Tensor, labels: &[ClassLabel], weights: &ClassWeights) -> Result<f64> {
    if probs.shape().len() != 2 || probs.shape()[1] != NUM_CLASSES || probs.batch() != labels.len() {
        return Err(NnError::ShapeMismatch(format!(
            "probabilities {:?} vs {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let scale = 1.0 / labels.len() as f64;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(b, y)| -weights.get(*y) * probs.row(b)[y.index()].max(PROB_FLOOR).ln() * scale)
        .sum())
}

/// Gradient of one sample's loss term with respect to its logits:
/// `weight * scale * (p - onehot(y))`.
pub fn logit_gradient(probs: &[f64], label: ClassLabel, weight: f64, scale: f64) -> Vec<f64> {
    let k = weight * scale;
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| k * (p - if c == label.index() { 1.0 } else { 0.0 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: [f64; 8]) -> Tensor {
        Tensor::new(vec![1, 8], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&row([3.0; 8])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));

        let p = softmax(&row([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 7.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.279708).abs() < 1e-6);
        assert!((p.data()[3] - 0.102899).abs() < 1e-6);

        let z = [0.3, -1.2, 4.0, 0.0, 2.2, -0.7, 1.1, 0.5];
        let shifted = z.map(|v| v + 123.0);
        let a = softmax(&row(z)).unwrap();
        let b = softmax(&row(shifted)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            softmax(&row([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
            Err(NnError::NonFiniteInput)
        ));
    }

    #[test]
    fn loss_examples() {
        let w = ClassWeights {
            weights: [0.5, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            mode: crate::data::WeightMode::Custom([0.5, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        };
        let uniform = row([0.125; 8]);
        let l = weighted_ce_loss(&uniform, &[ClassLabel::NV], &w).unwrap();
        assert!((l - 2.0 * 8f64.ln()).abs() < 1e-12);
        assert!((8f64.ln() - 2.079442).abs() < 1e-6);

        let mut sure = [0.0; 8];
        sure[0] = 1.0;
        assert_eq!(weighted_ce_loss(&row(sure), &[ClassLabel::MEL], &w).unwrap(), 0.0);

        // floor keeps a zero probability finite
        let l = weighted_ce_loss(&row(sure), &[ClassLabel::NV], &w).unwrap();
        assert!((l - 2.0 * -PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn fused_gradient_examples() {
        let g = logit_gradient(&[0.125; 8], ClassLabel::MEL, 1.0, 1.0);
        assert_eq!(g[0], -0.875);
        assert!(g[1..].iter().all(|&v| v == 0.125));
        let mut onehot = [0.0; 8];
        onehot[4] = 1.0;
        assert!(logit_gradient(&onehot, ClassLabel::BKL, 3.0, 0.5)
            .iter()
            .all(|&v| v == 0.0));
    }
}
