//! Softmax and cross-entropy over `[batch, classes]` logits.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn expect_logits<T: Scalar>(op: &'static str, logits: &Tensor<T>) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 || logits.shape()[1] == 0 {
        return shape_err(op, "[batch, classes>0]", logits.shape());
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Row-wise `softmax(z / temperature)` with per-row max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) {
        return invalid("softmax", "temperature must be positive");
    }
    let (batch, _) = expect_logits("softmax", logits)?;
    let mut out = logits.clone();
    for b in 0..batch {
        softmax_row(out.item_mut(b), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise `log softmax(z / temperature)`.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) {
        return invalid("log_softmax", "temperature must be positive");
    }
    let (batch, _) = expect_logits("log_softmax", logits)?;
    let mut out = logits.clone();
    for b in 0..batch {
        let row = out.item_mut(b);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row
            .iter()
            .map(|&v| ((v - max) / temperature).exp())
            .sum::<T>()
            .ln();
        for v in row.iter_mut() {
            *v = (*v - max) / temperature - lse;
        }
    }
    Ok(out)
}

/// Mean hard-label cross-entropy and its gradient `(p - onehot) / batch`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = expect_logits("cross_entropy", logits)?;
    if labels.len() != batch {
        return shape_err("cross_entropy", batch, labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return invalid("cross_entropy", format!("label {bad} outside [0, {classes})"));
    }
    let logp = log_softmax(logits, T::one())?;
    let n = T::of(batch as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for (b, &label) in labels.iter().enumerate() {
        let lp = logp.item(b);
        loss -= lp[label];
        let g = grad.item_mut(b);
        for (gi, &l) in g.iter_mut().zip(lp) {
            *gi = l.exp() / n;
        }
        g[label] -= T::one() / n;
    }
    Ok((loss / n, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::from_rows(&[vec![2.0, 2.0, 2.0, 2.0]]), 3.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25f64).abs() < 1e-15));

        let p = softmax(&Tensor::from_rows(&[vec![0.0, 3f64.ln()]]), 1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        let p = softmax(&Tensor::from_rows(&[vec![4.0, 0.0]]), 4.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = Tensor::from_rows(&[vec![1.0f64, 2.0]]);
        assert!(softmax(&z, 0.0).is_err());
        assert!(softmax(&z, -1.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax(&Tensor::from_rows(&[vec![1e300f64, 0.0]]), 1.0).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&Tensor::from_rows(&[vec![1.0f64, 0.0]]), &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);

        let (l, _) = cross_entropy(&Tensor::from_rows(&[vec![0.0f64; 7]]), &[3]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);

        let (l, _) = cross_entropy(&Tensor::from_rows(&[vec![500.0f64, 0.0, 0.0]]), &[0]).unwrap();
        assert!(l < 1e-100);
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_onehot() {
        let z = Tensor::from_rows(&[vec![0.0f64, 3f64.ln()], vec![0.0, 0.0]]);
        let (_, g) = cross_entropy(&z, &[1, 0]).unwrap();
        let expect = [0.125, -0.125, -0.25, 0.25];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let z = Tensor::from_rows(&[vec![0.0f64, 1.0]]);
        assert!(cross_entropy(&z, &[2]).is_err());
        assert!(cross_entropy(&z, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }
}
