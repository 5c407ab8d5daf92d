//! Central finite-difference verification of analytic gradients.

use crate::error::{invalid, shape_err, Result};
use crate::model::{Gradients, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::of(1e-8));
    (analytic - numeric).abs() / denom
}

/// Compare the analytic parameter gradient from `loss_fn` against
/// `(L(θ+h) − L(θ−h)) / 2h` for every parameter; returns the worst relative
/// error. A model without parameters passes vacuously with 0.
pub fn finite_difference_gradcheck<T, B, F>(model: &mut Model<T>, batch: &B, loss_fn: F, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Model<T>, &B) -> Result<(T, Gradients<T>)>,
{
    if !(h > T::zero()) {
        return invalid("finite_difference_gradcheck", "step must be positive");
    }
    let (_, grads) = loss_fn(model, batch)?;
    let analytic = grads.flatten();
    if analytic.len() != model.param_count() {
        return shape_err("finite_difference_gradcheck", model.param_count(), analytic.len());
    }
    let two = T::of(2.0);
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let original = *model.param_mut(i).expect("index in range");
        *model.param_mut(i).expect("index in range") = original + h;
        let plus = loss_fn(model, batch)?.0;
        *model.param_mut(i).expect("index in range") = original - h;
        let minus = loss_fn(model, batch)?.0;
        *model.param_mut(i).expect("index in range") = original;
        let numeric = (plus - minus) / (two * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Same check for a function of several tensors, differentiating with
/// respect to every entry of every input.
pub fn tensors_gradcheck<T, F>(inputs: &[Tensor<T>], f: F, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)>,
{
    if !(h > T::zero()) {
        return invalid("tensors_gradcheck", "step must be positive");
    }
    let (_, grads) = f(inputs)?;
    if grads.len() != inputs.len() {
        return shape_err("tensors_gradcheck", inputs.len(), grads.len());
    }
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    let two = T::of(2.0);
    let mut worst = T::zero();
    for (t, grad) in grads.iter().enumerate() {
        if grad.shape() != inputs[t].shape() {
            return shape_err("tensors_gradcheck", inputs[t].shape(), grad.shape());
        }
        for i in 0..inputs[t].len() {
            let original = inputs[t].data()[i];
            probe[t].data_mut()[i] = original + h;
            let plus = f(&probe)?.0;
            probe[t].data_mut()[i] = original - h;
            let minus = f(&probe)?.0;
            probe[t].data_mut()[i] = original;
            let numeric = (plus - minus) / (two * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Single-tensor convenience wrapper around [`tensors_gradcheck`].
pub fn tensor_gradcheck<T, F>(input: &Tensor<T>, f: F, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    tensors_gradcheck(
        std::slice::from_ref(input),
        |xs| {
            let (l, g) = f(&xs[0])?;
            Ok((l, vec![g]))
        },
        h,
    )
}
