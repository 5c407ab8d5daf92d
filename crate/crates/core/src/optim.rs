//! SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::layers::{LayerState, ParamGrads};
use crate::scalar::Scalar;

/// Optimizer hyper-parameters (learning rate is supplied per step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v ← momentum·v + g + weight_decay·p`, then `p ← p − lr·v`.
///
/// Decay is applied to weights and biases alike.
pub fn sgd_step<T: Scalar>(
    layer: &mut LayerState<T>,
    grads: &ParamGrads<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if grads.weight.shape() != layer.weight.shape() {
        return shape_err("sgd_step", layer.weight.shape(), grads.weight.shape());
    }
    if grads.bias.shape() != layer.bias.shape() {
        return shape_err("sgd_step", layer.bias.shape(), grads.bias.shape());
    }
    update(
        layer.weight.data_mut(),
        layer.weight_velocity.data_mut(),
        grads.weight.data(),
        lr,
        momentum,
        weight_decay,
    );
    update(
        layer.bias.data_mut(),
        layer.bias_velocity.data_mut(),
        grads.bias.data(),
        lr,
        momentum,
        weight_decay,
    );
    Ok(())
}

fn update<T: Scalar>(params: &mut [T], velocity: &mut [T], grad: &[T], lr: T, momentum: T, wd: T) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use crate::tensor::Tensor;

    fn layer() -> LayerState<f64> {
        let mut l = LayerState::zeros(LayerKind::Dense {
            in_features: 2,
            out_features: 1,
        });
        l.weight = Tensor::from_vec(&[1, 2], vec![0.3, -1.7]).unwrap();
        l.bias = Tensor::from_vec(&[1], vec![0.9]).unwrap();
        l
    }

    fn grads(g: [f64; 3]) -> ParamGrads<f64> {
        ParamGrads {
            weight: Tensor::from_vec(&[1, 2], vec![g[0], g[1]]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![g[2]]).unwrap(),
        }
    }

    #[test]
    fn zero_lr_keeps_params_bitwise() {
        let mut l = layer();
        let before = l.clone();
        sgd_step(&mut l, &grads([1.0, 2.0, 3.0]), 0.0, 0.9, 5e-4).unwrap();
        assert_eq!(l.weight, before.weight);
        assert_eq!(l.bias, before.bias);
        assert_ne!(l.weight_velocity, before.weight_velocity);
    }

    #[test]
    fn pure_decay() {
        let mut l = layer();
        let (lr, wd) = (0.1, 0.01);
        sgd_step(&mut l, &grads([0.0; 3]), lr, 0.9, wd).unwrap();
        for (a, b) in l.weight.data().iter().zip(layer().weight.data()) {
            assert!((a - b * (1.0 - lr * wd)).abs() < 1e-15);
        }
        assert!((l.bias.data()[0] - 0.9 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut l = layer();
        let g = grads([0.5, -2.0, 1.0]);
        sgd_step(&mut l, &g, 0.01, 0.9, 0.0).unwrap();
        sgd_step(&mut l, &g, 0.01, 0.9, 0.0).unwrap();
        for (v, gi) in l.weight_velocity.data().iter().zip(g.weight.data()) {
            assert!((v - 1.9 * gi).abs() < 1e-15);
        }
        assert!((l.bias_velocity.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut l = layer();
        let bad = ParamGrads {
            weight: Tensor::zeros(&[2, 1]),
            bias: Tensor::zeros(&[1]),
        };
        assert!(sgd_step(&mut l, &bad, 0.1, 0.9, 0.0).is_err());
    }
}
