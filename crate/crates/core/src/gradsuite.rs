//! Finite-difference sweep over every layer and loss.

use rand::Rng;

use crate::error::Result;
use crate::functional::cross_entropy;
use crate::gradcheck::{finite_difference_gradcheck, tensor_gradcheck, tensors_gradcheck};
use crate::layers::{LayerKind, LayerState};
use crate::losses::{at_loss, combined_loss, kd_loss, sp_loss, LossConfig, LossParts};
use crate::model::{build_model, Gradients, LayerSpec, Model, ModelSpec};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_relative_error: f64,
}

impl CaseResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero so ReLU kinks sit outside the stencil.
fn off_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `L = Σ r ⊙ layer(x)`, differentiated w.r.t. the input and both parameters.
fn layer_case(kind: LayerKind, x: Tensor<f64>, seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream(seed, 1);
    let probe = LayerState::<f64>::glorot(kind, &mut rng);
    let out_shape = probe.forward(&x)?.shape().to_vec();
    let r = uniform(&mut rng, &out_shape, -1.0, 1.0);
    let mut inputs = vec![x];
    if probe.has_params() {
        let bias = uniform(&mut rng, probe.bias.shape(), -0.5, 0.5);
        inputs.push(probe.weight.clone());
        inputs.push(bias);
    }
    tensors_gradcheck(
        &inputs,
        |xs| {
            let layer = match kind {
                LayerKind::Dense { .. } => LayerState::dense(xs[1].clone(), xs[2].clone())?,
                LayerKind::Conv3x3 { .. } => LayerState::conv3x3(xs[1].clone(), xs[2].clone())?,
                _ => LayerState::zeros(kind),
            };
            let y = layer.forward(&xs[0])?;
            let (gx, pg) = layer.backward(&xs[0], &r)?;
            let mut grads = vec![gx];
            if let Some(pg) = pg {
                grads.push(pg.weight);
                grads.push(pg.bias);
            }
            Ok((dot(&r, &y), grads))
        },
        h,
    )
}

fn small_conv_spec(seed: u64, hidden: usize) -> ModelSpec {
    ModelSpec {
        input_shape: vec![1, 4, 4],
        layers: vec![
            LayerSpec::Conv3x3 { out_channels: hidden },
            LayerSpec::Relu,
            LayerSpec::Avgpool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 3 },
        ],
        num_classes: 3,
        seed,
    }
}

/// KD + AT + SP through a full student, exercising feature-gradient routing.
fn combined_model_case(seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream(seed, 2);
    let teacher = build_model::<f64>(&small_conv_spec(seed ^ 0x5a5a, 3))?;
    let mut student = build_model::<f64>(&small_conv_spec(seed, 2))?;
    let x = uniform(&mut rng, &[3, 1, 4, 4], 0.0, 1.0);
    let t = teacher.forward(&x, true)?;
    let cfg = LossConfig {
        weight_at: 10.0,
        weight_sp: 30.0,
        ..LossConfig::label_free()
    };
    let loss = |m: &Model<f64>, x: &Tensor<f64>| -> Result<(f64, Gradients<f64>)> {
        let trace = m.forward_trace(x)?;
        let maps: Vec<Tensor<f64>> = trace.feature_maps().into_iter().cloned().collect();
        let parts = LossParts {
            kd: Some(kd_loss(&t.logits, trace.logits(), cfg.temperature, cfg.tau_squared)?),
            at: Some(at_loss(&t.feature_maps, &maps)?),
            sp: Some(sp_loss(t.penultimate.as_ref().expect("requested"), &trace.penultimate())?),
            ce: None,
        };
        let c = combined_loss(&cfg, &parts)?;
        let g = m.backward(
            &trace,
            c.grad_logits.as_ref().expect("kd weight is positive"),
            &c.grad_feature_maps,
            c.grad_penultimate.as_ref(),
        )?;
        Ok((c.total, g))
    };
    finite_difference_gradcheck(&mut student, &x, loss, h)
}

fn model_ce_case(seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream(seed, 3);
    let mut m = build_model::<f64>(&small_conv_spec(seed, 2))?;
    let x = uniform(&mut rng, &[2, 1, 4, 4], 0.0, 1.0);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    finite_difference_gradcheck(
        &mut m,
        &(x, labels),
        |m, (x, y)| {
            let trace = m.forward_trace(x)?;
            let (l, g) = cross_entropy(trace.logits(), y)?;
            Ok((l, m.backward(&trace, &g, &[], None)?))
        },
        h,
    )
}

/// Run every check once per seed.
pub fn run_gradient_suite(seeds: impl IntoIterator<Item = u64>, h: f64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut rng = stream(seed, 0);
        let mut push = |name: &'static str, err: f64| {
            out.push(CaseResult {
                name,
                seed,
                max_relative_error: err,
            })
        };

        let dense = LayerKind::Dense {
            in_features: 5,
            out_features: 4,
        };
        push("dense", layer_case(dense, uniform(&mut rng, &[3, 5], -1.0, 1.0), seed, h)?);
        let conv = LayerKind::Conv3x3 {
            in_channels: 2,
            out_channels: 3,
        };
        push("conv3x3", layer_case(conv, uniform(&mut rng, &[2, 2, 4, 5], -1.0, 1.0), seed, h)?);
        push("relu", layer_case(LayerKind::Relu, off_zero(&mut rng, &[3, 7]), seed, h)?);
        push(
            "avgpool2x2",
            layer_case(LayerKind::Avgpool2x2, uniform(&mut rng, &[2, 2, 4, 6], -1.0, 1.0), seed, h)?,
        );
        push(
            "flatten",
            layer_case(LayerKind::Flatten, uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), seed, h)?,
        );

        let logits = uniform(&mut rng, &[4, 5], -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        push("cross_entropy", tensor_gradcheck(&logits, |z| cross_entropy(z, &labels), h)?);

        let teacher = uniform(&mut rng, &[4, 5], -3.0, 3.0);
        for (name, tau) in [("kd_tau1", 1.0), ("kd_tau4", 4.0)] {
            let err = tensor_gradcheck(
                &logits,
                |z| {
                    let l = kd_loss(&teacher, z, tau, true)?;
                    Ok((l.value, l.grad))
                },
                h,
            )?;
            push(name, err);
        }

        let ft = uniform(&mut rng, &[5, 6], -1.0, 1.0);
        let fs = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        push(
            "sp",
            tensor_gradcheck(
                &fs,
                |f| {
                    let l = sp_loss(&ft, f)?;
                    Ok((l.value, l.grad))
                },
                h,
            )?,
        );

        let teacher_maps = vec![
            uniform(&mut rng, &[3, 4, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[3, 5, 2, 2], -1.0, 1.0),
        ];
        let student_maps = vec![
            uniform(&mut rng, &[3, 2, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[3, 3, 2, 2], -1.0, 1.0),
        ];
        push(
            "at",
            tensors_gradcheck(
                &student_maps,
                |s| {
                    let l = at_loss(&teacher_maps, s)?;
                    Ok((l.value, l.grads))
                },
                h,
            )?,
        );

        push("model_cross_entropy", model_ce_case(seed, h)?);
        push("model_kd_at_sp", combined_model_case(seed, h)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        let results = run_gradient_suite(0..3, 1e-5).unwrap();
        assert_eq!(results.len(), 3 * 12);
        for r in &results {
            assert!(r.passed(1e-4), "{r:?}");
        }
    }
}
