//! Declarative network specs, materialized models and FLOP profiles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, CoreError, Result};
use crate::layers::{LayerKind, LayerState, ParamGrads};
use crate::optim::sgd_step;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One entry of a [`ModelSpec`]; input widths are inferred from the
/// predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { out_features: usize },
    Conv3x3 { out_channels: usize },
    Relu,
    Avgpool2x2,
    Flatten,
}

/// Layer-list description of a classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[channels, height, width]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub seed: u64,
}

/// A layer resolved against its input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLayer {
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl ModelSpec {
    /// Check that consecutive shapes compose and the head emits
    /// `num_classes` logits.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if !(self.input_shape.len() == 1 || self.input_shape.len() == 3)
            || self.input_shape.iter().any(|&d| d == 0)
        {
            return invalid(
                "ModelSpec::resolve",
                format!("input shape {:?} must be [features] or [c, h, w] with positive dims", self.input_shape),
            );
        }
        if self.num_classes == 0 {
            return invalid("ModelSpec::resolve", "num_classes must be positive");
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, spec) in self.layers.iter().enumerate() {
            let fail = |reason: String| CoreError::Compose { index, reason };
            let (kind, next) = match *spec {
                LayerSpec::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(fail(format!("dense expects a flat input, got {shape:?}")));
                    }
                    if out_features == 0 {
                        return Err(fail("dense width must be positive".into()));
                    }
                    (
                        LayerKind::Dense {
                            in_features: shape[0],
                            out_features,
                        },
                        vec![out_features],
                    )
                }
                LayerSpec::Conv3x3 { out_channels } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("conv3x3 expects [c, h, w], got {shape:?}")));
                    }
                    if out_channels == 0 {
                        return Err(fail("conv3x3 channel count must be positive".into()));
                    }
                    (
                        LayerKind::Conv3x3 {
                            in_channels: shape[0],
                            out_channels,
                        },
                        vec![out_channels, shape[1], shape[2]],
                    )
                }
                LayerSpec::Relu => (LayerKind::Relu, shape.clone()),
                LayerSpec::Avgpool2x2 => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(fail(format!("avgpool2x2 expects [c, even h, even w], got {shape:?}")));
                    }
                    (LayerKind::Avgpool2x2, vec![shape[0], shape[1] / 2, shape[2] / 2])
                }
                LayerSpec::Flatten => (LayerKind::Flatten, vec![shape.iter().product()]),
            };
            out.push(ResolvedLayer {
                kind,
                input_shape: shape,
                output_shape: next.clone(),
            });
            shape = next;
        }
        if shape != [self.num_classes] {
            return Err(CoreError::Compose {
                index: self.layers.len().saturating_sub(1),
                reason: format!("network emits {shape:?}, expected [{}] logits", self.num_classes),
            });
        }
        Ok(out)
    }
}

/// Per-sample FLOPs of one forward and one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopProfile {
    pub forward_flops: u64,
    pub backward_flops: u64,
}

/// Count per-sample FLOPs: dense `2·in·out`, conv3x3 `2·9·c_in·c_out·h·w`,
/// elementwise and pooling layers free. Backward is `multiplier × forward`.
pub fn flop_count(spec: &ModelSpec, backward_multiplier: f64) -> Result<FlopProfile> {
    if !(backward_multiplier >= 0.0) || !backward_multiplier.is_finite() {
        return invalid("flop_count", "backward multiplier must be finite and non-negative");
    }
    let forward_flops = spec
        .resolve()?
        .iter()
        .map(|l| layer_flops(&l.kind, &l.input_shape))
        .sum::<u64>();
    Ok(FlopProfile {
        forward_flops,
        backward_flops: (forward_flops as f64 * backward_multiplier).round() as u64,
    })
}

fn layer_flops(kind: &LayerKind, input_shape: &[usize]) -> u64 {
    match *kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => 2 * (in_features * out_features) as u64,
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
        } => 2 * 9 * (in_channels * out_channels * input_shape[1] * input_shape[2]) as u64,
        _ => 0,
    }
}

/// Materialized network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<LayerState<T>>,
    resolved: Vec<ResolvedLayer>,
}

/// Logits plus optional feature taps.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    /// Post-activation conv maps, shallowest first. Empty unless requested.
    pub feature_maps: Vec<Tensor<T>>,
    /// `[batch, d]` input of the classifier head. `None` unless requested.
    pub penultimate: Option<Tensor<T>>,
}

/// All activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    activations: Vec<Tensor<T>>,
    feature_taps: Vec<usize>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn feature_maps(&self) -> Vec<&Tensor<T>> {
        self.feature_taps.iter().map(|&i| &self.activations[i]).collect()
    }

    /// Flattened classifier-head input, `[batch, d]`.
    pub fn penultimate(&self) -> Tensor<T> {
        let n = self.activations.len();
        let a = if n >= 2 { &self.activations[n - 2] } else { &self.activations[0] };
        let b = a.batch();
        let d = a.item_len();
        a.clone().reshape(&[b, d]).expect("same length")
    }
}

/// Gradients for every layer, `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ParamGrads<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Flattened in the same order as [`Model::params`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(g.bias.data());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|g| g.weight.all_finite() && g.bias.all_finite())
    }
}

/// Materialize a spec. Weights are uniform Glorot drawn from one ChaCha
/// stream per layer index; biases start at zero.
pub fn build_model<T: Scalar>(spec: &ModelSpec) -> Result<Model<T>> {
    let resolved = spec.resolve()?;
    let layers = resolved
        .iter()
        .enumerate()
        .map(|(i, r)| LayerState::glorot(r.kind, &mut rng::stream(spec.seed, i as u64)))
        .collect();
    Ok(Model {
        spec: spec.clone(),
        layers,
        resolved,
    })
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerState<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerState<T>] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            let mut expected = vec![x.batch()];
            expected.extend_from_slice(&self.spec.input_shape);
            return shape_err("model_forward", expected, x.shape());
        }
        Ok(())
    }

    /// Indices into the activation list of post-activation conv maps.
    fn feature_taps(&self) -> Vec<usize> {
        (1..self.layers.len())
            .filter(|&i| {
                matches!(self.layers[i].kind, LayerKind::Relu)
                    && matches!(self.layers[i - 1].kind, LayerKind::Conv3x3 { .. })
            })
            .map(|i| i + 1)
            .collect()
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        Ok(ForwardTrace {
            activations,
            feature_taps: self.feature_taps(),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, want_features: bool) -> Result<ForwardOutput<T>> {
        if !want_features {
            self.check_input(x)?;
            let mut a = x.clone();
            for layer in &self.layers {
                a = layer.forward(&a)?;
            }
            return Ok(ForwardOutput {
                logits: a,
                feature_maps: Vec::new(),
                penultimate: None,
            });
        }
        let trace = self.forward_trace(x)?;
        let penultimate = Some(trace.penultimate());
        let feature_maps = trace.feature_maps().into_iter().cloned().collect();
        let logits = trace.activations.last().cloned().expect("non-empty");
        Ok(ForwardOutput {
            logits,
            feature_maps,
            penultimate,
        })
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, false)?.logits)
    }

    /// Backpropagate `grad_logits`, adding optional gradients that arrive at
    /// the feature maps (same order as [`ForwardTrace::feature_maps`]) and at
    /// the penultimate vector.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
        feature_grads: &[Tensor<T>],
        penultimate_grad: Option<&Tensor<T>>,
    ) -> Result<Gradients<T>> {
        let n = self.layers.len();
        if grad_logits.shape() != trace.logits().shape() {
            return shape_err("Model::backward", trace.logits().shape(), grad_logits.shape());
        }
        if !feature_grads.is_empty() && feature_grads.len() != trace.feature_taps.len() {
            return shape_err("Model::backward", trace.feature_taps.len(), feature_grads.len());
        }
        let mut grads: Vec<Option<ParamGrads<T>>> = vec![None; n];
        let mut upstream = grad_logits.clone();
        for i in (0..n).rev() {
            // `upstream` is the gradient at activation i + 1.
            if let Some(pos) = trace.feature_taps.iter().position(|&a| a == i + 1) {
                if let Some(g) = feature_grads.get(pos) {
                    upstream.add_assign(g)?;
                }
            }
            if i + 1 == n - 1 {
                if let Some(g) = penultimate_grad {
                    let g = g.clone().reshape(upstream.shape())?;
                    upstream.add_assign(&g)?;
                }
            }
            let (gx, pg) = self.layers[i].backward(&trace.activations[i], &upstream)?;
            grads[i] = pg;
            upstream = gx;
        }
        Ok(Gradients { layers: grads })
    }

    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T, momentum: T, weight_decay: T) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return shape_err("Model::sgd_step", self.layers.len(), grads.layers.len());
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let Some(g) = g {
                sgd_step(layer, g, lr, momentum, weight_decay)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerState::param_count).sum()
    }

    /// All parameters, weights then bias, layer by layer.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers.iter().filter(|l| l.has_params()) {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Overwrite parameters from the layout produced by [`Model::params`].
    pub fn set_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return shape_err("Model::set_params", self.param_count(), flat.len());
        }
        let mut offset = 0;
        for l in self.layers.iter_mut().filter(|l| l.has_params()) {
            let nw = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Mutable access to the `index`-th scalar parameter.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for l in self.layers.iter_mut().filter(|l| l.has_params()) {
            if index < l.weight.len() {
                return l.weight.data_mut().get_mut(index);
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return l.bias.data_mut().get_mut(index);
            }
            index -= l.bias.len();
        }
        None
    }

    pub fn flops(&self, backward_multiplier: f64) -> Result<FlopProfile> {
        flop_count(&self.spec, backward_multiplier)
    }

    pub fn resolved(&self) -> &[ResolvedLayer] {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(input: usize, classes: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            input_shape: vec![input],
            layers: vec![LayerSpec::Dense { out_features: classes }],
            num_classes: classes,
            seed,
        }
    }

    pub(crate) fn small_cnn(seed: u64) -> ModelSpec {
        ModelSpec {
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Conv3x3 { out_channels: 2 },
                LayerSpec::Relu,
                LayerSpec::Avgpool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_features: 3 },
            ],
            num_classes: 3,
            seed,
        }
    }

    #[test]
    fn linear_classifier_builds() {
        let m = build_model::<f64>(&linear(4, 3, 1)).unwrap();
        assert_eq!(m.param_count(), 15);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = build_model::<f64>(&small_cnn(5)).unwrap();
        let b = build_model::<f64>(&small_cnn(5)).unwrap();
        let bits = |m: &Model<f64>| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = build_model::<f64>(&small_cnn(6)).unwrap();
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| *x != y));
    }

    #[test]
    fn composition_errors_name_first_bad_layer() {
        let mut spec = small_cnn(0);
        spec.layers.remove(3); // drop flatten: dense meets a 3-D map
        match build_model::<f64>(&spec) {
            Err(CoreError::Compose { index, .. }) => assert_eq!(index, 3),
            other => panic!("unexpected {other:?}"),
        }
        let mut spec = linear(4, 3, 0);
        spec.num_classes = 4;
        assert!(matches!(build_model::<f64>(&spec), Err(CoreError::Compose { index: 0, .. })));
        let spec = ModelSpec {
            input_shape: vec![1, 3, 3],
            layers: vec![LayerSpec::Avgpool2x2],
            num_classes: 1,
            seed: 0,
        };
        assert!(matches!(build_model::<f64>(&spec), Err(CoreError::Compose { index: 0, .. })));
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut m = build_model::<f64>(&linear(3, 3, 0)).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        eye.extend([0.0; 3]);
        m.set_params(&eye).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 0.9]]);
        assert_eq!(m.logits(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let m = build_model::<f64>(&small_cnn(3)).unwrap();
        let y = m.logits(&Tensor::zeros(&[2, 1, 4, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_hand_rolled_evaluation() {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense { out_features: 2 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_features: 2 },
            ],
            num_classes: 2,
            seed: 0,
        };
        let mut m = build_model::<f64>(&spec).unwrap();
        // W1 = [[1,-1],[2,0.5]], b1 = [0.1,-0.2], W2 = [[1,1],[-1,3]], b2 = [0,0.5]
        m.set_params(&[1.0, -1.0, 2.0, 0.5, 0.1, -0.2, 1.0, 1.0, -1.0, 3.0, 0.0, 0.5])
            .unwrap();
        let x = [0.3, 0.8];
        let h = [
            (1.0 * x[0] - 1.0 * x[1] + 0.1f64).max(0.0),
            (2.0 * x[0] + 0.5 * x[1] - 0.2f64).max(0.0),
        ];
        let expect = [h[0] + h[1], -h[0] + 3.0 * h[1] + 0.5];
        let y = m.logits(&Tensor::from_rows(&[x.to_vec()])).unwrap();
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn features_are_exposed() {
        let m = build_model::<f64>(&small_cnn(2)).unwrap();
        let out = m.forward(&Tensor::full(&[3, 1, 4, 4], 0.5), true).unwrap();
        assert_eq!(out.logits.shape(), &[3, 3]);
        assert_eq!(out.feature_maps.len(), 1);
        assert_eq!(out.feature_maps[0].shape(), &[3, 2, 4, 4]);
        assert_eq!(out.penultimate.unwrap().shape(), &[3, 5]);
        assert!(m.logits(&Tensor::zeros(&[1, 1, 4, 3])).is_err());
    }

    #[test]
    fn flop_counts() {
        let p = flop_count(&linear(10, 5, 0), 1.0).unwrap();
        assert_eq!(p.forward_flops, 100);
        assert_eq!(p.backward_flops, 100);
        let conv = ModelSpec {
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Conv3x3 { out_channels: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 3 },
            ],
            num_classes: 3,
            seed: 0,
        };
        assert_eq!(flop_count(&conv, 1.0).unwrap().forward_flops, 576 + 2 * 32 * 3);
        let empty = ModelSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Relu],
            num_classes: 4,
            seed: 0,
        };
        assert_eq!(flop_count(&empty, 1.0).unwrap().forward_flops, 0);
        assert_eq!(flop_count(&linear(10, 5, 0), 2.0).unwrap().backward_flops, 200);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = small_cnn(9);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"conv3x3\""));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let bad = json.replace("\"seed\"", "\"sed\"");
        assert!(serde_json::from_str::<ModelSpec>(&bad).is_err());
    }
}
