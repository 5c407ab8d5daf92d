//! Fixed-vocabulary differentiable layers.
//!
//! Every layer exposes a forward map and its exact vector-Jacobian product.
//! Activations are laid out `[batch, features]` for dense layers and
//! `[batch, channels, height, width]` for spatial layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer kind together with the widths it was materialized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    Avgpool2x2,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv3x3 { .. } => "conv3x3",
            LayerKind::Relu => "relu",
            LayerKind::Avgpool2x2 => "avgpool2x2",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Weight and bias shapes; empty for parameterless kinds.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => Some((vec![out_channels, in_channels, 3, 3], vec![out_channels])),
            _ => None,
        }
    }

    /// Glorot fan sizes used for initialization.
    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => (in_features, out_features),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => (in_channels * 9, out_channels * 9),
            _ => (0, 0),
        }
    }
}

/// Gradients of a parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One materialized layer: kind, parameters and momentum buffers.
///
/// Velocity shapes always mirror parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub kind: LayerKind,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub weight_velocity: Tensor<T>,
    pub bias_velocity: Tensor<T>,
}

impl<T: Scalar> LayerState<T> {
    /// Zero-initialized layer.
    pub fn zeros(kind: LayerKind) -> Self {
        let (w, b) = kind.param_shapes().unwrap_or((vec![0], vec![0]));
        Self {
            kind,
            weight: Tensor::zeros(&w),
            bias: Tensor::zeros(&b),
            weight_velocity: Tensor::zeros(&w),
            bias_velocity: Tensor::zeros(&b),
        }
    }

    /// Uniform Glorot weights, zero biases.
    pub fn glorot<R: Rng>(kind: LayerKind, rng: &mut R) -> Self {
        let mut layer = Self::zeros(kind);
        let (fan_in, fan_out) = kind.fans();
        if fan_in + fan_out > 0 {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                let u: f64 = rng.random();
                *w = T::of((2.0 * u - 1.0) * limit);
            }
        }
        layer
    }

    /// Dense layer from explicit parameters.
    pub fn dense(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return shape_err("LayerState::dense", "[out, in] and [out]", (weight.shape(), bias.shape()));
        }
        let kind = LayerKind::Dense {
            in_features: weight.shape()[1],
            out_features: weight.shape()[0],
        };
        Ok(Self::with_params(kind, weight, bias))
    }

    /// Conv3x3 layer from explicit parameters.
    pub fn conv3x3(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 || bias.shape() != [s[0]] {
            return shape_err(
                "LayerState::conv3x3",
                "[out, in, 3, 3] and [out]",
                (weight.shape(), bias.shape()),
            );
        }
        let kind = LayerKind::Conv3x3 {
            in_channels: s[1],
            out_channels: s[0],
        };
        Ok(Self::with_params(kind, weight, bias))
    }

    fn with_params(kind: LayerKind, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        let weight_velocity = Tensor::zeros(weight.shape());
        let bias_velocity = Tensor::zeros(bias.shape());
        Self {
            kind,
            weight,
            bias,
            weight_velocity,
            bias_velocity,
        }
    }

    pub fn has_params(&self) -> bool {
        self.kind.param_shapes().is_some()
    }

    pub fn param_count(&self) -> usize {
        if self.has_params() {
            self.weight.len() + self.bias.len()
        } else {
            0
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.kind {
            LayerKind::Dense { .. } => dense_apply(self, x),
            LayerKind::Conv3x3 { .. } => conv3x3_apply(self, x),
            LayerKind::Relu => Ok(relu_apply(x)),
            LayerKind::Avgpool2x2 => avgpool2x2_apply(x),
            LayerKind::Flatten => flatten_apply(x),
        }
    }

    /// Vector-Jacobian product at input `x`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, Option<ParamGrads<T>>)> {
        match self.kind {
            LayerKind::Dense { .. } => {
                let (gx, g) = dense_grad(self, x, upstream)?;
                Ok((gx, Some(g)))
            }
            LayerKind::Conv3x3 { .. } => {
                let (gx, g) = conv3x3_grad(self, x, upstream)?;
                Ok((gx, Some(g)))
            }
            LayerKind::Relu => Ok((relu_grad(x, upstream)?, None)),
            LayerKind::Avgpool2x2 => Ok((avgpool2x2_grad(x, upstream)?, None)),
            LayerKind::Flatten => Ok((upstream.clone().reshape(x.shape())?, None)),
        }
    }
}

fn expect_rank(op: &'static str, x: &Tensor<impl Scalar>, rank: usize) -> Result<()> {
    if x.shape().len() != rank {
        return shape_err(op, format!("rank {rank}"), x.shape());
    }
    Ok(())
}

/// `y[b,o] = Σ_i W[o,i]·x[b,i] + bias[o]`.
pub fn dense_apply<T: Scalar>(layer: &LayerState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerKind::Dense {
        in_features,
        out_features,
    } = layer.kind
    else {
        return invalid("dense_apply", "layer is not dense");
    };
    expect_rank("dense_apply", x, 2)?;
    if x.shape()[1] != in_features {
        return shape_err("dense_apply", [x.batch(), in_features], x.shape());
    }
    let batch = x.batch();
    let w = layer.weight.data();
    let bias = layer.bias.data();
    let mut y = Tensor::zeros(&[batch, out_features]);
    for b in 0..batch {
        let xr = x.item(b);
        let yr = y.item_mut(b);
        for (o, out) in yr.iter_mut().enumerate() {
            let wr = &w[o * in_features..(o + 1) * in_features];
            let mut acc = bias[o];
            for (&wi, &xi) in wr.iter().zip(xr) {
                acc += wi * xi;
            }
            *out = acc;
        }
    }
    Ok(y)
}

pub fn dense_grad<T: Scalar>(
    layer: &LayerState<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, ParamGrads<T>)> {
    let LayerKind::Dense {
        in_features,
        out_features,
    } = layer.kind
    else {
        return invalid("dense_grad", "layer is not dense");
    };
    expect_rank("dense_grad", x, 2)?;
    let batch = x.batch();
    if x.shape()[1] != in_features {
        return shape_err("dense_grad", [batch, in_features], x.shape());
    }
    if upstream.shape() != [batch, out_features] {
        return shape_err("dense_grad", [batch, out_features], upstream.shape());
    }
    let w = layer.weight.data();
    let mut gx = Tensor::zeros(&[batch, in_features]);
    let mut gw = Tensor::zeros(&[out_features, in_features]);
    let mut gb = Tensor::zeros(&[out_features]);
    for b in 0..batch {
        let xr = x.item(b);
        let ur = upstream.item(b);
        for (o, &u) in ur.iter().enumerate() {
            gb.data_mut()[o] += u;
            let wr = &w[o * in_features..(o + 1) * in_features];
            let gwr = &mut gw.data_mut()[o * in_features..(o + 1) * in_features];
            for i in 0..in_features {
                gwr[i] += u * xr[i];
            }
            let gxr = gx.item_mut(b);
            for i in 0..in_features {
                gxr[i] += u * wr[i];
            }
        }
    }
    Ok((gx, ParamGrads { weight: gw, bias: gb }))
}

fn conv_dims(op: &'static str, layer: &LayerState<impl Scalar>, x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize, usize)> {
    let LayerKind::Conv3x3 {
        in_channels,
        out_channels,
    } = layer.kind
    else {
        return invalid(op, "layer is not conv3x3");
    };
    expect_rank(op, x, 4)?;
    let s = x.shape();
    if s[1] != in_channels {
        return shape_err(op, format!("{in_channels} input channels"), s);
    }
    if s[2] == 0 || s[3] == 0 {
        return invalid(op, "spatial dimensions must be at least 1");
    }
    Ok((s[0], in_channels, out_channels, s[2], s[3]))
}

/// Valid output range for a kernel offset `d ∈ {0,1,2}` with padding 1.
#[inline]
fn tap_range(d: usize, n: usize) -> std::ops::Range<usize> {
    match d {
        0 => 1..n,
        1 => 0..n,
        _ => 0..n.saturating_sub(1),
    }
}

/// Stride-1, zero-padding-1 cross-correlation plus per-channel bias.
pub fn conv3x3_apply<T: Scalar>(layer: &LayerState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, cin, cout, h, w) = conv_dims("conv3x3_apply", layer, x)?;
    let weight = layer.weight.data();
    let bias = layer.bias.data();
    let plane = h * w;
    let mut y = Tensor::zeros(&[batch, cout, h, w]);
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..batch {
        for o in 0..cout {
            let yp = &mut yd[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            yp.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..cin {
                let xp = &xd[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                let kern = &weight[(o * cin + c) * 9..(o * cin + c + 1) * 9];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let k = kern[dy * 3 + dx];
                        for i in tap_range(dy, h) {
                            let si = i + dy - 1;
                            for j in tap_range(dx, w) {
                                yp[i * w + j] += k * xp[si * w + j + dx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv3x3_grad<T: Scalar>(
    layer: &LayerState<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, ParamGrads<T>)> {
    let (batch, cin, cout, h, w) = conv_dims("conv3x3_grad", layer, x)?;
    if upstream.shape() != [batch, cout, h, w] {
        return shape_err("conv3x3_grad", [batch, cout, h, w], upstream.shape());
    }
    let weight = layer.weight.data();
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(layer.weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let xd = x.data();
    let ud = upstream.data();
    for b in 0..batch {
        for o in 0..cout {
            let up = &ud[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            gb.data_mut()[o] += up.iter().copied().sum::<T>();
            for c in 0..cin {
                let xp = &xd[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                let base = (o * cin + c) * 9;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let k = weight[base + dy * 3 + dx];
                        let mut acc = T::zero();
                        let gxp = &mut gx.data_mut()[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                        for i in tap_range(dy, h) {
                            let si = i + dy - 1;
                            for j in tap_range(dx, w) {
                                let u = up[i * w + j];
                                let src = si * w + j + dx - 1;
                                acc += u * xp[src];
                                gxp[src] += u * k;
                            }
                        }
                        gw.data_mut()[base + dy * 3 + dx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, ParamGrads { weight: gw, bias: gb }))
}

pub fn relu_apply<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_grad<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return shape_err("relu_grad", x.shape(), upstream.shape());
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xi, &u)| if xi > T::zero() { u } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn pool_dims(op: &'static str, x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    expect_rank(op, x, 4)?;
    let s = x.shape();
    if s[2] % 2 != 0 || s[3] % 2 != 0 || s[2] == 0 || s[3] == 0 {
        return shape_err(op, "even spatial dimensions", s);
    }
    Ok((s[0] * s[1], s[2], s[3], 0))
}

pub fn avgpool2x2_apply<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w, _) = pool_dims("avgpool2x2_apply", x)?;
    let (oh, ow) = (h / 2, w / 2);
    let s = x.shape();
    let mut y = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let quarter = T::of(0.25);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..planes {
        let xp = &xd[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                yd[p * oh * ow + i * ow + j] = (xp[r0] + xp[r0 + 1] + xp[r1] + xp[r1 + 1]) * quarter;
            }
        }
    }
    Ok(y)
}

pub fn avgpool2x2_grad<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w, _) = pool_dims("avgpool2x2_grad", x)?;
    let (oh, ow) = (h / 2, w / 2);
    let s = x.shape();
    if upstream.shape() != [s[0], s[1], oh, ow] {
        return shape_err("avgpool2x2_grad", [s[0], s[1], oh, ow], upstream.shape());
    }
    let quarter = T::of(0.25);
    let mut gx = Tensor::zeros(s);
    let ud = upstream.data();
    let gd = gx.data_mut();
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let g = ud[p * oh * ow + i * ow + j] * quarter;
                let r0 = p * h * w + 2 * i * w + 2 * j;
                gd[r0] = g;
                gd[r0 + 1] = g;
                gd[r0 + w] = g;
                gd[r0 + w + 1] = g;
            }
        }
    }
    Ok(gx)
}

pub fn flatten_apply<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().is_empty() {
        return shape_err("flatten_apply", "rank >= 1", x.shape());
    }
    let b = x.batch();
    let n = x.item_len();
    x.clone().reshape(&[b, n])
}
