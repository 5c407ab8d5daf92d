//! Distillation objectives: softened-logit KL, attention transfer and
//! similarity-preserving losses, and their weighted combination.
//!
//! Teacher inputs are constants throughout; every gradient returned here is
//! with respect to the student side only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::functional::{log_softmax, softmax};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

/// A scalar loss and its gradient with respect to one student tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// A scalar loss and its gradients with respect to several student maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapLossValue<T> {
    pub value: T,
    pub grads: Vec<Tensor<T>>,
}

/// `τ²·mean_b KL(softmax(z_t/τ) ‖ softmax(z_s/τ))`; the `τ²` factor is
/// dropped when `tau_squared` is false.
pub fn kd_loss<T: Scalar>(
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
    temperature: T,
    tau_squared: bool,
) -> Result<LossValue<T>> {
    if teacher_logits.shape() != student_logits.shape() {
        return shape_err("kd_loss", teacher_logits.shape(), student_logits.shape());
    }
    let pt = softmax(teacher_logits, temperature)?;
    let log_ps = log_softmax(student_logits, temperature)?;
    let batch = student_logits.batch();
    let scale = if tau_squared { temperature * temperature } else { T::one() };
    let n = T::of(batch.max(1) as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(student_logits.shape());
    let gscale = scale / (temperature * n);
    for b in 0..batch {
        let (p, lq) = (pt.item(b), log_ps.item(b));
        for (&pi, &lqi) in p.iter().zip(lq) {
            if pi > T::zero() {
                total += pi * (pi.ln() - lqi);
            }
        }
        for ((g, &pi), &lqi) in grad.item_mut(b).iter_mut().zip(p).zip(lq) {
            *g = gscale * (lqi.exp() - pi);
        }
    }
    Ok(LossValue {
        value: scale * total / n,
        grad,
    })
}

fn row_normalized_gram<T: Scalar>(f: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let b = f.batch();
    let mut gram = vec![T::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            gram[i * b + j] = f.item(i).iter().zip(f.item(j)).map(|(&x, &y)| x * y).sum();
        }
    }
    let norms: Vec<T> = (0..b)
        .map(|i| gram[i * b..(i + 1) * b].iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    let mut normed = gram.clone();
    for i in 0..b {
        let n = norms[i].max(T::of(NORM_EPS));
        normed[i * b..(i + 1) * b].iter_mut().for_each(|v| *v /= n);
    }
    (gram, normed, norms)
}

fn as_matrix<T: Scalar>(op: &'static str, f: &Tensor<T>) -> Result<Tensor<T>> {
    if f.shape().len() < 2 {
        return shape_err(op, "[batch, features...]", f.shape());
    }
    f.clone().reshape(&[f.batch(), f.item_len()])
}

/// Similarity-preserving loss: `‖Ĝ_t − Ĝ_s‖²_F / b²` where `Ĝ` is the
/// row-L2-normalized batch Gram matrix `f·fᵀ`.
pub fn sp_loss<T: Scalar>(teacher_features: &Tensor<T>, student_features: &Tensor<T>) -> Result<LossValue<T>> {
    let ft = as_matrix("sp_loss", teacher_features)?;
    let fs = as_matrix("sp_loss", student_features)?;
    let b = fs.batch();
    if ft.batch() != b {
        return shape_err("sp_loss", ft.batch(), b);
    }
    if b < 2 {
        return invalid("sp_loss", "batch of at least 2 required");
    }
    let (_, gt, _) = row_normalized_gram(&ft);
    let (_, gs, norms) = row_normalized_gram(&fs);
    let bb = T::of((b * b) as f64);
    let value = gt.iter().zip(&gs).map(|(&t, &s)| (t - s) * (t - s)).sum::<T>() / bb;

    // dL/dĜ_s, then back through the row normalization.
    let two = T::of(2.0);
    let mut g_gram = vec![T::zero(); b * b];
    for i in 0..b {
        if norms[i] < T::of(NORM_EPS) {
            continue;
        }
        let row = i * b..(i + 1) * b;
        let g_hat: Vec<T> = gs[row.clone()].iter().zip(&gt[row.clone()]).map(|(&s, &t)| two * (s - t) / bb).collect();
        let dot: T = g_hat.iter().zip(&gs[row.clone()]).map(|(&g, &s)| g * s).sum();
        for j in 0..b {
            g_gram[i * b + j] = (g_hat[j] - gs[i * b + j] * dot) / norms[i];
        }
    }
    // G = F·Fᵀ  ⇒  dF = (dG + dGᵀ)·F
    let d = fs.item_len();
    let mut grad = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let gi = grad.item_mut(i);
        for j in 0..b {
            let coef = g_gram[i * b + j] + g_gram[j * b + i];
            if coef != T::zero() {
                for (g, &x) in gi.iter_mut().zip(fs.item(j)) {
                    *g += coef * x;
                }
            }
        }
    }
    Ok(LossValue {
        value,
        grad: grad.reshape(student_features.shape())?,
    })
}

/// Spatial attention of one sample: channel sum of squares, L2-normalized.
/// Returns `(normalized, raw_norm)`.
fn attention<T: Scalar>(x: &[T], channels: usize, plane: usize) -> (Vec<T>, T) {
    let mut a = vec![T::zero(); plane];
    for c in 0..channels {
        for (ai, &v) in a.iter_mut().zip(&x[c * plane..(c + 1) * plane]) {
            *ai += v * v;
        }
    }
    let norm = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm >= T::of(NORM_EPS) {
        a.iter_mut().for_each(|v| *v /= norm);
    } else {
        a.iter_mut().for_each(|v| *v = T::zero());
    }
    (a, norm)
}

/// Attention-transfer loss: for each `(teacher, student)` map pair and each
/// sample, `‖â_t − â_s‖₂` with `â = normalize(Σ_c x²)`; summed over pairs and
/// averaged over the batch.
pub fn at_loss<T: Scalar>(teacher_maps: &[Tensor<T>], student_maps: &[Tensor<T>]) -> Result<MapLossValue<T>> {
    if teacher_maps.len() != student_maps.len() {
        return shape_err("at_loss", teacher_maps.len(), student_maps.len());
    }
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(student_maps.len());
    for (t, s) in teacher_maps.iter().zip(student_maps) {
        let (ts, ss) = (t.shape(), s.shape());
        if ts.len() != 4 || ss.len() != 4 || ts[0] != ss[0] || ts[2..] != ss[2..] {
            return shape_err("at_loss", ts, ss);
        }
        let batch = ss[0];
        let plane = ss[2] * ss[3];
        let n = T::of(batch.max(1) as f64);
        let mut grad = Tensor::zeros(ss);
        for b in 0..batch {
            let (at, _) = attention(t.item(b), ts[1], plane);
            let (as_, norm) = attention(s.item(b), ss[1], plane);
            let diff: Vec<T> = as_.iter().zip(&at).map(|(&x, &y)| x - y).collect();
            let dist = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
            value += dist / n;
            if dist <= T::zero() || norm < T::of(NORM_EPS) {
                continue;
            }
            let g_hat: Vec<T> = diff.iter().map(|&v| v / (dist * n)).collect();
            let dot: T = g_hat.iter().zip(&as_).map(|(&g, &a)| g * a).sum();
            let g_att: Vec<T> = g_hat.iter().zip(&as_).map(|(&g, &a)| (g - a * dot) / norm).collect();
            let two = T::of(2.0);
            let x = s.item(b);
            let gx = grad.item_mut(b);
            for c in 0..ss[1] {
                for p in 0..plane {
                    gx[c * plane + p] = two * x[c * plane + p] * g_att[p];
                }
            }
        }
        grads.push(grad);
    }
    Ok(MapLossValue { value, grads })
}

/// Pair each student map with the deepest teacher map of the same spatial
/// size. Returns teacher indices, one per student map.
pub fn pair_by_spatial_size<T: Scalar>(teacher_maps: &[Tensor<T>], student_maps: &[Tensor<T>]) -> Result<Vec<usize>> {
    student_maps
        .iter()
        .map(|s| {
            teacher_maps
                .iter()
                .rposition(|t| t.shape().len() == 4 && s.shape().len() == 4 && t.shape()[2..] == s.shape()[2..])
                .ok_or_else(|| crate::CoreError::Shape {
                    op: "pair_by_spatial_size",
                    expected: "a teacher map with matching spatial size".into(),
                    got: format!("{:?}", s.shape()),
                })
        })
        .collect()
}

/// Loss weights and KD temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub weight_ce: f64,
    pub weight_kd: f64,
    #[serde(default)]
    pub weight_at: f64,
    #[serde(default)]
    pub weight_sp: f64,
    #[serde(default = "default_true")]
    pub tau_squared: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::label_free()
    }
}

impl LossConfig {
    /// Pure KD at `τ = 4`, no hard-label term.
    pub fn label_free() -> Self {
        Self {
            temperature: 4.0,
            weight_ce: 0.0,
            weight_kd: 1.0,
            weight_at: 0.0,
            weight_sp: 0.0,
            tau_squared: true,
        }
    }

    /// `0.1·CE + 0.9·KD`.
    pub fn label_based() -> Self {
        Self {
            weight_ce: 0.1,
            weight_kd: 0.9,
            ..Self::label_free()
        }
    }

    /// `CE + 0.9·KD`, the large-dataset variant.
    pub fn label_based_full_ce() -> Self {
        Self {
            weight_ce: 1.0,
            weight_kd: 0.9,
            ..Self::label_free()
        }
    }

    /// `KD + 1000·AT`.
    pub fn with_attention() -> Self {
        Self {
            weight_at: 1000.0,
            ..Self::label_free()
        }
    }

    /// `KD + 3000·SP`.
    pub fn with_similarity() -> Self {
        Self {
            weight_sp: 3000.0,
            ..Self::label_free()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return invalid("LossConfig", "temperature must be positive");
        }
        let w = [self.weight_ce, self.weight_kd, self.weight_at, self.weight_sp];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return invalid("LossConfig", "weights must be finite and non-negative");
        }
        if !w.iter().any(|&v| v > 0.0) {
            return invalid("LossConfig", "at least one weight must be positive");
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.weight_kd > 0.0 || self.weight_at > 0.0 || self.weight_sp > 0.0
    }

    pub fn needs_features(&self) -> bool {
        self.weight_at > 0.0 || self.weight_sp > 0.0
    }
}

/// Individually computed loss terms.
#[derive(Debug, Clone, Default)]
pub struct LossParts<T> {
    pub ce: Option<LossValue<T>>,
    pub kd: Option<LossValue<T>>,
    pub at: Option<MapLossValue<T>>,
    pub sp: Option<LossValue<T>>,
}

/// Weighted total with gradients routed to where each term attaches.
#[derive(Debug, Clone)]
pub struct CombinedLoss<T> {
    pub total: T,
    pub grad_logits: Option<Tensor<T>>,
    pub grad_feature_maps: Vec<Tensor<T>>,
    pub grad_penultimate: Option<Tensor<T>>,
}

/// `w_ce·CE + w_kd·KD + w_at·AT + w_sp·SP`. A part with a positive weight
/// must be present; parts with zero weight are ignored.
pub fn combined_loss<T: Scalar>(cfg: &LossConfig, parts: &LossParts<T>) -> Result<CombinedLoss<T>> {
    fn need<'a, P>(w: f64, part: &'a Option<P>, name: &str) -> Result<Option<&'a P>> {
        if w > 0.0 {
            match part {
                Some(p) => Ok(Some(p)),
                None => invalid("combined_loss", format!("{name} has weight {w} but was not computed")),
            }
        } else {
            Ok(None)
        }
    }
    let mut total = T::zero();
    let mut grad_logits: Option<Tensor<T>> = None;
    for (w, part, name) in [(cfg.weight_ce, &parts.ce, "ce"), (cfg.weight_kd, &parts.kd, "kd")] {
        if let Some(p) = need(w, part, name)? {
            let w = T::of(w);
            total += w * p.value;
            let g = p.grad.scale(w);
            match grad_logits.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => grad_logits = Some(g),
            }
        }
    }
    let mut grad_feature_maps = Vec::new();
    if let Some(p) = need(cfg.weight_at, &parts.at, "at")? {
        let w = T::of(cfg.weight_at);
        total += w * p.value;
        grad_feature_maps = p.grads.iter().map(|g| g.scale(w)).collect();
    }
    let mut grad_penultimate = None;
    if let Some(p) = need(cfg.weight_sp, &parts.sp, "sp")? {
        let w = T::of(cfg.weight_sp);
        total += w * p.value;
        grad_penultimate = Some(p.grad.scale(w));
    }
    Ok(CombinedLoss {
        total,
        grad_logits,
        grad_feature_maps,
        grad_penultimate,
    })
}
