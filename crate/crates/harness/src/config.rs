//! JSON run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unixkd_core::mixup::{CorrectionMode, LambdaMode, Selection};
use unixkd_core::{Criterion, IterationCharges, LossConfig, ModelSpec, UnixConfig};

use crate::error::{HarnessError, Result};

/// Training procedure of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kd,
    RandomKd,
    Unixkd,
    UncertaintyOnly,
    MixupOnly,
    NonadaptiveMixup,
    Scratch,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Kd,
        Method::RandomKd,
        Method::Unixkd,
        Method::UncertaintyOnly,
        Method::MixupOnly,
        Method::NonadaptiveMixup,
        Method::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Kd => "kd",
            Method::RandomKd => "random_kd",
            Method::Unixkd => "unixkd",
            Method::UncertaintyOnly => "uncertainty_only",
            Method::MixupOnly => "mixup_only",
            Method::NonadaptiveMixup => "nonadaptive_mixup",
            Method::Scratch => "scratch",
        }
    }

    /// Whether the method ranks the batch by student uncertainty.
    pub fn scores_uncertainty(self) -> bool {
        matches!(self, Method::Unixkd | Method::UncertaintyOnly | Method::NonadaptiveMixup)
    }

    /// Whether the method goes through the mixup batch transform.
    pub fn uses_unix_batch(self) -> bool {
        self.scores_uncertainty() || self == Method::MixupOnly
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::Scratch
    }

    /// Samples through (teacher forward, student forward, student backward)
    /// per iteration.
    pub fn charges(self, n: u64, k: u64) -> IterationCharges {
        match self {
            Method::Kd => IterationCharges::kd(n),
            Method::RandomKd | Method::MixupOnly => IterationCharges::subset(k),
            Method::Unixkd | Method::UncertaintyOnly | Method::NonadaptiveMixup => IterationCharges::unix(n, k),
            Method::Scratch => IterationCharges::scratch(n),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown method {s:?}")))
    }
}

/// Step decay: `initial / factor^(#decay points ≤ epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

fn default_decay_factor() -> f64 {
    10.0
}

impl LrSchedule {
    pub fn constant(initial: f64) -> Self {
        Self {
            initial,
            decay_epochs: Vec::new(),
            decay_factor: default_decay_factor(),
        }
    }

    fn validate(&self, epochs: usize, what: &str) -> Result<()> {
        if !(self.initial > 0.0) || !self.initial.is_finite() {
            return Err(HarnessError::Config(format!("{what}: initial lr must be positive")));
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return Err(HarnessError::Config(format!("{what}: decay_factor must be positive")));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config(format!("{what}: decay epochs must be strictly increasing")));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= epochs) {
            return Err(HarnessError::Config(format!("{what}: decay epochs must be below epochs = {epochs}")));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-indexed). A decay point takes
/// effect at the start of the named epoch.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let decays = schedule.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    schedule.initial / schedule.decay_factor.powi(decays as i32)
}

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub ce: f64,
    #[serde(default)]
    pub kd: f64,
    #[serde(default)]
    pub at: f64,
    #[serde(default)]
    pub sp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 0.0,
            kd: 1.0,
            at: 0.0,
            sp: 0.0,
        }
    }
}

/// Settings for training the teacher from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr_schedule: LrSchedule {
                initial: 0.05,
                decay_epochs: vec![10],
                decay_factor: 10.0,
            },
            batch_size: default_batch(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            seed: 0,
        }
    }
}

fn default_batch() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_alpha() -> f64 {
    1.0
}
fn default_w() -> f64 {
    10.0
}
fn default_temperature() -> f64 {
    4.0
}
fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset root holding `train/` and `test/`; relative paths resolve
    /// against the config file's directory.
    pub dataset: PathBuf,
    pub teacher_spec: ModelSpec,
    pub student_spec: ModelSpec,
    /// Pretrained teacher parameters; skips teacher training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_params: Option<PathBuf>,
    /// Directory for cached trained teachers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_cache: Option<PathBuf>,
    #[serde(default)]
    pub teacher_training: TeacherTraining,
    pub method: Method,
    /// Only valid for methods that score uncertainty; defaults to entropy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_w")]
    pub w: f64,
    /// Sigmoid centre; defaults to `N / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Draw λ per rank position instead of once per batch.
    #[serde(default)]
    pub per_sample_lambda: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub tau_squared: bool,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub backward_multiplier: f64,
    /// Persist student penultimate features and teacher logits for analysis.
    #[serde(default)]
    pub record_features: bool,
    #[serde(default = "default_one")]
    pub scoring_temperature: f64,
}

/// Mixing parameters actually used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivePlan {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub selection: Option<Selection>,
    pub criterion: Option<Criterion>,
    pub correction: Option<CorrectionMode>,
    pub lambda: Option<LambdaMode>,
    pub alpha: Option<f64>,
    pub w: Option<f64>,
    pub b: Option<f64>,
    pub charges_per_iteration: IterationCharges,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = resolve(base, &cfg.dataset);
        cfg.teacher_params = cfg.teacher_params.map(|p| resolve(base, &p));
        cfg.teacher_cache = cfg.teacher_cache.map(|p| resolve(base, &p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n == 0 {
            return bad("N must be positive".into());
        }
        if self.k == 0 || self.k > self.n {
            return bad(format!("k = {} must be in [1, N = {}]", self.k, self.n));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        self.lr_schedule.validate(self.epochs, "lr_schedule")?;
        if self.teacher_params.is_none() && self.method.needs_teacher() {
            if self.teacher_training.epochs == 0 || self.teacher_training.batch_size == 0 {
                return bad("teacher_training needs positive epochs and batch_size".into());
            }
            self.teacher_training
                .lr_schedule
                .validate(self.teacher_training.epochs, "teacher_training.lr_schedule")?;
        }
        if let Some(c) = self.criterion {
            if !self.method.scores_uncertainty() {
                return bad(format!("method {} does not rank by uncertainty; criterion {c} is not applicable", self.method));
            }
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive".into());
        }
        if !(self.w > 0.0) || !self.w.is_finite() {
            return bad("w must be positive".into());
        }
        if self.b.is_some_and(|b| !b.is_finite()) {
            return bad("b must be finite".into());
        }
        if !(self.backward_multiplier >= 0.0) || !self.backward_multiplier.is_finite() {
            return bad("backward_multiplier must be non-negative".into());
        }
        if !(self.scoring_temperature > 0.0) {
            return bad("scoring_temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if self.method != Method::Scratch {
            self.loss_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        for (name, spec) in [("teacher_spec", &self.teacher_spec), ("student_spec", &self.student_spec)] {
            spec.resolve().map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
        }
        if self.teacher_spec.input_shape != self.student_spec.input_shape
            || self.teacher_spec.num_classes != self.student_spec.num_classes
        {
            return bad("teacher and student must share input_shape and num_classes".into());
        }
        Ok(())
    }

    /// Loss weights used while distilling. `scratch` always trains on
    /// cross-entropy alone.
    pub fn loss_config(&self) -> LossConfig {
        if self.method == Method::Scratch {
            return LossConfig {
                temperature: self.temperature,
                weight_ce: 1.0,
                weight_kd: 0.0,
                weight_at: 0.0,
                weight_sp: 0.0,
                tau_squared: self.tau_squared,
            };
        }
        LossConfig {
            temperature: self.temperature,
            weight_ce: self.loss_weights.ce,
            weight_kd: self.loss_weights.kd,
            weight_at: self.loss_weights.at,
            weight_sp: self.loss_weights.sp,
            tau_squared: self.tau_squared,
        }
    }

    /// Batch-transform settings for the mixup methods.
    pub fn unix_config(&self) -> Option<UnixConfig<f64>> {
        let (selection, correction, lambda) = match self.method {
            Method::Unixkd => (Selection::Uncertainty, CorrectionMode::Sigmoid, self.beta_mode()),
            Method::UncertaintyOnly => (Selection::Uncertainty, CorrectionMode::Sigmoid, LambdaMode::Zero),
            Method::NonadaptiveMixup => (Selection::Uncertainty, CorrectionMode::Constant, self.beta_mode()),
            Method::MixupOnly => (Selection::Random, CorrectionMode::Constant, self.beta_mode()),
            Method::Kd | Method::RandomKd | Method::Scratch => return None,
        };
        Some(UnixConfig {
            criterion: self.criterion.unwrap_or(Criterion::Entropy),
            alpha: self.alpha,
            w: self.w,
            b: self.b,
            k: self.k,
            selection,
            correction,
            lambda,
            scoring_temperature: self.scoring_temperature,
        })
    }

    fn beta_mode(&self) -> LambdaMode {
        if self.per_sample_lambda {
            LambdaMode::BetaPerSample
        } else {
            LambdaMode::Beta
        }
    }

    pub fn charges_per_iteration(&self) -> IterationCharges {
        self.method.charges(self.n as u64, self.k as u64)
    }

    pub fn effective_plan(&self) -> EffectivePlan {
        let u = self.unix_config();
        let k = match self.method {
            Method::Kd | Method::Scratch => self.n,
            _ => self.k,
        };
        EffectivePlan {
            method: self.method,
            n: self.n,
            k,
            selection: u.as_ref().map(|u| u.selection),
            criterion: u.as_ref().filter(|u| u.selection == Selection::Uncertainty).map(|u| u.criterion),
            correction: u.as_ref().map(|u| u.correction),
            lambda: u.as_ref().map(|u| u.lambda),
            alpha: u.as_ref().filter(|u| u.lambda != LambdaMode::Zero).map(|u| u.alpha),
            w: u.as_ref().filter(|u| u.correction == CorrectionMode::Sigmoid).map(|u| u.w),
            b: u.as_ref()
                .filter(|u| u.correction == CorrectionMode::Sigmoid)
                .map(|u| u.center(self.n)),
            charges_per_iteration: self.charges_per_iteration(),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn base() -> TrainConfig {
        presets::desk_config("data", Method::Unixkd, 0)
    }

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule {
            initial: 0.05,
            decay_epochs: vec![150, 180, 210],
            decay_factor: 10.0,
        };
        assert_eq!(lr_at(&s, 0), 0.05);
        assert_eq!(lr_at(&s, 149), 0.05);
        assert!((lr_at(&s, 200) - 0.0005).abs() < 1e-15);
        assert!((lr_at(&s, 150) - 0.005).abs() < 1e-15);
        assert!((lr_at(&s, 210) - 0.00005).abs() < 1e-18);
    }

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let cfg = base();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"N\":64"));
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(matches!(TrainConfig::from_json(&v.to_string()), Err(HarnessError::Config(_))));
    }

    #[test]
    fn validation_errors() {
        let mut c = base();
        c.k = 65;
        assert!(c.validate().is_err());
        let mut c = base();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = base();
        c.lr_schedule.decay_epochs = vec![5, 5];
        assert!(c.validate().is_err());
        let mut c = base();
        c.lr_schedule.decay_epochs = vec![30];
        assert!(c.validate().is_err());
        let mut c = base();
        c.method = Method::Kd;
        c.criterion = Some(Criterion::Margin);
        assert!(c.validate().is_err());
        c.method = Method::UncertaintyOnly;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn ablations_differ_only_in_plan_modes() {
        let plans: Vec<EffectivePlan> = [Method::Unixkd, Method::UncertaintyOnly, Method::NonadaptiveMixup]
            .into_iter()
            .map(|m| TrainConfig { method: m, ..base() }.effective_plan())
            .collect();
        assert_eq!(plans[0].lambda, Some(LambdaMode::Beta));
        assert_eq!(plans[1].lambda, Some(LambdaMode::Zero));
        assert_eq!(plans[2].correction, Some(CorrectionMode::Constant));
        for p in &plans {
            assert_eq!(p.selection, Some(Selection::Uncertainty));
            assert_eq!(p.charges_per_iteration, IterationCharges::unix(64, 48));
        }
        assert_eq!(plans[0].b, Some(32.0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("unix".parse::<Method>().is_err());
    }
}
