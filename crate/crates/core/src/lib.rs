//! Numeric core for compute-efficient knowledge distillation with
//! uncertainty-aware mixup.
//!
//! The engine is generic over [`Scalar`] (`f32`, `f64`); cost algebra is
//! generic over [`CostScalar`], which also covers exact rationals. The
//! aliases below fix the precision used by the experiment harness.

pub mod cost;
pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod uncertainty;

pub use cost::{CostLedger, CostModel, IterationCharges, PassKind};
pub use error::{CoreError, Result};
pub use layers::{LayerKind, LayerState, ParamGrads};
pub use losses::LossConfig;
pub use mixup::{MixupPlan, UnixConfig};
pub use model::{build_model, flop_count, FlopProfile, LayerSpec, Model, ModelSpec};
pub use scalar::{CostScalar, Scalar};
pub use tensor::Tensor;
pub use uncertainty::{Criterion, UncertaintyScores};

/// Exact rational used for reproducing published cost percentages.
pub type Exact = num_rational::Ratio<i64>;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type LayerState64 = LayerState<f64>;
pub type MixupPlan64 = MixupPlan<f64>;
pub type UnixConfig64 = UnixConfig<f64>;
pub type UncertaintyScores64 = UncertaintyScores<f64>;
pub type CostModel64 = CostModel<f64>;
pub type ExactCostModel = CostModel<Exact>;
