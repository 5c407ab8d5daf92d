//! Run reports and persisted parameters.

use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use unixkd_core::{build_model, IterationCharges, Model64, ModelSpec};

use crate::config::{EffectivePlan, TrainConfig};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_top5: Option<f64>,
    /// Ledger energy so far relative to the kd formula over the same
    /// iterations, in percent.
    pub cumulative_relative_cost: f64,
}

/// Per-sample FLOPs of the three passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub teacher_forward_flops: u64,
    pub student_forward_flops: u64,
    pub student_backward_flops: u64,
    pub backward_multiplier: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub path: PathBuf,
    pub train_samples: usize,
    pub test_samples: usize,
    pub num_classes: usize,
    pub train_digest: String,
    pub test_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub test_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub plan: EffectivePlan,
    pub dataset: DatasetSummary,
    pub cost_model: CostSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSummary>,
    pub iterations_per_epoch: usize,
    pub total_iterations: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_top5: Option<f64>,
    /// Samples actually charged to the ledger: `N_t`, `N_s1`, `N_s2`.
    pub ledger: IterationCharges,
    /// Closed-form totals for the method over the same iterations.
    pub expected_ledger: IterationCharges,
    /// Student forwards run only to record features; never charged.
    pub diagnostic_student_forward: u64,
    /// Ledger energy in FLOPs.
    pub energy_flops: u64,
    /// `N·(F_t + F_s + B_s)` per iteration, times iterations.
    pub kd_baseline_energy_flops: u64,
    pub relative_cost: f64,
    /// Percentage rounded half-up to two decimals.
    pub relative_cost_reported: String,
    pub seed: u64,
}

/// Wall-clock measurements, kept out of `report.json` so reports stay
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub teacher_seconds: f64,
    pub distillation_seconds: f64,
}

/// Two-decimal rendering of an exact percentage, rounding half-up.
pub fn format_percent(p: Ratio<i128>) -> String {
    let hundredths = (p * Ratio::from_integer(100) + Ratio::new(1, 2)).floor().to_integer();
    let sign = if hundredths < 0 { "-" } else { "" };
    let a = hundredths.abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn epochs_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("epoch,train_loss,test_acc,cumulative_relative_cost\n");
    for e in &report.epochs {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.test_top1, e.cumulative_relative_cost
        ));
    }
    s
}

/// Write `report.json` and `epochs.csv` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&dir.join("report.json"), &(json + "\n"))?;
    write_text(&dir.join("epochs.csv"), &epochs_csv(report))
}

pub fn read_report(dir: &Path) -> Result<ExperimentReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Analysis(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(json + "\n"))
}

/// Architecture plus flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

pub fn save_params(path: &Path, model: &Model64) -> Result<()> {
    write_json(
        path,
        &ParamsFile {
            spec: model.spec().clone(),
            params: model.params(),
        },
    )
}

/// Rebuild a model from a params file. When `expected` is given, the stored
/// spec must match it apart from the seed.
pub fn load_params(path: &Path, expected: Option<&ModelSpec>) -> Result<Model64> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let file: ParamsFile =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if let Some(spec) = expected {
        if spec.input_shape != file.spec.input_shape
            || spec.layers != file.spec.layers
            || spec.num_classes != file.spec.num_classes
        {
            return Err(HarnessError::Config(format!(
                "{}: stored architecture differs from the configured spec",
                path.display()
            )));
        }
    }
    let mut model = build_model::<f64>(&file.spec)?;
    model
        .set_params(&file.params)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    Ok(model)
}
