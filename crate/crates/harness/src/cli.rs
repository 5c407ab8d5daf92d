//! Implementations behind the CLI subcommands.

use std::path::Path;

use num_rational::Ratio;
use serde::Serialize;
use unixkd_core::cost::{kd_iteration_cost, parse_decimal, random_iteration_cost, relative_cost, unix_iteration_cost};
use unixkd_core::gradsuite::{run_gradient_suite, CaseResult};
use unixkd_core::CostModel;

use crate::analysis::{analyze_run, Analysis};
use crate::config::TrainConfig;
use crate::dataset::{load_dataset, write_synthetic, DatasetMeta, SyntheticSpec};
use crate::error::{HarnessError, Result};
use crate::report::{emit_report, format_percent, save_params, write_json, ExperimentReport, Timing};
use crate::train::{obtain_teacher, run_distillation};

/// Which closed-form cost to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CostMethod {
    /// `kF_t + (N+k)F_s + kB_s`.
    Unix,
    /// `k(F_t + F_s + B_s)`.
    Random,
    /// `N(F_t + F_s + B_s)`.
    Kd,
}

/// Relative cost in percent, exact, against the kd formula. `ratio` and
/// `backward_mult` are decimal strings.
pub fn cost_percent(n: u64, k: u64, ratio: &str, backward_mult: &str, method: CostMethod) -> Result<Ratio<i128>> {
    let ratio: Ratio<i128> = parse_decimal(ratio).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mult: Ratio<i128> = parse_decimal(backward_mult).map_err(|e| HarnessError::Config(e.to_string()))?;
    let model = CostModel::from_ratio(ratio, mult).map_err(|e| HarnessError::Config(e.to_string()))?;
    let method_cost = match method {
        CostMethod::Unix => unix_iteration_cost(&model, n, k),
        CostMethod::Random => random_iteration_cost(&model, n, k),
        CostMethod::Kd => Ok(kd_iteration_cost(&model, n)),
    }
    .map_err(|e| HarnessError::Config(e.to_string()))?;
    relative_cost(method_cost, kd_iteration_cost(&model, n)).map_err(|e| HarnessError::Config(e.to_string()))
}

pub fn cost_command(n: u64, k: u64, ratio: &str, backward_mult: &str, method: CostMethod) -> Result<String> {
    Ok(format!("{}%", format_percent(cost_percent(n, k, ratio, backward_mult, method)?)))
}

/// Load the config and data, obtain a teacher when the method needs one,
/// distil, and write every run artifact into `out`.
pub fn train_command(config: &Path, out: &Path) -> Result<ExperimentReport> {
    let cfg = TrainConfig::load(config)?;
    let data = load_dataset(&cfg.dataset)?;
    let teacher = if cfg.method.needs_teacher() {
        Some(obtain_teacher(&cfg, &data)?)
    } else {
        None
    };
    let run = run_distillation(&cfg, &data, teacher.as_ref())?;
    emit_report(&run.report, out)?;
    write_json(
        &out.join("timing.json"),
        &Timing {
            teacher_seconds: teacher.as_ref().map_or(0.0, |t| t.seconds),
            distillation_seconds: run.seconds,
        },
    )?;
    save_params(&out.join("student.json"), &run.student)?;
    if let Some(t) = &teacher {
        save_params(&out.join("teacher.json"), &t.model)?;
    }
    run.trace.write_jsonl(&out.join("selection.jsonl"))?;
    if let Some(rec) = &run.recordings {
        let meta = rec.meta(cfg.n, run.report.plan.k, data.train.num_classes());
        rec.write(out, &meta)?;
    }
    Ok(run.report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherReport {
    pub spec: unixkd_core::ModelSpec,
    pub train_digest: String,
    pub test_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_top5: Option<f64>,
    pub forward_flops: u64,
}

/// Train (or fetch from cache) the configured teacher and save it.
pub fn teacher_command(config: &Path, out: &Path) -> Result<TeacherReport> {
    let cfg = TrainConfig::load(config)?;
    let data = load_dataset(&cfg.dataset)?;
    let t = obtain_teacher(&cfg, &data)?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    save_params(&out.join("teacher.json"), &t.model)?;
    let report = TeacherReport {
        spec: cfg.teacher_spec.clone(),
        train_digest: data.train.meta.digest.clone(),
        test_top1: t.accuracy.top1,
        test_top5: t.accuracy.top5,
        forward_flops: unixkd_core::flop_count(&cfg.teacher_spec, 1.0)?.forward_flops,
    };
    write_json(&out.join("teacher_report.json"), &report)?;
    Ok(report)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Run the finite-difference suite; failing cases become an acceptance error.
pub fn gradcheck_command(seeds: u64) -> Result<Vec<CaseResult>> {
    let results = run_gradient_suite(0..seeds, GRADCHECK_STEP)?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed(GRADCHECK_TOLERANCE))
        .map(|r| format!("{} (seed {}): {:.3e}", r.name, r.seed, r.max_relative_error))
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(HarnessError::Acceptance(format!("gradient checks failed: {}", failed.join("; "))))
    }
}

pub fn analyze_command(run: &Path, out: Option<&Path>) -> Result<Analysis> {
    analyze_run(run, out.unwrap_or(run))
}

pub fn gen_data_command(out: &Path, spec: &SyntheticSpec) -> Result<(DatasetMeta, DatasetMeta)> {
    write_synthetic(out, spec)
}
