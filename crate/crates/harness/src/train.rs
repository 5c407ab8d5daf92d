//! Teacher training, distillation runs and evaluation.

use std::path::PathBuf;
use std::time::Instant;

use num_rational::Ratio;
use rand::seq::{index, SliceRandom};
use sha2::{Digest, Sha256};
use unixkd_core::cost::{cost_model_from, kd_iteration_cost, relative_cost};
use unixkd_core::functional::{argmax, cross_entropy};
use unixkd_core::losses::{at_loss, combined_loss, kd_loss, pair_by_spatial_size, sp_loss, LossParts};
use unixkd_core::mixup::unix_batch;
use unixkd_core::rng::stream;
use unixkd_core::{build_model, CostLedger, CostModel, LossConfig, Model64, PassKind, Tensor64};

use crate::config::{lr_at, Method, TrainConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::report::{
    format_percent, load_params, save_params, CostSummary, DatasetSummary, EpochRecord, ExperimentReport,
    TeacherSummary,
};
use crate::trace::{IterationRecord, Recordings, SamplingTrace};

const ORDER_STREAM: u64 = 1;
const MIX_STREAM: u64 = 2;
const EVAL_CHUNK: usize = 500;

type Exact128 = Ratio<i128>;

/// Top-1 and (for at least five classes) top-5 accuracy in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: Option<f64>,
}

/// Position of `label` when classes are sorted by descending logit with
/// ties going to the lower index.
fn label_rank(row: &[f64], label: usize) -> usize {
    let z = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Per-sample correctness flags (top-1, top-5).
pub fn correctness(logits: &Tensor64, labels: &[usize]) -> Vec<(bool, bool)> {
    (0..labels.len())
        .map(|i| {
            let row = logits.row(i);
            (argmax(row) == labels[i], label_rank(row, labels[i]) < 5)
        })
        .collect()
}

pub fn accuracy_from_logits(logits: &Tensor64, labels: &[usize]) -> Accuracy {
    let flags = correctness(logits, labels);
    let n = flags.len().max(1) as f64;
    let top1 = 100.0 * flags.iter().filter(|f| f.0).count() as f64 / n;
    let top5 = 100.0 * flags.iter().filter(|f| f.1).count() as f64 / n;
    Accuracy {
        top1,
        top5: (logits.shape()[1] >= 5).then_some(top5),
    }
}

/// Logits over a whole split, computed in chunks.
pub fn split_logits(model: &Model64, split: &Split) -> Result<Tensor64> {
    let n = split.len();
    let c = model.num_classes();
    let mut data = Vec::with_capacity(n * c);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let logits = model.logits(&split.images.gather(chunk))?;
        data.extend_from_slice(logits.data());
    }
    Ok(Tensor64::from_vec(&[n, c], data)?)
}

pub fn evaluate(model: &Model64, split: &Split) -> Result<Accuracy> {
    if model.input_shape() != split.meta.item_shape() {
        return Err(HarnessError::Config(format!(
            "model input {:?} does not match dataset items {:?}",
            model.input_shape(),
            split.meta.item_shape()
        )));
    }
    Ok(accuracy_from_logits(&split_logits(model, split)?, &split.labels))
}

fn check_finite(value: f64, what: &str, epoch: usize, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Numerical(format!(
            "{what} became {value} at epoch {epoch}, iteration {iteration}"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: Model64,
    pub accuracy: Accuracy,
    pub cache_hit: bool,
    pub seconds: f64,
}

fn cache_key(cfg: &TrainConfig, data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.teacher_spec).expect("spec serializes"));
    h.update(serde_json::to_vec(&cfg.teacher_training).expect("settings serialize"));
    h.update(data.train.meta.digest.as_bytes());
    hex::encode(h.finalize())
}

fn cache_path(cfg: &TrainConfig, data: &Dataset) -> Option<PathBuf> {
    cfg.teacher_cache
        .as_ref()
        .map(|dir| dir.join(format!("teacher-{}.json", &cache_key(cfg, data)[..16])))
}

/// Train the teacher from scratch with cross-entropy.
pub fn train_teacher(cfg: &TrainConfig, data: &Dataset) -> Result<TrainedTeacher> {
    let start = Instant::now();
    let t = &cfg.teacher_training;
    let mut model = build_model::<f64>(&cfg.teacher_spec)?;
    check_shapes(&model, &data.train)?;
    let mut rng = stream(t.seed, ORDER_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let iterations = data.train.len() / t.batch_size;
    if iterations == 0 {
        return Err(HarnessError::Config("teacher batch_size exceeds the training set".into()));
    }
    for epoch in 0..t.epochs {
        order.shuffle(&mut rng);
        let lr = lr_at(&t.lr_schedule, epoch);
        for it in 0..iterations {
            let (x, y) = data.train.gather(&order[it * t.batch_size..(it + 1) * t.batch_size]);
            let trace = model.forward_trace(&x)?;
            let (loss, grad) = cross_entropy(trace.logits(), &y)?;
            check_finite(loss, "teacher loss", epoch, it)?;
            let grads = model.backward(&trace, &grad, &[], None)?;
            model.sgd_step(&grads, lr, t.momentum, t.weight_decay)?;
        }
    }
    let accuracy = evaluate(&model, &data.test)?;
    Ok(TrainedTeacher {
        model,
        accuracy,
        cache_hit: false,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Load the configured teacher parameters, reuse a cached teacher, or train
/// one (and cache it when a cache directory is set).
pub fn obtain_teacher(cfg: &TrainConfig, data: &Dataset) -> Result<TrainedTeacher> {
    let start = Instant::now();
    let loaded = if let Some(p) = &cfg.teacher_params {
        Some(load_params(p, Some(&cfg.teacher_spec))?)
    } else {
        match cache_path(cfg, data) {
            Some(p) if p.exists() => Some(load_params(&p, Some(&cfg.teacher_spec))?),
            _ => None,
        }
    };
    if let Some(model) = loaded {
        check_shapes(&model, &data.train)?;
        let accuracy = evaluate(&model, &data.test)?;
        return Ok(TrainedTeacher {
            model,
            accuracy,
            cache_hit: true,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let teacher = train_teacher(cfg, data)?;
    if let Some(p) = cache_path(cfg, data) {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        save_params(&p, &teacher.model)?;
    }
    Ok(teacher)
}

fn check_shapes(model: &Model64, split: &Split) -> Result<()> {
    if model.input_shape() != split.meta.item_shape() || model.num_classes() != split.num_classes() {
        return Err(HarnessError::Config(format!(
            "model expects {:?} with {} classes; dataset has {:?} with {}",
            model.input_shape(),
            model.num_classes(),
            split.meta.item_shape(),
            split.num_classes()
        )));
    }
    Ok(())
}

/// Everything a distillation run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub student: Model64,
    pub trace: SamplingTrace,
    pub recordings: Option<Recordings>,
    pub seconds: f64,
}

/// Inputs of one iteration after the method's batch transform.
struct Step {
    inputs: Tensor64,
    /// Batch positions of the base sample behind each input.
    positions: Vec<usize>,
    /// Raw-batch student features from the scoring pass, if any.
    scoring_features: Option<Tensor64>,
}

fn exact(v: u64) -> Exact128 {
    Ratio::from_integer(v as i128)
}

fn to_f64(r: Exact128) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Distil (or, for `scratch`, train) the student per the configured method.
pub fn run_distillation(cfg: &TrainConfig, data: &Dataset, teacher: Option<&TrainedTeacher>) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let method = cfg.method;
    let teacher_model = match (method.needs_teacher(), teacher) {
        (true, Some(t)) => Some(&t.model),
        (true, None) => return Err(HarnessError::Config(format!("method {method} needs a teacher"))),
        (false, _) => None,
    };
    let mut student = build_model::<f64>(&cfg.student_spec)?;
    check_shapes(&student, &data.train)?;
    if let Some(t) = teacher_model {
        check_shapes(t, &data.train)?;
    }

    let loss_cfg: LossConfig = cfg.loss_config();
    let unix_cfg = cfg.unix_config();
    let ledger = CostLedger::new();
    let flop_model: CostModel<Exact128> =
        cost_model_from(&cfg.teacher_spec, &cfg.student_spec, cfg.backward_multiplier)?;
    let t_prof = unixkd_core::flop_count(&cfg.teacher_spec, cfg.backward_multiplier)?;
    let s_prof = unixkd_core::flop_count(&cfg.student_spec, cfg.backward_multiplier)?;

    let n = cfg.n;
    let iterations = data.train.len() / n;
    if iterations == 0 {
        return Err(HarnessError::Config(format!(
            "N = {n} exceeds the training set size {}",
            data.train.len()
        )));
    }
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let mut mix_rng = stream(cfg.seed, MIX_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut trace = SamplingTrace::default();
    let mut recordings = cfg.record_features.then(Recordings::default);
    let mut diagnostic_forward = 0u64;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let kd_per_iteration = kd_iteration_cost(&flop_model, n as u64);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let lr = lr_at(&cfg.lr_schedule, epoch);
        let mut loss_sum = 0.0;
        for it in 0..iterations {
            let batch_idx = &order[it * n..(it + 1) * n];
            let (x, y) = data.train.gather(batch_idx);

            let step = match method {
                Method::Kd | Method::Scratch => Step {
                    inputs: x.clone(),
                    positions: (0..n).collect(),
                    scoring_features: None,
                },
                Method::RandomKd => {
                    let positions = index::sample(&mut mix_rng, n, cfg.k).into_vec();
                    Step {
                        inputs: x.gather(&positions),
                        positions,
                        scoring_features: None,
                    }
                }
                _ => {
                    let ucfg = unix_cfg.as_ref().expect("mixup methods carry a unix config");
                    let out = unix_batch(&x, &student, ucfg, &mut mix_rng, &ledger)?;
                    Step {
                        inputs: out.inputs,
                        positions: out.base_indices,
                        scoring_features: out.scoring_features,
                    }
                }
            };
            let k = step.inputs.batch() as u64;
            let labels: Vec<usize> = step.positions.iter().map(|&p| y[p]).collect();

            let t_out = match teacher_model {
                Some(t) => {
                    let out = t.forward(&step.inputs, loss_cfg.needs_features())?;
                    ledger.charge(PassKind::TeacherForward, k);
                    Some(out)
                }
                None => None,
            };
            let s_trace = student.forward_trace(&step.inputs)?;
            ledger.charge(PassKind::StudentForward, k);
            if let Some(rec) = recordings.as_mut() {
                let features = match step.scoring_features {
                    Some(f) => f,
                    None if matches!(method, Method::Kd | Method::Scratch) => s_trace.penultimate(),
                    None => {
                        diagnostic_forward += n as u64;
                        student.forward(&x, true)?.penultimate.expect("requested")
                    }
                };
                rec.features.push(features);
            }

            let mut parts = LossParts::default();
            if loss_cfg.weight_ce > 0.0 {
                let (value, grad) = cross_entropy(s_trace.logits(), &labels)?;
                parts.ce = Some(unixkd_core::losses::LossValue { value, grad });
            }
            if let Some(t) = &t_out {
                if loss_cfg.weight_kd > 0.0 {
                    parts.kd = Some(kd_loss(
                        &t.logits,
                        s_trace.logits(),
                        loss_cfg.temperature,
                        loss_cfg.tau_squared,
                    )?);
                }
                if loss_cfg.weight_at > 0.0 {
                    let s_maps: Vec<Tensor64> = s_trace.feature_maps().into_iter().cloned().collect();
                    let pairs = pair_by_spatial_size(&t.feature_maps, &s_maps)?;
                    let t_maps: Vec<Tensor64> = pairs.iter().map(|&i| t.feature_maps[i].clone()).collect();
                    parts.at = Some(at_loss(&t_maps, &s_maps)?);
                }
                if loss_cfg.weight_sp > 0.0 {
                    let tp = t.penultimate.as_ref().expect("features requested");
                    parts.sp = Some(sp_loss(tp, &s_trace.penultimate())?);
                }
            }
            let combined = combined_loss(&loss_cfg, &parts)?;
            check_finite(combined.total, "training loss", epoch, it)?;
            let grad_logits = combined
                .grad_logits
                .unwrap_or_else(|| Tensor64::zeros(s_trace.logits().shape()));
            let grads = student.backward(
                &s_trace,
                &grad_logits,
                &combined.grad_feature_maps,
                combined.grad_penultimate.as_ref(),
            )?;
            ledger.charge(PassKind::StudentBackward, k);
            if !grads.all_finite() {
                return Err(HarnessError::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, iteration {it}"
                )));
            }
            student.sgd_step(&grads, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += combined.total;

            if let (Some(rec), Some(t)) = (recordings.as_mut(), &t_out) {
                rec.teacher_logits.push(t.logits.clone());
            }
            trace.records.push(IterationRecord {
                epoch,
                batch: batch_idx.to_vec(),
                selected: step.positions,
            });
        }
        let acc = evaluate(&student, &data.test)?;
        let done = ((epoch + 1) * iterations) as u64;
        let baseline = kd_per_iteration * exact(done);
        let rel = relative_cost(ledger.energy(&flop_model), baseline)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / iterations as f64,
            test_top1: acc.top1,
            test_top5: acc.top5,
            cumulative_relative_cost: to_f64(rel),
        });
    }

    let total_iterations = iterations * cfg.epochs;
    let energy = ledger.energy(&flop_model);
    let baseline = kd_per_iteration * exact(total_iterations as u64);
    let rel = relative_cost(energy, baseline)?;
    let last = epochs.last().expect("epochs ≥ 1").clone();
    let report = ExperimentReport {
        config: cfg.clone(),
        plan: cfg.effective_plan(),
        dataset: DatasetSummary {
            path: cfg.dataset.clone(),
            train_samples: data.train.len(),
            test_samples: data.test.len(),
            num_classes: data.train.num_classes(),
            train_digest: data.train.meta.digest.clone(),
            test_digest: data.test.meta.digest.clone(),
        },
        cost_model: CostSummary {
            teacher_forward_flops: t_prof.forward_flops,
            student_forward_flops: s_prof.forward_flops,
            student_backward_flops: s_prof.backward_flops,
            backward_multiplier: cfg.backward_multiplier,
            ratio: to_f64(flop_model.ratio()),
        },
        teacher: teacher.filter(|_| method.needs_teacher()).map(|t| TeacherSummary {
            test_top1: t.accuracy.top1,
            test_top5: t.accuracy.top5,
        }),
        iterations_per_epoch: iterations,
        total_iterations,
        epochs,
        final_top1: last.test_top1,
        final_top5: last.test_top5,
        ledger: ledger.totals(),
        expected_ledger: cfg.charges_per_iteration().times(total_iterations as u64),
        diagnostic_student_forward: diagnostic_forward,
        energy_flops: energy.to_integer() as u64,
        kd_baseline_energy_flops: baseline.to_integer() as u64,
        relative_cost: to_f64(rel),
        relative_cost_reported: format_percent(rel),
        seed: cfg.seed,
    };
    Ok(RunOutput {
        report,
        student,
        trace,
        recordings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use unixkd_core::{LayerSpec, ModelSpec};

    #[test]
    fn accuracy_examples() {
        let perfect = Tensor64::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 5.0]]);
        assert_eq!(accuracy_from_logits(&perfect, &[0, 1, 2]).top1, 100.0);

        // Constant logits: the tie rule predicts class 0 everywhere.
        let constant = Tensor64::zeros(&[10, 5]);
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let acc = accuracy_from_logits(&constant, &labels);
        assert_eq!(acc.top1, 20.0);
        assert_eq!(acc.top5, Some(100.0));

        // Hand-enumerated: row 0 right, row 1 wrong (tie goes to class 0),
        // row 2 wrong.
        let logits = Tensor64::from_rows(&[vec![0.1, 0.9, 0.0], vec![0.5, 0.5, 0.2], vec![1.0, 0.0, 3.0]]);
        let acc = accuracy_from_logits(&logits, &[1, 1, 0]);
        assert!((acc.top1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc.top5, None);
    }

    #[test]
    fn top5_uses_low_index_tie_break() {
        let row = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(label_rank(&row, 4), 4);
        assert_eq!(label_rank(&row, 5), 5);
        let logits = Tensor64::from_rows(&[row]);
        assert_eq!(accuracy_from_logits(&logits, &[5]).top5, Some(0.0));
    }

    #[test]
    fn linearly_separable_toy_trains_above_ninety_five() {
        use crate::dataset::{DatasetMeta, Split};
        // Two classes split by the sign of x0 + x1 - 1 on [0, 1]².
        let mut rng = stream(3, 0);
        let mut make = |count: usize| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            while ys.len() < count {
                let a: f64 = rand::Rng::random(&mut rng);
                let b: f64 = rand::Rng::random(&mut rng);
                let margin = a + b - 1.0;
                if margin.abs() < 0.05 {
                    continue;
                }
                xs.extend([a, b]);
                ys.push(usize::from(margin > 0.0));
            }
            Split {
                meta: DatasetMeta {
                    num_samples: count,
                    height: 1,
                    width: 2,
                    channels: 1,
                    num_classes: 2,
                    digest: String::new(),
                },
                images: Tensor64::from_vec(&[count, 1, 1, 2], xs).unwrap(),
                labels: ys,
            }
        };
        let data = Dataset {
            train: make(400),
            test: make(200),
        };
        let mut cfg = crate::presets::desk_config("unused", Method::Kd, 0);
        let spec = ModelSpec {
            input_shape: vec![1, 1, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
            num_classes: 2,
            seed: 1,
        };
        cfg.teacher_spec = spec.clone();
        cfg.student_spec = spec;
        cfg.teacher_training.epochs = 20;
        cfg.teacher_training.batch_size = 16;
        cfg.teacher_training.lr_schedule = crate::config::LrSchedule::constant(0.5);
        let t = train_teacher(&cfg, &data).unwrap();
        let train_acc = evaluate(&t.model, &data.train).unwrap().top1;
        assert!(train_acc > 95.0, "{train_acc}");
        let again = train_teacher(&cfg, &data).unwrap();
        assert_eq!(again.model.params(), t.model.params());
    }
}
