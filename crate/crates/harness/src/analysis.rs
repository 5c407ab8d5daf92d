//! Diagnostics computed from persisted run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use unixkd_core::functional::softmax;
use unixkd_core::rng::stream;
use unixkd_core::uncertainty::entropy_uncertainty;
use unixkd_core::{Model64, Tensor64};

use crate::dataset::{load_dataset, Split};
use crate::error::{HarnessError, Result};
use crate::report::{load_params, read_report};
use crate::trace::{Recordings, SamplingTrace};
use crate::train::correctness;

const ANALYSIS_STREAM: u64 = 7;

/// How often each category was selected, in total and per epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryCounts {
    pub totals: Vec<u64>,
    /// `[epoch][category]`.
    pub per_epoch: Vec<Vec<u64>>,
}

pub fn category_sampling_counts(trace: &SamplingTrace, labels: &[usize], num_classes: usize) -> Result<CategoryCounts> {
    trace.validate(labels.len())?;
    let mut per_epoch = vec![vec![0u64; num_classes]; trace.epochs()];
    for r in &trace.records {
        for d in r.selected_dataset_indices() {
            let c = labels[d];
            if c >= num_classes {
                return Err(HarnessError::Analysis(format!("label {c} outside {num_classes} classes")));
            }
            per_epoch[r.epoch][c] += 1;
        }
    }
    let totals = (0..num_classes).map(|c| per_epoch.iter().map(|row| row[c]).sum()).collect();
    Ok(CategoryCounts { totals, per_epoch })
}

/// Top-1 accuracy (percent) restricted to each category; `None` for
/// categories absent from the split.
pub fn category_accuracy(model: &Model64, split: &Split) -> Result<Vec<Option<f64>>> {
    let logits = crate::train::split_logits(model, split)?;
    Ok(category_accuracy_from_logits(&logits, &split.labels, split.num_classes()))
}

pub fn category_accuracy_from_logits(logits: &Tensor64, labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let flags = correctness(logits, labels);
    let mut hit = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (&c, f) in labels.iter().zip(&flags) {
        seen[c] += 1;
        hit[c] += usize::from(f.0);
    }
    (0..num_classes)
        .map(|c| (seen[c] > 0).then(|| 100.0 * hit[c] as f64 / seen[c] as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDistances {
    pub epoch: usize,
    pub selected_mean: f64,
    pub all_mean: f64,
    pub selected_count: usize,
    pub all_count: usize,
}

/// Distance of each sample to the running mean of its category's student
/// features. Centres restart every epoch and absorb each batch before its
/// distances are taken.
pub fn centroid_distances(
    trace: &SamplingTrace,
    features: &[Tensor64],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<EpochDistances>> {
    if features.len() != trace.records.len() {
        return Err(HarnessError::Analysis(format!(
            "{} feature recordings for {} iterations",
            features.len(),
            trace.records.len()
        )));
    }
    trace.validate(labels.len())?;
    let d = features.first().map_or(0, |f| f.item_len());
    let mut out: Vec<EpochDistances> = Vec::new();
    let mut centres = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let (mut sel_sum, mut all_sum) = (0.0, 0.0);
    let (mut sel_n, mut all_n) = (0usize, 0usize);
    let flush = |epoch: usize, s: f64, a: f64, sn: usize, an: usize, out: &mut Vec<EpochDistances>| {
        out.push(EpochDistances {
            epoch,
            selected_mean: if sn > 0 { s / sn as f64 } else { f64::NAN },
            all_mean: if an > 0 { a / an as f64 } else { f64::NAN },
            selected_count: sn,
            all_count: an,
        });
    };
    for (i, (r, f)) in trace.records.iter().zip(features).enumerate() {
        if f.batch() != r.batch.len() || f.item_len() != d {
            return Err(HarnessError::Analysis(format!("iteration {i}: feature shape {:?}", f.shape())));
        }
        if i > 0 && trace.records[i - 1].epoch != r.epoch {
            flush(trace.records[i - 1].epoch, sel_sum, all_sum, sel_n, all_n, &mut out);
            centres.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = 0.0));
            counts.iter_mut().for_each(|c| *c = 0);
            (sel_sum, all_sum, sel_n, all_n) = (0.0, 0.0, 0, 0);
        }
        for (p, &ds) in r.batch.iter().enumerate() {
            let c = labels[ds];
            counts[c] += 1;
            let w = 1.0 / counts[c] as f64;
            for (m, &x) in centres[c].iter_mut().zip(f.item(p)) {
                *m += (x - *m) * w;
            }
        }
        let dist = |p: usize| -> f64 {
            let c = labels[r.batch[p]];
            f.item(p)
                .iter()
                .zip(&centres[c])
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for p in 0..r.batch.len() {
            all_sum += dist(p);
            all_n += 1;
        }
        for &p in &r.selected {
            sel_sum += dist(p);
            sel_n += 1;
        }
    }
    if let Some(last) = trace.records.last() {
        flush(last.epoch, sel_sum, all_sum, sel_n, all_n, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochEntropy {
    pub epoch: usize,
    pub selected_mean: f64,
    pub random_mean: f64,
}

fn mean_entropy(logits: &Tensor64) -> Result<(f64, usize)> {
    let p = softmax(logits, 1.0)?;
    let e = entropy_uncertainty(&p)?;
    Ok((e.iter().sum(), e.len()))
}

/// Per-epoch mean teacher entropy (`τ = 1`) of the queried inputs and of a
/// random baseline. `epochs[i]` is the epoch of iteration `i`.
pub fn teacher_entropy_stats(
    epochs: &[usize],
    selected_logits: &[Tensor64],
    random_logits: &[Tensor64],
) -> Result<Vec<EpochEntropy>> {
    if selected_logits.len() != epochs.len() || random_logits.len() != epochs.len() {
        return Err(HarnessError::Analysis("teacher logit recordings do not cover every iteration".into()));
    }
    let mut out: Vec<EpochEntropy> = Vec::new();
    let mut acc = (0.0, 0usize, 0.0, 0usize);
    for i in 0..epochs.len() {
        let (s, sn) = mean_entropy(&selected_logits[i])?;
        let (r, rn) = mean_entropy(&random_logits[i])?;
        acc = (acc.0 + s, acc.1 + sn, acc.2 + r, acc.3 + rn);
        if i + 1 == epochs.len() || epochs[i + 1] != epochs[i] {
            out.push(EpochEntropy {
                epoch: epochs[i],
                selected_mean: acc.0 / acc.1.max(1) as f64,
                random_mean: acc.2 / acc.3.max(1) as f64,
            });
            acc = (0.0, 0, 0.0, 0);
        }
    }
    Ok(out)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(HarnessError::Analysis("spearman: length mismatch".into()));
    }
    if x.len() < 3 {
        return Err(HarnessError::Analysis(format!("spearman: need at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(HarnessError::Analysis("spearman: non-finite input".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(HarnessError::Analysis("spearman: constant input has no ranking".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// ρ between sampling counts and accuracy over categories with defined
/// accuracy.
pub fn count_accuracy_correlation(totals: &[u64], accuracy: &[Option<f64>]) -> Result<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = totals
        .iter()
        .zip(accuracy)
        .filter_map(|(&t, a)| a.map(|a| (t as f64, a)))
        .unzip();
    spearman(&xs, &ys)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of `observed` against `expected_proportions`.
pub fn chi_square_test(observed: &[u64], expected_proportions: &[f64]) -> Result<ChiSquareTest> {
    if observed.len() != expected_proportions.len() || observed.len() < 2 {
        return Err(HarnessError::Analysis("chi-square: need matching vectors with ≥ 2 cells".into()));
    }
    let total: u64 = observed.iter().sum();
    let psum: f64 = expected_proportions.iter().sum();
    if total == 0 || !(psum > 0.0) || expected_proportions.iter().any(|&p| !(p > 0.0)) {
        return Err(HarnessError::Analysis("chi-square: empty sample or non-positive expectation".into()));
    }
    let statistic = observed
        .iter()
        .zip(expected_proportions)
        .map(|(&o, &p)| {
            let e = total as f64 * p / psum;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = observed.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| HarnessError::Analysis(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        degrees_of_freedom: dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Class frequencies of a label vector.
pub fn class_proportions(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    for &l in labels {
        counts[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

/// Summary of [`analyze_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub counts: CategoryCounts,
    pub accuracy: Vec<Option<f64>>,
    pub correlation: Option<f64>,
    pub uniformity: ChiSquareTest,
    pub centroid: Option<Vec<EpochDistances>>,
    pub entropy: Option<Vec<EpochEntropy>>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Read a run directory and write the CSV diagnostics into `out`.
/// Centroid and teacher-entropy tables need recorded features; without
/// them those files are skipped.
pub fn analyze_run(run: &Path, out: &Path) -> Result<Analysis> {
    let report = read_report(run)?;
    let data = load_dataset(&report.dataset.path)?;
    if data.train.meta.digest != report.dataset.train_digest || data.test.meta.digest != report.dataset.test_digest {
        return Err(HarnessError::Analysis("dataset on disk differs from the one the run used".into()));
    }
    let classes = data.train.num_classes();
    let trace = SamplingTrace::read_jsonl(&run.join("selection.jsonl"))?;
    let student = load_params(&run.join("student.json"), Some(&report.config.student_spec))?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;

    let counts = category_sampling_counts(&trace, &data.train.labels, classes)?;
    let mut csv = String::from("category,total");
    for e in 0..counts.per_epoch.len() {
        write!(csv, ",epoch_{e}").expect("string write");
    }
    csv.push('\n');
    for c in 0..classes {
        write!(csv, "{c},{}", counts.totals[c]).expect("string write");
        for row in &counts.per_epoch {
            write!(csv, ",{}", row[c]).expect("string write");
        }
        csv.push('\n');
    }
    write(&out.join("category_counts.csv"), &csv)?;

    let accuracy = category_accuracy(&student, &data.test)?;
    let mut csv = String::from("category,accuracy\n");
    for (c, a) in accuracy.iter().enumerate() {
        writeln!(csv, "{c},{}", fmt_opt(*a)).expect("string write");
    }
    write(&out.join("category_accuracy.csv"), &csv)?;

    let correlation = count_accuracy_correlation(&counts.totals, &accuracy).ok();
    write(&out.join("correlation.txt"), &format!("{}\n", fmt_opt(correlation)))?;

    let uniformity = chi_square_test(&counts.totals, &class_proportions(&data.train.labels, classes))?;
    write(
        &out.join("uniformity.txt"),
        &format!(
            "statistic={}\ndof={}\np_value={}\n",
            uniformity.statistic, uniformity.degrees_of_freedom, uniformity.p_value
        ),
    )?;

    let recorded = Recordings::read(run)?;
    let (centroid, entropy) = match recorded {
        None => (None, None),
        Some((_, rec)) => {
            let dist = centroid_distances(&trace, &rec.features, &data.train.labels, classes)?;
            let mut csv = String::from("# metric=raw_euclidean features=student_penultimate\n");
            csv.push_str("epoch,selected_mean,all_mean\n");
            for d in &dist {
                writeln!(csv, "{},{},{}", d.epoch, d.selected_mean, d.all_mean).expect("string write");
            }
            write(&out.join("centroid_distance.csv"), &csv)?;

            let entropy = if rec.teacher_logits.is_empty() {
                None
            } else {
                let teacher = load_params(&run.join("teacher.json"), Some(&report.config.teacher_spec))?;
                let mut rng = stream(report.seed, ANALYSIS_STREAM);
                let mut random = Vec::with_capacity(trace.records.len());
                for (r, sel) in trace.records.iter().zip(&rec.teacher_logits) {
                    let pick = index::sample(&mut rng, r.batch.len(), sel.batch()).into_vec();
                    let idx: Vec<usize> = pick.iter().map(|&p| r.batch[p]).collect();
                    random.push(teacher.logits(&data.train.images.gather(&idx))?);
                }
                let epochs: Vec<usize> = trace.records.iter().map(|r| r.epoch).collect();
                let stats = teacher_entropy_stats(&epochs, &rec.teacher_logits, &random)?;
                let mut csv = String::from("epoch,selected_mean,random_mean\n");
                for s in &stats {
                    writeln!(csv, "{},{},{}", s.epoch, s.selected_mean, s.random_mean).expect("string write");
                }
                write(&out.join("teacher_entropy.csv"), &csv)?;
                Some(stats)
            };
            (Some(dist), entropy)
        }
    };
    Ok(Analysis {
        counts,
        accuracy,
        correlation,
        uniformity,
        centroid,
        entropy,
    })
}
