//! Per-sample uncertainty criteria and the descending-uncertainty ranking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, CoreError, Result};
use crate::functional::softmax;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uncertainty criterion; the lowercase name is used in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Entropy,
    Confidence,
    Margin,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Entropy, Criterion::Confidence, Criterion::Margin];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Entropy => "entropy",
            Criterion::Confidence => "confidence",
            Criterion::Margin => "margin",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::InvalidArgument {
                op: "Criterion::from_str",
                reason: format!("unknown criterion {s:?}"),
            })
    }
}

/// Scores under one criterion plus the ranking that sorts them
/// non-increasingly.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScores<T> {
    pub criterion: Criterion,
    pub scores: Vec<T>,
    /// `ranking[0]` is the most uncertain sample.
    pub ranking: Vec<usize>,
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

fn check_distributions<T: Scalar>(probs: &Tensor<T>) -> Result<(usize, usize)> {
    if probs.shape().len() != 2 || probs.shape()[1] == 0 {
        return shape_err("uncertainty", "[batch, classes>0]", probs.shape());
    }
    let (batch, classes) = (probs.shape()[0], probs.shape()[1]);
    for b in 0..batch {
        let row = probs.item(b);
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(CoreError::NotADistribution {
                row: b,
                reason: format!("entry {v} is negative or non-finite"),
            });
        }
        let total: T = row.iter().copied().sum();
        if (total - T::one()).abs().as_f64() > ROW_SUM_TOLERANCE {
            return Err(CoreError::NotADistribution {
                row: b,
                reason: format!("row sums to {total}"),
            });
        }
    }
    Ok((batch, classes))
}

/// `U_e = −Σ p ln p`, with `0·ln 0 = 0`.
pub fn entropy_uncertainty<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<T>> {
    let (batch, _) = check_distributions(probs)?;
    Ok((0..batch).map(|b| entropy_of(probs.item(b))).collect())
}

pub(crate) fn entropy_of<T: Scalar>(row: &[T]) -> T {
    -row
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| p * p.ln())
        .sum::<T>()
}

/// `U_c = −max p`.
pub fn confidence_uncertainty<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<T>> {
    let (batch, _) = check_distributions(probs)?;
    Ok((0..batch)
        .map(|b| -probs.item(b).iter().copied().fold(T::neg_infinity(), T::max))
        .collect())
}

/// `U_m = −(p_first − p_second)` over the two largest probabilities.
pub fn margin_uncertainty<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<T>> {
    let (batch, classes) = check_distributions(probs)?;
    if classes < 2 {
        return invalid("margin_uncertainty", "needs at least two classes");
    }
    Ok((0..batch)
        .map(|b| {
            let (mut first, mut second) = (T::neg_infinity(), T::neg_infinity());
            for &p in probs.item(b) {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            -(first - second)
        })
        .collect())
}

/// Stable descending sort; ties keep ascending original index.
pub fn rank_descending<T: Scalar>(scores: &[T]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("rank_descending", "NaN score");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    Ok(order)
}

/// Score a batch of probability rows and rank it.
pub fn score<T: Scalar>(criterion: Criterion, probs: &Tensor<T>) -> Result<UncertaintyScores<T>> {
    let scores = match criterion {
        Criterion::Entropy => entropy_uncertainty(probs)?,
        Criterion::Confidence => confidence_uncertainty(probs)?,
        Criterion::Margin => margin_uncertainty(probs)?,
    };
    let ranking = rank_descending(&scores)?;
    Ok(UncertaintyScores {
        criterion,
        scores,
        ranking,
    })
}

/// Softmax the logits at `temperature`, then score.
pub fn score_logits<T: Scalar>(
    criterion: Criterion,
    logits: &Tensor<T>,
    temperature: T,
) -> Result<UncertaintyScores<T>> {
    score(criterion, &softmax(logits, temperature)?)
}
