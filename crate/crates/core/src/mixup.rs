//! Uncertainty-aware adaptive mixup.
//!
//! A batch is sorted by descending student uncertainty and blended with a
//! shuffled copy of itself. The blend coefficient of rank position `i` is
//! `c_i·λ`, where `λ ~ Beta(α, α)` and `c_i` is a sigmoid of the rank, so the
//! most uncertain samples are barely touched while well-learned samples are
//! mixed heavily. Only the first `k` mixed images are forwarded to the
//! teacher.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::cost::{CostLedger, PassKind};
use crate::error::{invalid, shape_err, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::uncertainty::{score_logits, Criterion, UncertaintyScores};

/// How the sort-side ordering is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Rank by student uncertainty (one scoring pass over the batch).
    Uncertainty,
    /// Uniformly random order; no scoring pass.
    Random,
}

/// How per-rank correction factors are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// `c = sigmoid(w·(rank − b)/N)`.
    Sigmoid,
    /// `c ≡ 1`: conventional, non-adaptive mixup.
    Constant,
}

/// Source of the mixing coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// One `Beta(α, α)` draw per batch.
    Beta,
    /// One `Beta(α, α)` draw per rank position.
    BetaPerSample,
    /// `λ = 0`: no mixing at all.
    Zero,
}

/// Parameters of one UNIX batch transform.
#[derive(Debug, Clone, PartialEq)]
pub struct UnixConfig<T> {
    pub criterion: Criterion,
    pub alpha: T,
    pub w: T,
    /// Sigmoid centre in rank units; `None` means `N / 2`.
    pub b: Option<T>,
    pub k: usize,
    pub selection: Selection,
    pub correction: CorrectionMode,
    pub lambda: LambdaMode,
    /// Softmax temperature of the scoring pass.
    pub scoring_temperature: T,
}

impl<T: Scalar> UnixConfig<T> {
    /// Full method: entropy ranking, `α = 1`, `w = 10`, `b = N/2`,
    /// `k = ⌈0.75·N⌉`.
    pub fn new(batch_size: usize) -> Self {
        Self {
            criterion: Criterion::Entropy,
            alpha: T::one(),
            w: T::of(10.0),
            b: None,
            k: default_k(batch_size),
            selection: Selection::Uncertainty,
            correction: CorrectionMode::Sigmoid,
            lambda: LambdaMode::Beta,
            scoring_temperature: T::one(),
        }
    }

    pub fn center(&self, batch_size: usize) -> T {
        self.b.unwrap_or_else(|| T::of(batch_size as f64 / 2.0))
    }
}

/// `⌈0.75·N⌉`.
pub fn default_k(batch_size: usize) -> usize {
    (3 * batch_size).div_ceil(4)
}

/// One iteration's mixing decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupPlan<T> {
    /// Batch-level λ (the first per-sample draw in per-sample mode).
    pub lambda: T,
    /// λ applied at each rank position.
    pub lambdas: Vec<T>,
    pub alpha: T,
    pub w: T,
    pub b: T,
    /// `x_shuffle[i] = batch[shuffle[i]]`.
    pub shuffle: Vec<usize>,
    /// Correction factor per rank position; non-decreasing.
    pub corrections: Vec<T>,
    pub k: usize,
}

/// Draw `λ ~ Beta(α, α)` as `g1 / (g1 + g2)` with `g1, g2 ~ Gamma(α, 1)`.
pub fn sample_beta<T: Scalar, R: Rng + ?Sized>(alpha: T, rng: &mut R) -> Result<T> {
    let a = alpha.as_f64();
    if !(a > 0.0) || !a.is_finite() {
        return invalid("sample_beta", "alpha must be positive and finite");
    }
    let gamma = Gamma::new(a, 1.0).map_err(|e| crate::CoreError::InvalidArgument {
        op: "sample_beta",
        reason: e.to_string(),
    })?;
    loop {
        let g1 = gamma.sample(rng);
        let g2 = gamma.sample(rng);
        let total = g1 + g2;
        // Both draws can underflow to zero for tiny alpha.
        if total > 0.0 {
            return Ok(T::of((g1 / total).clamp(0.0, 1.0)));
        }
    }
}

/// `c = 1 / (1 + exp(−w·(rank − b)/batchsize))`.
pub fn correction_factor<T: Scalar>(rank_position: usize, batchsize: usize, w: T, b: T) -> T {
    let z = w * (T::of(rank_position as f64) - b) / T::of(batchsize.max(1) as f64);
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> MixupPlan<T> {
    /// Draw λ, then the shuffle permutation, and tabulate corrections.
    pub fn draw<R: Rng + ?Sized>(batch_size: usize, cfg: &UnixConfig<T>, rng: &mut R) -> Result<Self> {
        if batch_size == 0 {
            return invalid("MixupPlan::draw", "empty batch");
        }
        if cfg.k == 0 || cfg.k > batch_size {
            return invalid("MixupPlan::draw", format!("k = {} outside [1, {batch_size}]", cfg.k));
        }
        let lambdas = match cfg.lambda {
            LambdaMode::Zero => vec![T::zero(); batch_size],
            LambdaMode::Beta => vec![sample_beta(cfg.alpha, rng)?; batch_size],
            LambdaMode::BetaPerSample => (0..batch_size)
                .map(|_| sample_beta(cfg.alpha, rng))
                .collect::<Result<_>>()?,
        };
        let mut shuffle: Vec<usize> = (0..batch_size).collect();
        shuffle.shuffle(rng);
        let b = cfg.center(batch_size);
        let corrections = (0..batch_size)
            .map(|r| match cfg.correction {
                CorrectionMode::Sigmoid => correction_factor(r, batch_size, cfg.w, b),
                CorrectionMode::Constant => T::one(),
            })
            .collect();
        Ok(Self {
            lambda: lambdas[0],
            lambdas,
            alpha: cfg.alpha,
            w: cfg.w,
            b,
            shuffle,
            corrections,
            k: cfg.k,
        })
    }
}

fn check_permutation(op: &'static str, perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return shape_err(op, n, perm.len());
    }
    let mut seen = vec![false; n];
    for &i in perm {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return invalid(op, format!("{perm:?} is not a permutation of 0..{n}"));
        }
    }
    Ok(())
}

/// `mixed[i] = (1 − c_i·λ_i)·x_sort[i] + c_i·λ_i·x_shuffle[i]`, with
/// `x_sort` the batch ordered by `ranking` and `x_shuffle` the batch ordered
/// by `plan.shuffle`. Output is in uncertainty-descending order.
pub fn adaptive_mixup<T: Scalar>(batch: &Tensor<T>, ranking: &[usize], plan: &MixupPlan<T>) -> Result<Tensor<T>> {
    let n = batch.batch();
    check_permutation("adaptive_mixup", ranking, n)?;
    check_permutation("adaptive_mixup", &plan.shuffle, n)?;
    if plan.corrections.len() != n || plan.lambdas.len() != n {
        return shape_err("adaptive_mixup", n, (plan.corrections.len(), plan.lambdas.len()));
    }
    let mut mixed = Tensor::zeros(batch.shape());
    for i in 0..n {
        let a = plan.corrections[i] * plan.lambdas[i];
        let keep = T::one() - a;
        let src = batch.item(ranking[i]);
        let other = batch.item(plan.shuffle[i]);
        for ((m, &x), &y) in mixed.item_mut(i).iter_mut().zip(src).zip(other) {
            // Rounding can push the blend an ulp outside [x, y]; the exact
            // value never leaves it.
            *m = (keep * x + a * y).max(x.min(y)).min(x.max(y));
        }
    }
    Ok(mixed)
}

/// First `k` mixed images and the batch positions of their sort-side bases.
pub fn select_top_k<T: Scalar>(mixed: &Tensor<T>, ranking: &[usize], k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let n = mixed.batch();
    if k == 0 || k > n {
        return invalid("select_top_k", format!("k = {k} outside [1, {n}]"));
    }
    if ranking.len() != n {
        return shape_err("select_top_k", n, ranking.len());
    }
    let idx: Vec<usize> = (0..k).collect();
    Ok((mixed.gather(&idx), ranking[..k].to_vec()))
}

/// Result of [`unix_batch`].
#[derive(Debug, Clone)]
pub struct UnixBatch<T> {
    /// `[k, ...]` images to distil on.
    pub inputs: Tensor<T>,
    /// Batch positions of the sort-side base sample of each input.
    pub base_indices: Vec<usize>,
    pub plan: MixupPlan<T>,
    /// `None` under random selection.
    pub scores: Option<UncertaintyScores<T>>,
    /// Sort order applied to the batch.
    pub ranking: Vec<usize>,
    /// Student penultimate features of the raw batch from the scoring pass.
    pub scoring_features: Option<Tensor<T>>,
}

/// Score the batch with one student forward (charged as `N` student forward
/// samples), draw the plan, mix, and keep the top `k`. The teacher is never
/// queried here.
pub fn unix_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &Tensor<T>,
    student: &Model<T>,
    cfg: &UnixConfig<T>,
    rng: &mut R,
    ledger: &CostLedger,
) -> Result<UnixBatch<T>> {
    let n = batch.batch();
    if cfg.k == 0 || cfg.k > n {
        return invalid("unix_batch", format!("k = {} outside [1, {n}]", cfg.k));
    }
    let (scores, ranking, scoring_features) = match cfg.selection {
        Selection::Uncertainty => {
            let out = student.forward(batch, true)?;
            ledger.charge(PassKind::StudentForward, n as u64);
            if !out.logits.all_finite() {
                return Err(crate::CoreError::NonFinite("unix_batch scoring pass"));
            }
            let scores = score_logits(cfg.criterion, &out.logits, cfg.scoring_temperature)?;
            let ranking = scores.ranking.clone();
            (Some(scores), ranking, out.penultimate)
        }
        Selection::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            (None, order, None)
        }
    };
    let plan = MixupPlan::draw(n, cfg, rng)?;
    let mixed = adaptive_mixup(batch, &ranking, &plan)?;
    let (inputs, base_indices) = select_top_k(&mixed, &ranking, cfg.k)?;
    Ok(UnixBatch {
        inputs,
        base_indices,
        plan,
        scores,
        ranking,
        scoring_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use crate::model::{build_model, LayerSpec, ModelSpec};

    fn plan(lambda: f64, corrections: Vec<f64>, shuffle: Vec<usize>) -> MixupPlan<f64> {
        let n = corrections.len();
        MixupPlan {
            lambda,
            lambdas: vec![lambda; n],
            alpha: 1.0,
            w: 10.0,
            b: n as f64 / 2.0,
            shuffle,
            corrections,
            k: n,
        }
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = seeded(1);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_beta(1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// P(λ < 0.1 or λ > 0.9) for Beta(a, a) by midpoint quadrature of the
    /// density after substituting x = t^(1/a), which removes the endpoint
    /// singularity: ∫_0^0.1 x^(a-1)(1-x)^(a-1) dx = (1/a)∫_0^{0.1^a} (1-t^(1/a))^(a-1) dt.
    fn beta_tail_mass(a: f64) -> f64 {
        let steps = 200_000;
        let half = |upper: f64| {
            let top = upper.powf(a);
            let h = top / steps as f64;
            (0..steps)
                .map(|i| {
                    let t = (i as f64 + 0.5) * h;
                    (1.0 - t.powf(1.0 / a)).powf(a - 1.0)
                })
                .sum::<f64>()
                * h
                / a
        };
        let total = {
            // full integral is B(a, a); reuse the same substitution on [0, 0.5]
            2.0 * half(0.5)
        };
        2.0 * half(0.1) / total
    }

    #[test]
    fn beta_small_alpha_is_u_shaped() {
        let oracle = beta_tail_mass(0.2);
        assert!(oracle > 0.5, "{oracle}");
        let mut rng = seeded(2);
        let n = 100_000;
        let tails = (0..n)
            .map(|_| sample_beta(0.2, &mut rng).unwrap())
            .filter(|&v| !(0.1..=0.9).contains(&v))
            .count();
        let frac = tails as f64 / n as f64;
        assert!(frac > 0.5);
        assert!((frac - oracle).abs() < 0.01, "{frac} vs {oracle}");
    }

    #[test]
    fn beta_rejects_bad_alpha() {
        assert!(sample_beta(0.0f64, &mut seeded(0)).is_err());
        assert!(sample_beta(-1.0f64, &mut seeded(0)).is_err());
    }

    #[test]
    fn correction_examples() {
        assert_eq!(correction_factor(32, 64, 10.0f64, 32.0), 0.5);
        let c0 = correction_factor(0, 64, 1000.0f64, 32.0);
        let c63 = correction_factor(63, 64, 1000.0f64, 32.0);
        assert!(c0 < 1e-30);
        assert!(1.0 - c63 < 1e-30);
        let c = correction_factor(0, 64, 10.0f64, 32.0);
        let direct = 1.0 / (1.0 + 5f64.exp());
        assert!((c - direct).abs() < 1e-15);
        assert!((c - 0.006693).abs() < 1e-6);
    }

    #[test]
    fn correction_is_monotone_and_crosses_at_center() {
        let (n, b) = (64usize, 32.0f64);
        for w in [0.5, 1.0, 10.0, 100.0] {
            let c: Vec<f64> = (0..n).map(|r| correction_factor(r, n, w, b)).collect();
            if w <= 10.0 {
                assert!(c.windows(2).all(|p| p[0] < p[1]));
            } else {
                assert!(c.windows(2).all(|p| p[0] <= p[1]));
            }
        }
        let lo: Vec<f64> = (0..n).map(|r| correction_factor(r, n, 1.0, b)).collect();
        let hi: Vec<f64> = (0..n).map(|r| correction_factor(r, n, 10.0, b)).collect();
        for r in 0..n {
            let d = hi[r] - lo[r];
            match r.cmp(&32) {
                std::cmp::Ordering::Less => assert!(d < 0.0),
                std::cmp::Ordering::Equal => assert_eq!(d, 0.0),
                std::cmp::Ordering::Greater => assert!(d > 0.0),
            }
        }
    }

    #[test]
    fn uncertain_sample_is_nearly_intact() {
        let c = correction_factor(0, 64, 10.0f64, 32.0);
        for lambda in [0.0, 0.3, 0.9, 1.0] {
            let keep = 1.0 - c * lambda;
            assert!(keep >= 1.0 - lambda * 0.007);
            assert!(keep > 0.99);
        }
    }

    #[test]
    fn mixup_hand_example() {
        let x = Tensor::from_vec(&[2, 1], vec![10.0, 20.0]).unwrap();
        let p = plan(0.5, vec![0.2, 0.8], vec![1, 0]);
        let m = adaptive_mixup(&x, &[0, 1], &p).unwrap();
        // 0.9·10 + 0.1·20 and 0.6·20 + 0.4·10
        assert_eq!(m.data(), &[11.0, 16.0]);
    }

    #[test]
    fn mixup_limits() {
        let x = Tensor::from_vec(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let ranking = vec![2, 0, 1];
        let p = plan(0.0, vec![0.1, 0.5, 0.9], vec![1, 2, 0]);
        assert_eq!(adaptive_mixup(&x, &ranking, &p).unwrap(), x.gather(&ranking));
        let p = plan(1.0, vec![0.3, 1.0, 0.9], vec![1, 2, 0]);
        let m = adaptive_mixup(&x, &ranking, &p).unwrap();
        assert_eq!(m.item(1), x.item(2));
    }

    #[test]
    fn mixup_rejects_bad_permutations() {
        let x = Tensor::<f64>::zeros(&[3, 1]);
        let p = plan(0.5, vec![0.5; 3], vec![0, 1]);
        assert!(adaptive_mixup(&x, &[0, 1, 2], &p).is_err());
        let p = plan(0.5, vec![0.5; 3], vec![0, 1, 2]);
        assert!(adaptive_mixup(&x, &[0, 0, 2], &p).is_err());
    }

    #[test]
    fn top_k_examples() {
        let scores = [0.1, 0.4, 0.2, 0.3];
        let ranking = crate::uncertainty::rank_descending(&scores).unwrap();
        let x = Tensor::from_vec(&[4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mixed = x.gather(&ranking);
        let (top, base) = select_top_k(&mixed, &ranking, 2).unwrap();
        let mut sorted = base.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 3]);
        assert_eq!(top.data(), &[1.0, 3.0]);
        let (all, _) = select_top_k(&mixed, &ranking, 4).unwrap();
        assert_eq!(all, mixed);
        let (one, b1) = select_top_k(&mixed, &ranking, 1).unwrap();
        assert_eq!((one.data(), b1), (&[1.0][..], vec![1]));
        assert!(select_top_k(&mixed, &ranking, 0).is_err());
        assert!(select_top_k(&mixed, &ranking, 5).is_err());
    }

    #[test]
    fn plan_invariants() {
        let cfg = UnixConfig::<f64>::new(64);
        assert_eq!(cfg.k, 48);
        let p = MixupPlan::draw(64, &cfg, &mut seeded(3)).unwrap();
        assert_eq!(p.b, 32.0);
        assert!(p.corrections.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.corrections.iter().all(|&c| c > 0.0 && c < 1.0));
        let mut s = p.shuffle.clone();
        s.sort();
        assert_eq!(s, (0..64).collect::<Vec<_>>());
        assert!((0.0..=1.0).contains(&p.lambda));
        let mut bad = cfg.clone();
        bad.k = 65;
        assert!(MixupPlan::draw(64, &bad, &mut seeded(3)).is_err());
    }

    fn linear_student(input: usize, classes: usize) -> Model<f64> {
        let spec = ModelSpec {
            input_shape: vec![input],
            layers: vec![LayerSpec::Dense { out_features: classes }],
            num_classes: classes,
            seed: 0,
        };
        build_model(&spec).unwrap()
    }

    #[test]
    fn uncertainty_only_returns_sorted_raw_batch() {
        let student = linear_student(3, 3);
        let x = Tensor::from_vec(&[5, 3], (0..15).map(|i| (i as f64 * 0.61).sin()).collect()).unwrap();
        let mut cfg = UnixConfig::new(5);
        cfg.k = 5;
        cfg.w = 1e6;
        cfg.lambda = LambdaMode::Zero;
        let ledger = CostLedger::new();
        let out = unix_batch(&x, &student, &cfg, &mut seeded(0), &ledger).unwrap();
        assert_eq!(out.inputs, x.gather(&out.ranking));
        assert_eq!(ledger.student_forward(), 5);
        assert_eq!(ledger.teacher_forward(), 0);
    }

    #[test]
    fn unix_batch_is_deterministic() {
        let student = linear_student(4, 3);
        let x = Tensor::from_vec(&[8, 4], (0..32).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let cfg = UnixConfig::new(8);
        let ledger = CostLedger::new();
        let a = unix_batch(&x, &student, &cfg, &mut seeded(9), &ledger).unwrap();
        let b = unix_batch(&x, &student, &cfg, &mut seeded(9), &ledger).unwrap();
        assert_eq!(a.base_indices, b.base_indices);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(ledger.student_forward(), 16);
    }

    #[test]
    fn unix_batch_matches_exhaustive_entropy_top_k() {
        // identity-weight student, so the input rows are the logits
        let mut student = linear_student(3, 3);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        eye.extend([0.0; 3]);
        student.set_params(&eye).unwrap();
        let logits = [
            [2.0, 0.0, 0.0],
            [0.1, 0.0, 0.2],
            [5.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [3.0, 3.0, 3.1],
            [0.0, 4.0, 0.5],
            [-1.0, 0.5, 0.2],
        ];
        let x = Tensor::from_vec(&[8, 3], logits.iter().flatten().copied().collect()).unwrap();
        let entropy = |z: &[f64; 3]| {
            let m = z.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            -e.iter().map(|v| v / s * (v / s).ln()).sum::<f64>()
        };
        let k = 3;
        let mut best = (f64::MIN, 0u32);
        for mask in 0u32..256 {
            if mask.count_ones() == k as u32 {
                let total: f64 = (0..8).filter(|i| mask & (1 << i) != 0).map(|i| entropy(&logits[i])).sum();
                if total > best.0 {
                    best = (total, mask);
                }
            }
        }
        let mut cfg = UnixConfig::new(8);
        cfg.k = k;
        let out = unix_batch(&x, &student, &cfg, &mut seeded(4), &CostLedger::new()).unwrap();
        let mask = out.base_indices.iter().fold(0u32, |m, &i| m | (1 << i));
        assert_eq!(mask, best.1);
    }

    #[test]
    fn random_selection_skips_scoring_pass() {
        let student = linear_student(2, 2);
        let x = Tensor::from_vec(&[4, 2], vec![0.1; 8]).unwrap();
        let mut cfg = UnixConfig::new(4);
        cfg.selection = Selection::Random;
        cfg.correction = CorrectionMode::Constant;
        let ledger = CostLedger::new();
        let out = unix_batch(&x, &student, &cfg, &mut seeded(1), &ledger).unwrap();
        assert!(out.scores.is_none());
        assert_eq!(ledger.student_forward(), 0);
        assert!(out.plan.corrections.iter().all(|&c| c == 1.0));
    }

    proptest! {
        #[test]
        fn mixup_is_convex(seed in any::<u64>(), n in 1usize..10, d in 1usize..6) {
            let mut rng = seeded(seed);
            let data: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
            let x = Tensor::from_vec(&[n, d], data).unwrap();
            let mut ranking: Vec<usize> = (0..n).collect();
            ranking.shuffle(&mut rng);
            let mut cfg = UnixConfig::new(n);
            cfg.w = rng.random_range(0.1..100.0);
            cfg.alpha = rng.random_range(0.1..3.0);
            let p = MixupPlan::draw(n, &cfg, &mut rng).unwrap();
            let m = adaptive_mixup(&x, &ranking, &p).unwrap();
            for i in 0..n {
                for j in 0..d {
                    let a = x.item(ranking[i])[j];
                    let b = x.item(p.shuffle[i])[j];
                    let v = m.item(i)[j];
                    prop_assert!(a.min(b) <= v && v <= a.max(b));
                }
            }
        }

        #[test]
        fn large_w_approaches_step(rank in 0usize..64) {
            // the sigmoid's transition band at w = 1000, N = 64 is under 3 ranks wide
            prop_assume!(rank.abs_diff(32) >= 3);
            let c = correction_factor(rank, 64, 1000.0f64, 32.0);
            let step = if rank > 32 { 1.0 } else { 0.0 };
            prop_assert!((c - step).abs() < 1e-20);
        }
    }
}
