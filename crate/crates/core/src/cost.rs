//! Computation-cost algebra and the runtime pass ledger.
//!
//! Per-iteration energies:
//!
//! ```text
//! KD      E = N·(F_t + F_s + B_s)
//! UNIX    E = k·F_t + (N + k)·F_s + k·B_s
//! Random  E = k·(F_t + F_s + B_s)
//! ledger  E = N_t·F_t + N_s1·F_s + N_s2·B_s
//! ```
//!
//! Everything is generic over [`CostScalar`], so the same formulas evaluate
//! in `f64` or exactly in `Ratio<i64>`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::model::{flop_count, ModelSpec};
use crate::scalar::CostScalar;

/// Per-sample FLOPs of the three passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel<T> {
    pub teacher_forward: T,
    pub student_forward: T,
    pub student_backward: T,
}

fn from_u64<T: CostScalar>(v: u64) -> T {
    T::from_u64(v).expect("counts are representable")
}

impl<T: CostScalar> CostModel<T> {
    pub fn new(teacher_forward: T, student_forward: T, student_backward: T) -> Result<Self> {
        if !(student_forward > T::zero()) {
            return invalid("CostModel::new", "student forward FLOPs must be positive");
        }
        if teacher_forward < T::zero() || student_backward < T::zero() {
            return invalid("CostModel::new", "FLOPs must be non-negative");
        }
        Ok(Self {
            teacher_forward,
            student_forward,
            student_backward,
        })
    }

    /// Model in units of `F_s`: `F_t = ratio`, `F_s = 1`,
    /// `B_s = backward_multiplier`.
    pub fn from_ratio(ratio: T, backward_multiplier: T) -> Result<Self> {
        Self::new(ratio, T::one(), backward_multiplier)
    }

    /// `F_t / F_s`.
    pub fn ratio(&self) -> T {
        self.teacher_forward / self.student_forward
    }

    /// Rescale so that `F_s = 1`.
    pub fn normalized(&self) -> Self {
        Self {
            teacher_forward: self.teacher_forward / self.student_forward,
            student_forward: T::one(),
            student_backward: self.student_backward / self.student_forward,
        }
    }

    fn per_sample(&self) -> T {
        self.teacher_forward + self.student_forward + self.student_backward
    }
}

/// Derive `F_t`, `F_s` and `B_s = multiplier·F_s` from two specs.
pub fn cost_model_from<T: CostScalar>(
    teacher: &ModelSpec,
    student: &ModelSpec,
    backward_multiplier: f64,
) -> Result<CostModel<T>> {
    let t = flop_count(teacher, backward_multiplier)?;
    let s = flop_count(student, backward_multiplier)?;
    if s.forward_flops == 0 {
        return invalid("cost_model_from", "student has zero FLOPs; cost ratio undefined");
    }
    CostModel::new(
        from_u64(t.forward_flops),
        from_u64(s.forward_flops),
        from_u64(s.backward_flops),
    )
}

/// `N·(F_t + F_s + B_s)`.
pub fn kd_iteration_cost<T: CostScalar>(model: &CostModel<T>, n: u64) -> T {
    from_u64::<T>(n) * model.per_sample()
}

/// `k·F_t + (N + k)·F_s + k·B_s`; `k = 0` leaves only the scoring pass.
pub fn unix_iteration_cost<T: CostScalar>(model: &CostModel<T>, n: u64, k: u64) -> Result<T> {
    if k > n {
        return invalid("unix_iteration_cost", format!("k = {k} exceeds N = {n}"));
    }
    Ok(IterationCharges::unix(n, k).energy(model))
}

/// `k·(F_t + F_s + B_s)`.
pub fn random_iteration_cost<T: CostScalar>(model: &CostModel<T>, n: u64, k: u64) -> Result<T> {
    if k > n {
        return invalid("random_iteration_cost", format!("k = {k} exceeds N = {n}"));
    }
    Ok(IterationCharges::subset(k).energy(model))
}

/// `100·method/baseline`, full precision.
pub fn relative_cost<T: CostScalar>(method_energy: T, baseline_energy: T) -> Result<T> {
    if !(baseline_energy > T::zero()) {
        return invalid("relative_cost", "baseline energy must be positive");
    }
    Ok(from_u64::<T>(100) * method_energy / baseline_energy)
}

/// [`relative_cost`] rounded half-up to two decimals for reporting.
pub fn reported_relative_cost<T: CostScalar>(method_energy: T, baseline_energy: T) -> Result<T> {
    Ok(relative_cost(method_energy, baseline_energy)?.round_hundredths())
}

/// Percentage of a UNIX iteration against KD with `F_t/F_s = ratio` and
/// `B_s = multiplier·F_s`.
pub fn unix_relative_cost<T: CostScalar>(n: u64, k: u64, ratio: T, backward_multiplier: T) -> Result<T> {
    let model = CostModel::from_ratio(ratio, backward_multiplier)?;
    relative_cost(unix_iteration_cost(&model, n, k)?, kd_iteration_cost(&model, n))
}

/// Parse a decimal literal such as `"38.17"` into any cost scalar exactly
/// (for rationals) or to nearest (for floats).
pub fn parse_decimal<T: CostScalar>(s: &str) -> Result<T> {
    let bad = || CoreError::InvalidArgument {
        op: "parse_decimal",
        reason: format!("{s:?} is not a plain decimal"),
    };
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 12 {
        return Err(bad());
    }
    let digits: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
    let scale: u64 = 10u64.pow(frac.len() as u32);
    let v = from_u64::<T>(digits) / from_u64::<T>(scale);
    Ok(if neg { T::zero() - v } else { v })
}

/// Samples passed through each network in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCharges {
    pub teacher_forward: u64,
    pub student_forward: u64,
    pub student_backward: u64,
}

impl IterationCharges {
    /// `(N, N, N)`.
    pub fn kd(n: u64) -> Self {
        Self {
            teacher_forward: n,
            student_forward: n,
            student_backward: n,
        }
    }

    /// `(k, N + k, k)`.
    pub fn unix(n: u64, k: u64) -> Self {
        Self {
            teacher_forward: k,
            student_forward: n + k,
            student_backward: k,
        }
    }

    /// `(k, k, k)`: distil on a subset with no scoring pass.
    pub fn subset(k: u64) -> Self {
        Self::kd(k)
    }

    /// `(0, N, N)`: training without a teacher.
    pub fn scratch(n: u64) -> Self {
        Self {
            teacher_forward: 0,
            student_forward: n,
            student_backward: n,
        }
    }

    pub fn times(&self, iterations: u64) -> Self {
        Self {
            teacher_forward: self.teacher_forward * iterations,
            student_forward: self.student_forward * iterations,
            student_backward: self.student_backward * iterations,
        }
    }

    pub fn energy<T: CostScalar>(&self, model: &CostModel<T>) -> T {
        from_u64::<T>(self.teacher_forward) * model.teacher_forward
            + from_u64::<T>(self.student_forward) * model.student_forward
            + from_u64::<T>(self.student_backward) * model.student_backward
    }
}

/// Kind of network pass charged to a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    TeacherForward,
    StudentForward,
    StudentBackward,
}

impl PassKind {
    pub fn name(&self) -> &'static str {
        match self {
            PassKind::TeacherForward => "teacher_forward",
            PassKind::StudentForward => "student_forward",
            PassKind::StudentBackward => "student_backward",
        }
    }
}

impl fmt::Display for PassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PassKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        [PassKind::TeacherForward, PassKind::StudentForward, PassKind::StudentBackward]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CoreError::InvalidArgument {
                op: "PassKind::from_str",
                reason: format!("unknown pass kind {s:?}"),
            })
    }
}

/// Monotone counters of samples pushed through each pass.
///
/// Counters are atomics, so one ledger may be shared by concurrent workers;
/// charges commute.
#[derive(Debug, Default)]
pub struct CostLedger {
    teacher_forward: AtomicU64,
    student_forward: AtomicU64,
    student_backward: AtomicU64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, kind: PassKind, samples: u64) {
        let counter = match kind {
            PassKind::TeacherForward => &self.teacher_forward,
            PassKind::StudentForward => &self.student_forward,
            PassKind::StudentBackward => &self.student_backward,
        };
        counter.fetch_add(samples, Ordering::Relaxed);
    }

    /// Charge by pass-kind name; unknown names are rejected.
    pub fn charge_named(&self, kind: &str, samples: u64) -> Result<()> {
        self.charge(kind.parse()?, samples);
        Ok(())
    }

    pub fn charge_iteration(&self, charges: &IterationCharges) {
        self.charge(PassKind::TeacherForward, charges.teacher_forward);
        self.charge(PassKind::StudentForward, charges.student_forward);
        self.charge(PassKind::StudentBackward, charges.student_backward);
    }

    pub fn teacher_forward(&self) -> u64 {
        self.teacher_forward.load(Ordering::Relaxed)
    }

    pub fn student_forward(&self) -> u64 {
        self.student_forward.load(Ordering::Relaxed)
    }

    pub fn student_backward(&self) -> u64 {
        self.student_backward.load(Ordering::Relaxed)
    }

    pub fn totals(&self) -> IterationCharges {
        IterationCharges {
            teacher_forward: self.teacher_forward(),
            student_forward: self.student_forward(),
            student_backward: self.student_backward(),
        }
    }

    /// `N_t·F_t + N_s1·F_s + N_s2·B_s`.
    pub fn energy<T: CostScalar>(&self, model: &CostModel<T>) -> T {
        self.totals().energy(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use num_rational::Ratio;
    use proptest::prelude::*;

    type Q = Ratio<i64>;

    fn dense(i: usize, o: usize) -> ModelSpec {
        ModelSpec {
            input_shape: vec![i],
            layers: vec![LayerSpec::Dense { out_features: o }],
            num_classes: o,
            seed: 0,
        }
    }

    #[test]
    fn kd_cost_examples() {
        let unit = CostModel::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(kd_iteration_cost(&unit, 1), 3.0);
        let m = CostModel::from_ratio(3.25, 1.0).unwrap();
        assert_eq!(kd_iteration_cost(&m, 64), 336.0);
        assert_eq!(kd_iteration_cost(&m, 128), 2.0 * kd_iteration_cost(&m, 64));
    }

    #[test]
    fn unix_cost_examples() {
        let m = CostModel::from_ratio(Q::new(325, 100), Q::from_integer(1)).unwrap();
        assert_eq!(unix_iteration_cost(&m, 64, 0).unwrap(), Q::from_integer(64));
        let e = unix_iteration_cost(&m, 64, 48).unwrap();
        assert_eq!(e, Q::from_integer(316));
        assert_eq!(relative_cost(e, kd_iteration_cost(&m, 64)).unwrap(), Q::new(31600, 336));
        let p = unix_relative_cost(64, 40, parse_decimal::<Q>("38.17").unwrap(), Q::from_integer(1)).unwrap();
        assert_eq!(p.round_hundredths(), Q::new(6499, 100));
        assert!(unix_iteration_cost(&m, 64, 65).is_err());
    }

    #[test]
    fn random_cost_examples() {
        let m = CostModel::from_ratio(7.0, 1.0).unwrap();
        let pct = |n, k| reported_relative_cost(random_iteration_cost(&m, n, k).unwrap(), kd_iteration_cost(&m, n)).unwrap();
        assert_eq!(pct(64, 48), 75.0);
        assert_eq!(pct(256, 200), 78.13);
        assert_eq!(pct(64, 64), 100.0);
    }

    #[test]
    fn relative_cost_rejects_zero_baseline() {
        assert!(relative_cost(1.0, 0.0).is_err());
        assert_eq!(reported_relative_cost(5.0, 5.0).unwrap(), 100.0);
    }

    #[test]
    fn cost_model_from_specs() {
        let m: CostModel<f64> = cost_model_from(&dense(10, 10), &dense(10, 10), 1.0).unwrap();
        assert_eq!(m.ratio(), 1.0);
        let m: CostModel<Q> = cost_model_from(&dense(100, 100), &dense(10, 10), 1.0).unwrap();
        assert_eq!(m.ratio(), Q::from_integer(100));
        let nothing = ModelSpec {
            input_shape: vec![3],
            layers: vec![],
            num_classes: 3,
            seed: 0,
        };
        assert!(cost_model_from::<f64>(&dense(3, 3), &nothing, 1.0).is_err());
    }

    #[test]
    fn ledger_examples() {
        let l = CostLedger::new();
        let m = CostModel::from_ratio(Q::new(2349, 100), Q::from_integer(1)).unwrap();
        assert_eq!(l.energy(&m), Q::from_integer(0));
        l.charge_iteration(&IterationCharges::unix(64, 48));
        assert_eq!(l.energy(&m), unix_iteration_cost(&m, 64, 48).unwrap());
        assert!(l.charge_named("teacher_backward", 1).is_err());
        l.charge_named("teacher_forward", 2).unwrap();
        assert_eq!(l.teacher_forward(), 50);
    }

    #[test]
    fn ledger_is_shareable_across_threads() {
        let l = CostLedger::new();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        l.charge(PassKind::StudentForward, 3);
                    }
                });
            }
        });
        assert_eq!(l.student_forward(), 12_000);
    }

    #[test]
    fn decimal_parsing() {
        assert_eq!(parse_decimal::<Q>("174.00").unwrap(), Q::from_integer(174));
        assert_eq!(parse_decimal::<Q>("8.22").unwrap(), Q::new(822, 100));
        assert_eq!(parse_decimal::<f64>("3").unwrap(), 3.0);
        assert!(parse_decimal::<f64>("1e3").is_err());
        assert!(parse_decimal::<f64>(".").is_err());
    }

    proptest! {
        #[test]
        fn charges_commute(charges in proptest::collection::vec((0u8..3, 0u64..1000), 0..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let kinds = [PassKind::TeacherForward, PassKind::StudentForward, PassKind::StudentBackward];
            let m = CostModel::from_ratio(Q::new(1717, 100), Q::new(3, 2)).unwrap();
            let a = CostLedger::new();
            for &(k, n) in &charges {
                a.charge(kinds[k as usize], n);
            }
            let mut shuffled = charges.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            let b = CostLedger::new();
            for &(k, n) in &shuffled {
                b.charge(kinds[k as usize], n);
            }
            prop_assert_eq!(a.energy(&m), b.energy(&m));
        }

        #[test]
        fn unix_closed_form(r_num in 1i64..100_000, n in 1u64..512, kf in 0.0f64..1.0) {
            let k = ((n - 1) as f64 * kf) as u64 + 1;
            prop_assume!(k < n);
            let r = Q::new(r_num, 100);
            let (nq, kq) = (Q::from_integer(n as i64), Q::from_integer(k as i64));
            let pct = unix_relative_cost(n, k, r, Q::from_integer(1)).unwrap();
            let two = Q::from_integer(2);
            let expected = Q::from_integer(100) * (kq * r + nq + two * kq) / (nq * (r + two));
            prop_assert_eq!(pct, expected);
            let bigger = unix_relative_cost(n, k, r + Q::from_integer(1), Q::from_integer(1)).unwrap();
            prop_assert!(bigger < pct);
            prop_assert!(pct > Q::from_integer(100) * kq / nq);
        }

        #[test]
        fn unix_cheaper_iff_k_fraction_small(ft in 1u32..10_000, fs in 1u32..1000, bs in 0u32..1000, n in 1u64..300, k in 0u64..300) {
            prop_assume!(k <= n);
            let m = CostModel::new(Q::from_integer(ft as i64), Q::from_integer(fs as i64), Q::from_integer(bs as i64)).unwrap();
            let cheaper = unix_iteration_cost(&m, n, k).unwrap() < kd_iteration_cost(&m, n);
            let frac = Q::new(k as i64, n as i64);
            let bound = (m.teacher_forward + m.student_backward) / (m.teacher_forward + m.student_forward + m.student_backward);
            prop_assert_eq!(cheaper, frac < bound);
        }

        #[test]
        fn width_scaling_preserves_ratio(t in 1usize..60, s in 1usize..60, scale in 1usize..5) {
            let a: CostModel<Q> = cost_model_from(&dense(t, t), &dense(s, s), 1.0).unwrap();
            let b: CostModel<Q> = cost_model_from(&dense(t * scale, t * scale), &dense(s * scale, s * scale), 1.0).unwrap();
            prop_assert_eq!(a.ratio(), b.ratio());
        }
    }
}
