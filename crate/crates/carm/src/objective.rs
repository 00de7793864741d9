//! Loss terms and the dynamic weight schedule for joint critique + reward
//! training.
//!
//! Everything here is a pure function over plain numbers: the pairwise
//! preference loss on reward margins, the critique negative log-likelihood,
//! their convex combination, and the schedule that moves weight from critique
//! learning to reward learning across training. All formulas avoid raw `exp`
//! of large magnitudes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("critique log-probability list must be nonempty")]
    EmptyCritiqueList,
    #[error("log-probability at index {index} must be finite and <= 0, got {value}")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("step {t} outside schedule domain 0..={max}")]
    StepOutOfRange { t: u64, max: u64 },
    #[error("mixing weight must lie in [0,1], got {0}")]
    WeightOutOfRange(f64),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
}

/// Scalar rewards for the preferred and dispreferred side of one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub r_plus: f64,
    pub r_minus: f64,
}

/// Sequence log-probabilities of the critiques attached to one response; each
/// entry is the summed token log-probability of one critique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueLogProbs {
    pub per_critique_logq: Vec<f64>,
}

impl CritiqueLogProbs {
    pub fn new(per_critique_logq: Vec<f64>) -> Self {
        CritiqueLogProbs { per_critique_logq }
    }
}

/// Shape of the critique→reward weight schedule: `total_steps_per_epoch`
/// optimizer steps per epoch, `n_epochs` epochs, and `beta` controlling how
/// far the critique weight decays in the final epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub total_steps_per_epoch: u64,
    pub n_epochs: u64,
    pub beta: f64,
}

impl ScheduleParams {
    pub fn new(total_steps_per_epoch: u64, n_epochs: u64, beta: f64) -> Result<Self, ObjectiveError> {
        let params = ScheduleParams { total_steps_per_epoch, n_epochs, beta };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.total_steps_per_epoch < 1 {
            return Err(ObjectiveError::BadSchedule(
                "total_steps_per_epoch must be >= 1".to_string(),
            ));
        }
        if self.n_epochs < 2 {
            return Err(ObjectiveError::BadSchedule("n_epochs must be >= 2".to_string()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 || self.beta > 1.0 {
            return Err(ObjectiveError::BadSchedule(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Last valid step index (`n_epochs * total_steps_per_epoch`).
    pub fn final_step(&self) -> u64 {
        self.n_epochs * self.total_steps_per_epoch
    }
}

/// Numerically stable `ln(1 + e^x)`: never exponentiates a positive argument.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Pairwise preference loss `−log σ(r⁺ − r⁻)` on a reward margin, computed as
/// `softplus(−(r⁺ − r⁻))`. Always ≥ 0; ln 2 at a zero margin.
pub fn bt_loss(rp: RewardPair) -> Result<f64, ObjectiveError> {
    if !rp.r_plus.is_finite() {
        return Err(ObjectiveError::NonFinite { name: "r_plus", value: rp.r_plus });
    }
    if !rp.r_minus.is_finite() {
        return Err(ObjectiveError::NonFinite { name: "r_minus", value: rp.r_minus });
    }
    Ok(softplus(-(rp.r_plus - rp.r_minus)))
}

/// Mean negative log-likelihood of the critiques attached to one response:
/// `−(1/K) Σ log q(z)` over the K critiques. Always ≥ 0.
pub fn critique_nll(lp: &CritiqueLogProbs) -> Result<f64, ObjectiveError> {
    if lp.per_critique_logq.is_empty() {
        return Err(ObjectiveError::EmptyCritiqueList);
    }
    let mut sum = 0.0;
    for (index, &value) in lp.per_critique_logq.iter().enumerate() {
        if !value.is_finite() || value > 0.0 {
            return Err(ObjectiveError::InvalidLogProb { index, value });
        }
        sum += value;
    }
    Ok(-(sum / lp.per_critique_logq.len() as f64))
}

/// Critique loss for a full comparison: the NLL of the chosen side's critiques
/// plus the NLL of the rejected side's.
pub fn critique_pair_loss(
    lp_plus: &CritiqueLogProbs,
    lp_minus: &CritiqueLogProbs,
) -> Result<f64, ObjectiveError> {
    Ok(critique_nll(lp_plus)? + critique_nll(lp_minus)?)
}

/// Critique weight at optimizer step `t` (1-based steps; 0 is the pre-training
/// boundary). The weight holds at 1 through the first `n_epochs − 1` epochs,
/// then decays linearly to `1 − beta` across the final epoch. The boundary
/// step `(n_epochs−1)·T` is assigned to the decaying branch, which evaluates
/// to exactly 1 there, so the schedule is continuous.
pub fn lambda_at(t: u64, p: &ScheduleParams) -> Result<f64, ObjectiveError> {
    p.validate()?;
    let max = p.final_step();
    if t > max {
        return Err(ObjectiveError::StepOutOfRange { t, max });
    }
    let decay_start = (p.n_epochs - 1) * p.total_steps_per_epoch;
    if t < decay_start {
        Ok(1.0)
    } else {
        Ok(1.0 - p.beta * ((t - decay_start) as f64) / (p.total_steps_per_epoch as f64))
    }
}

/// Convex combination `λ·l_c + (1−λ)·l_r`, arranged as `l_r + λ·(l_c − l_r)`
/// so that equal losses pass through unchanged for every λ.
pub fn combined_loss(l_c: f64, l_r: f64, lam: f64) -> Result<f64, ObjectiveError> {
    if !l_c.is_finite() {
        return Err(ObjectiveError::NonFinite { name: "l_c", value: l_c });
    }
    if !l_r.is_finite() {
        return Err(ObjectiveError::NonFinite { name: "l_r", value: l_r });
    }
    if !lam.is_finite() || !(0.0..=1.0).contains(&lam) {
        return Err(ObjectiveError::WeightOutOfRange(lam));
    }
    Ok(l_r + lam * (l_c - l_r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn pair(r_plus: f64, r_minus: f64) -> RewardPair {
        RewardPair { r_plus, r_minus }
    }

    #[test]
    fn bt_loss_zero_margin_is_ln_two() {
        assert!((bt_loss(pair(0.0, 0.0)).unwrap() - std::f64::consts::LN_2).abs() < TOL);
    }

    #[test]
    fn bt_loss_matches_direct_substitution() {
        // softplus(-2) = ln(1 + e^-2)
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((bt_loss(pair(1.0, -1.0)).unwrap() - expected).abs() < TOL);
        assert!((bt_loss(pair(1.0, -1.0)).unwrap() - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn bt_loss_is_stable_at_large_margins() {
        let tiny = bt_loss(pair(100.0, -100.0)).unwrap();
        assert!(tiny.is_finite() && (0.0..1e-80).contains(&tiny), "got {tiny}");
        let huge = bt_loss(pair(-100.0, 100.0)).unwrap();
        assert!(huge.is_finite() && (huge - 200.0).abs() < 1e-9, "got {huge}");
        assert!(bt_loss(pair(1e308, -1e308)).unwrap().is_finite());
    }

    #[test]
    fn bt_loss_rejects_non_finite() {
        assert!(bt_loss(pair(f64::NAN, 0.0)).is_err());
        assert!(bt_loss(pair(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn critique_nll_examples() {
        let nll = |v: Vec<f64>| critique_nll(&CritiqueLogProbs::new(v)).unwrap();
        assert!((nll(vec![-2.0]) - 2.0).abs() < TOL);
        assert!((nll(vec![-1.0, -3.0]) - 2.0).abs() < TOL);
        assert!((nll(vec![0.0, 0.0]) - 0.0).abs() < TOL);
    }

    #[test]
    fn critique_nll_rejects_empty_and_positive_entries() {
        assert_eq!(
            critique_nll(&CritiqueLogProbs::new(vec![])).unwrap_err(),
            ObjectiveError::EmptyCritiqueList
        );
        assert!(matches!(
            critique_nll(&CritiqueLogProbs::new(vec![-1.0, 0.5])).unwrap_err(),
            ObjectiveError::InvalidLogProb { index: 1, .. }
        ));
        assert!(critique_nll(&CritiqueLogProbs::new(vec![f64::NEG_INFINITY])).is_err());
    }

    #[test]
    fn critique_pair_loss_examples() {
        let lp = |v: Vec<f64>| CritiqueLogProbs::new(v);
        assert!((critique_pair_loss(&lp(vec![-2.0]), &lp(vec![-4.0])).unwrap() - 6.0).abs() < TOL);
        assert!((critique_pair_loss(&lp(vec![0.0]), &lp(vec![0.0])).unwrap() - 0.0).abs() < TOL);
        let mixed = critique_pair_loss(&lp(vec![-1.0, -3.0]), &lp(vec![-2.0, -2.0])).unwrap();
        assert!((mixed - 4.0).abs() < TOL);
    }

    #[test]
    fn schedule_params_validation() {
        assert!(ScheduleParams::new(100, 2, 0.9).is_ok());
        assert!(ScheduleParams::new(0, 2, 0.9).is_err());
        assert!(ScheduleParams::new(100, 1, 0.9).is_err());
        assert!(ScheduleParams::new(100, 2, 0.0).is_err());
        assert!(ScheduleParams::new(100, 2, 1.5).is_err());
        assert!(ScheduleParams::new(100, 2, 1.0).is_ok());
        assert!(ScheduleParams::new(100, 2, f64::NAN).is_err());
    }

    #[test]
    fn lambda_examples_match_closed_form() {
        let p = ScheduleParams::new(100, 2, 0.9).unwrap();
        assert_eq!(lambda_at(50, &p).unwrap(), 1.0);
        // Boundary step belongs to the decaying branch but still evaluates to 1.
        assert_eq!(lambda_at(100, &p).unwrap(), 1.0);
        let mid = lambda_at(150, &p).unwrap();
        assert_eq!(mid, 1.0 - 0.9 * 50.0 / 100.0);
        assert!((mid - 0.55).abs() < TOL);
        let end = lambda_at(200, &p).unwrap();
        assert_eq!(end, 1.0 - 0.9 * 100.0 / 100.0);
        assert!((end - 0.1).abs() < TOL);
    }

    #[test]
    fn lambda_rejects_steps_past_the_end() {
        let p = ScheduleParams::new(100, 2, 0.9).unwrap();
        assert!(lambda_at(0, &p).is_ok());
        assert!(matches!(
            lambda_at(201, &p).unwrap_err(),
            ObjectiveError::StepOutOfRange { t: 201, max: 200 }
        ));
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!((combined_loss(2.0, 4.0, 0.1).unwrap() - 3.8).abs() < TOL);
    }

    #[test]
    fn combined_loss_rejects_bad_weights() {
        assert!(combined_loss(1.0, 1.0, -0.01).is_err());
        assert!(combined_loss(1.0, 1.0, 1.01).is_err());
        assert!(combined_loss(1.0, 1.0, f64::NAN).is_err());
        assert!(combined_loss(f64::INFINITY, 1.0, 0.5).is_err());
    }

    #[test]
    fn ops_are_pure() {
        let p = ScheduleParams::new(7, 3, 0.4).unwrap();
        for t in 0..=p.final_step() {
            assert_eq!(
                lambda_at(t, &p).unwrap().to_bits(),
                lambda_at(t, &p).unwrap().to_bits()
            );
        }
        let a = bt_loss(pair(0.3, -1.7)).unwrap();
        let b = bt_loss(pair(0.3, -1.7)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    proptest! {
        #[test]
        fn bt_pair_sum_at_least_two_ln_two(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let sum = bt_loss(pair(a, b)).unwrap() + bt_loss(pair(b, a)).unwrap();
            prop_assert!(sum >= 2.0 * std::f64::consts::LN_2 - TOL);
        }

        #[test]
        fn bt_pair_sum_is_exactly_two_ln_two_only_on_the_diagonal(a in -50.0f64..50.0) {
            let sum = bt_loss(pair(a, a)).unwrap() + bt_loss(pair(a, a)).unwrap();
            prop_assert!((sum - 2.0 * std::f64::consts::LN_2).abs() < TOL);
        }

        #[test]
        fn bt_loss_strictly_decreasing_in_margin(base in -20.0f64..20.0, step in 0.001f64..5.0) {
            // Larger margin (r_plus - r_minus) must strictly lower the loss.
            let lo = bt_loss(pair(base, 0.0)).unwrap();
            let hi = bt_loss(pair(base + step, 0.0)).unwrap();
            prop_assert!(hi < lo, "loss must fall as the margin grows: {hi} !< {lo}");
        }

        #[test]
        fn lambda_is_non_increasing_and_bounded(
            t_steps in 1u64..50,
            epochs in 2u64..5,
            beta in 0.05f64..1.0,
        ) {
            let p = ScheduleParams::new(t_steps, epochs, beta).unwrap();
            let mut prev = f64::INFINITY;
            for t in 0..=p.final_step() {
                let lam = lambda_at(t, &p).unwrap();
                prop_assert!(lam <= prev + TOL);
                prop_assert!((1.0 - beta - TOL..=1.0 + TOL).contains(&lam));
                prev = lam;
            }
            prop_assert_eq!(lambda_at(0, &p).unwrap(), 1.0);
            let boundary = (epochs - 1) * t_steps;
            prop_assert_eq!(lambda_at(boundary, &p).unwrap(), 1.0);
            let end = lambda_at(p.final_step(), &p).unwrap();
            prop_assert!((end - (1.0 - beta)).abs() < TOL);
        }

        #[test]
        fn combined_loss_passes_equal_losses_through_exactly(
            x in -100.0f64..100.0,
            lam in 0.0f64..=1.0,
        ) {
            prop_assert_eq!(combined_loss(x, x, lam).unwrap(), x);
        }

        #[test]
        fn combined_loss_is_linear_in_each_argument(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
            delta in -10.0f64..10.0,
            lam in 0.0f64..=1.0,
        ) {
            let base = combined_loss(a, b, lam).unwrap();
            let bump_c = combined_loss(a + delta, b, lam).unwrap();
            prop_assert!((bump_c - base - lam * delta).abs() < 1e-9);
            let bump_r = combined_loss(a, b + delta, lam).unwrap();
            prop_assert!((bump_r - base - (1.0 - lam) * delta).abs() < 1e-9);
        }
    }
}
