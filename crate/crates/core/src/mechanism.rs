//! The performative environment: the next round's label marginals are a
//! tempered softmax of the deployed rule's per-class accuracies.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DecisionRule};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::simplex::{ClassAccuracies, Marginals};
use crate::world::WorldSpec;
use crate::{LabelMarginals, SufficientStatistic};

/// Search bracket for `|tau|`.
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1e3;
pub const MAX_BISECTION_STEPS: usize = 60;
/// Default Monte-Carlo evaluation size during calibration.
pub const DEFAULT_CALIBRATION_N: usize = 2000;

/// `softmax(stat / tau)`. Negative `tau` shifts mass toward the classes the
/// deployed rule handles worst.
pub fn induced_marginals<S: Scalar>(stat: &ClassAccuracies<S>, tau: S) -> Result<Marginals<S>> {
    if tau == S::zero() || !tau.is_finite() {
        return invalid(format!("tau must be finite and nonzero, got {tau}"));
    }
    let logits: Vec<S> = stat.as_slice().iter().map(|&s| s / tau).collect();
    Ok(Marginals::from_logits(&logits))
}

/// Shift parameters. `domain_filter` restricts every round to a fixed
/// domain subset; `random_domain_subset = Some(m)` instead draws `m`
/// distinct domains afresh each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub tau: f64,
    #[serde(default)]
    pub target_drop: Option<f64>,
    #[serde(default)]
    pub domain_filter: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_domain_subset: Option<usize>,
}

impl ShiftConfig {
    pub fn new(tau: f64) -> Result<Self> {
        let cfg = Self {
            tau,
            target_drop: None,
            domain_filter: None,
            random_domain_subset: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0.0 || !self.tau.is_finite() {
            return invalid("tau must be finite and nonzero");
        }
        if let Some(d) = self.target_drop {
            if !(0.0..1.0).contains(&d) {
                return invalid(format!("target drop {d} outside [0, 1)"));
            }
        }
        if matches!(&self.domain_filter, Some(f) if f.is_empty()) {
            return invalid("domain filter must be nonempty");
        }
        if self.domain_filter.is_some() && self.random_domain_subset.is_some() {
            return invalid("fixed and random domain restriction are mutually exclusive");
        }
        if self.random_domain_subset == Some(0) {
            return invalid("random domain subset size must be positive");
        }
        Ok(())
    }

    /// Domain restriction for one round.
    pub fn draw_domain_filter<R: Rng + ?Sized>(
        &self,
        num_domains: usize,
        rng: &mut R,
    ) -> Result<Option<Vec<usize>>> {
        match (self.random_domain_subset, &self.domain_filter) {
            (Some(m), _) => {
                if m > num_domains {
                    return invalid(format!("cannot pick {m} of {num_domains} domains"));
                }
                let mut picked = sample_indices(rng, num_domains, m).into_vec();
                picked.sort_unstable();
                Ok(Some(picked))
            }
            (None, Some(f)) => Ok(Some(f.clone())),
            (None, None) => Ok(None),
        }
    }
}

/// The Markovian update `P_{t+1} = P(Y | S_t)`.
pub fn apply_shift(stat: &SufficientStatistic, config: &ShiftConfig) -> Result<LabelMarginals> {
    induced_marginals(stat, config.tau)
}

/// Outcome of [`calibrate_tau`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Adversarial (negative) temperature.
    pub tau: f64,
    /// Accuracy on the balanced calibration sample.
    pub baseline: f64,
    /// Drop measured at the returned `tau` during calibration.
    pub achieved_drop: f64,
    pub iterations: usize,
    pub statistic: SufficientStatistic,
}

/// Accuracy drop of `model` (plain argmax) when the class prior moves from
/// balanced to `induced_marginals(stat, -|tau|)`, estimated on a sample
/// drawn with `eval_seed`.
pub fn measured_drop(
    world: &WorldSpec,
    model: &Backbone,
    stat: &SufficientStatistic,
    baseline: f64,
    tau_magnitude: f64,
    n: usize,
    eval_seed: u64,
) -> Result<f64> {
    let marginals = induced_marginals(stat, -tau_magnitude.abs())?;
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let sample = world.sample_with_marginals(&marginals, n, None, &mut rng)?;
    Ok(baseline - model.accuracy(&DecisionRule::Argmax, &sample)?)
}

/// Balanced-sample statistic and accuracy of `model` under plain argmax.
pub fn balanced_evaluation(
    world: &WorldSpec,
    model: &Backbone,
    n: usize,
    seed: u64,
) -> Result<(SufficientStatistic, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = world.num_classes();
    let sample = world.sample_with_marginals(&LabelMarginals::uniform(k), n, None, &mut rng)?;
    let probs = model.predict_batch(&sample)?;
    let decisions = probs.decide(&DecisionRule::Argmax, &model.lambda_pre)?;
    let stat = crate::backbone::class_accuracies_from_decisions(
        k,
        sample.iter().map(|s| s.y),
        decisions.iter().copied(),
    )?;
    Ok((stat, crate::backbone::accuracy_of(&sample, &decisions)))
}

/// Finds the adversarial `tau < 0` whose induced shift lowers `model`'s
/// accuracy by `target_drop` relative to a balanced sample.
///
/// Bisection runs over `log|tau|` in `[TAU_MIN, TAU_MAX]`; every evaluation
/// reuses one seed so the drop curve is deterministic.
pub fn calibrate_tau(
    world: &WorldSpec,
    model: &Backbone,
    target_drop: f64,
    balanced_eval_n: usize,
    seed: u64,
) -> Result<Calibration> {
    if !(0.0..1.0).contains(&target_drop) {
        return invalid(format!("target drop {target_drop} outside [0, 1)"));
    }
    if balanced_eval_n == 0 {
        return invalid("calibration sample size must be positive");
    }
    let (stat, baseline) = balanced_evaluation(world, model, balanced_eval_n, seed)?;
    let eval_seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let drop_at = |mag: f64| {
        measured_drop(
            world,
            model,
            &stat,
            baseline,
            mag,
            balanced_eval_n,
            eval_seed,
        )
    };

    let min_drop = drop_at(TAU_MAX)?;
    if target_drop <= min_drop.max(0.0) {
        return Ok(Calibration {
            tau: -TAU_MAX,
            baseline,
            achieved_drop: min_drop,
            iterations: 1,
            statistic: stat,
        });
    }
    let max_drop = drop_at(TAU_MIN)?;
    if target_drop > max_drop {
        return Err(Error::CalibrationInfeasible {
            target: target_drop,
            min_drop,
            max_drop,
        });
    }

    // Drop decreases as |tau| grows.
    let (mut lo, mut hi) = (TAU_MIN.ln(), TAU_MAX.ln());
    let mut best = (TAU_MIN, max_drop);
    let mut iterations = 2;
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let mag = mid.exp();
        let d = drop_at(mag)?;
        iterations += 1;
        if (d - target_drop).abs() < (best.1 - target_drop).abs() {
            best = (mag, d);
        }
        if (d - target_drop).abs() < 1e-4 || hi - lo < 1e-9 {
            break;
        }
        if d > target_drop {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        tau: -best.0,
        baseline,
        achieved_drop: best.1,
        iterations,
        statistic: stat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(v: &[f64]) -> SufficientStatistic {
        SufficientStatistic::new(v.to_vec()).unwrap()
    }

    #[test]
    fn reference_values() {
        // Direct evaluation: exp(-3), exp(-2), exp(-1) normalized.
        let e: Vec<f64> = [-3.0f64, -2.0, -1.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let oracle: Vec<f64> = e.iter().map(|v| v / z).collect();
        let m = induced_marginals(&stat(&[0.9, 0.6, 0.3]), -0.3).unwrap();
        for (a, b) in m.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in m.as_slice().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }
        let r = induced_marginals(&stat(&[0.9, 0.6, 0.3]), 0.3).unwrap();
        for (a, b) in r.as_slice().iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_statistic_is_uniform() {
        for tau in [-0.01, -1.0, 0.5, 100.0] {
            let m = induced_marginals(&stat(&[0.7; 5]), tau).unwrap();
            assert!(m.as_slice().iter().all(|p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_tau_rejected() {
        assert!(induced_marginals(&stat(&[0.1, 0.2]), 0.0).is_err());
        assert!(ShiftConfig::new(0.0).is_err());
    }

    #[test]
    fn dominant_class_gets_least_mass() {
        let cfg = ShiftConfig::new(-0.2).unwrap();
        let m = apply_shift(&stat(&[0.5, 0.95, 0.6, 0.4]), &cfg).unwrap();
        let min = m.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(m[1], min);
        assert_eq!(m, apply_shift(&stat(&[0.5, 0.95, 0.6, 0.4]), &cfg).unwrap());
    }

    #[test]
    fn single_precision_matches() {
        let s = ClassAccuracies::<f32>::new(vec![0.9, 0.6, 0.3]).unwrap();
        let m = induced_marginals(&s, -0.3f32).unwrap();
        assert!((m[2] - 0.6652).abs() < 1e-4);
    }

    #[test]
    fn random_domain_subsets() {
        let cfg = ShiftConfig {
            random_domain_subset: Some(2),
            ..ShiftConfig::new(-0.5).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = cfg.draw_domain_filter(4, &mut rng).unwrap().unwrap();
            assert_eq!(f.len(), 2);
            assert!(f[0] < f[1] && f[1] < 4);
        }
        assert!(cfg.draw_domain_filter(1, &mut rng).is_err());
    }
}
