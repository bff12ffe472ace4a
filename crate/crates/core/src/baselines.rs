//! Comparison strategies: the frozen backbone, the true-marginal oracle,
//! oracle fine-tuning, and the adapter-corrected predictor.

use serde::{Deserialize, Serialize};

use crate::adapter::{adjust_prediction, DEFAULT_DECAY, DEFAULT_HIDDEN, DEFAULT_LR};
use crate::backbone::{
    class_accuracies_from_decisions, Backbone, DecisionRule, FinetuneScope, Posteriors,
    TrainOptions,
};
use crate::error::Result;
use crate::mechanism::{apply_shift, ShiftConfig};
use crate::simplex::kl_divergence;
use crate::world::LabeledSample;
use crate::{AdapterNet, LabelMarginals, SufficientStatistic};

pub const DEFAULT_FT_EPOCHS: usize = 25;
pub const DEFAULT_FT_LR: f64 = 0.05;

/// Adapter hyperparameters for the performativity-aware strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PapSettings {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    /// Keep the adapter fixed (no replay updates).
    pub freeze: bool,
    pub anticipation: Anticipation,
}

/// Which statistic the adapter is queried with when building the
/// deployed rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Anticipation {
    /// The statistic of the rule about to be deployed, measured on the
    /// current sample and solved jointly with the adapter's prediction.
    #[default]
    SelfConsistent,
    /// The statistic of the rule deployed in the previous round.
    PreviousStatistic,
}

impl Default for PapSettings {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            lr: DEFAULT_LR,
            decay: DEFAULT_DECAY,
            batch_size: 1,
            epochs_per_round: 1,
            freeze: false,
            anticipation: Anticipation::SelfConsistent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    NoAdaptation,
    OracleDistribution,
    OracleFinetune {
        epochs: usize,
        scope: FinetuneScope,
        lr: f64,
        batch_size: usize,
    },
    Pap(PapSettings),
}

impl Strategy {
    pub fn oracle_finetune(epochs: usize, scope: FinetuneScope) -> Self {
        Strategy::OracleFinetune {
            epochs,
            scope,
            lr: DEFAULT_FT_LR,
            batch_size: crate::backbone::DEFAULT_BATCH_SIZE,
        }
    }

    pub fn pap() -> Self {
        Strategy::Pap(PapSettings::default())
    }

    /// Short label used in file names and reports.
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::NoAdaptation => "none",
            Strategy::OracleDistribution => "oracle-dist",
            Strategy::OracleFinetune { .. } => "oracle-ft",
            Strategy::Pap(_) => "pap",
        }
    }
}

/// Plain argmax of the frozen backbone.
pub fn no_adaptation_decide(model: &Backbone, x: &[f64]) -> Result<usize> {
    model.decide(&DecisionRule::Argmax, x)
}

/// Prior correction toward the true upcoming marginals.
pub fn oracle_distribution_decide(
    model: &Backbone,
    x: &[f64],
    true_next_marginals: &LabelMarginals,
) -> Result<usize> {
    let probs = model.predict_probs(x)?;
    let (_, class) = adjust_prediction(&probs, &model.lambda_pre, true_next_marginals)?;
    Ok(class)
}

/// Refits a linear backbone on the current round's labelled sample.
pub fn oracle_finetune_step(
    model: &Backbone,
    round_samples: &[LabeledSample],
    epochs: usize,
    scope: FinetuneScope,
    lr: f64,
    opts: TrainOptions,
) -> Result<Backbone> {
    model.finetune_linear(round_samples, epochs, lr, scope, opts)
}

/// Prior correction toward the adapter's anticipated marginals `T(S_prev)`.
pub fn pap_decide(
    model: &Backbone,
    x: &[f64],
    net: &AdapterNet,
    stat_prev: &SufficientStatistic,
) -> Result<usize> {
    let predicted = net.forward(stat_prev)?;
    let probs = model.predict_probs(x)?;
    let (_, class) = adjust_prediction(&probs, &model.lambda_pre, &predicted)?;
    Ok(class)
}

/// Maximum number of damped iterations in [`self_consistent_marginals`].
pub const FIXED_POINT_ITERATIONS: usize = 200;

/// Marginals `Λ` that reproduce themselves under deployment: adjusting the
/// backbone toward `Λ` yields a statistic on `samples` that `predictor` maps
/// back to (as nearly as the finite sample allows) `Λ`.
///
/// Deploying a rule changes the distribution it will face, so the marginals
/// to correct for depend on the correction itself. This solves the loop by
/// damped iteration in log space, with a step that shrinks over time,
/// starting from `start`. Returns the iterate with
/// the smallest L1 residual.
pub fn self_consistent_marginals<F>(
    probs: &Posteriors,
    samples: &[LabeledSample],
    lambda_pre: &LabelMarginals,
    start: &LabelMarginals,
    mut predictor: F,
) -> Result<LabelMarginals>
where
    F: FnMut(&SufficientStatistic) -> Result<LabelMarginals>,
{
    let k = lambda_pre.len();
    let mut image = |m: &LabelMarginals| -> Result<LabelMarginals> {
        let decisions = probs.decide(&DecisionRule::Adjusted(m.clone()), lambda_pre)?;
        let stat = class_accuracies_from_decisions(k, samples.iter().map(|s| s.y), decisions)?;
        predictor(&stat)
    };
    let floor = 1e-300f64;
    let mut current = start.clone();
    let mut best: Option<(f64, LabelMarginals)> = None;
    for n in 0..FIXED_POINT_ITERATIONS {
        let damping = 0.5 / (1.0 + n as f64 / 10.0);
        let next = image(&current)?;
        let residual: f64 = next
            .as_slice()
            .iter()
            .zip(current.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, current.clone()));
        }
        if residual < 1e-9 {
            break;
        }
        let logits: Vec<f64> = current
            .as_slice()
            .iter()
            .zip(next.as_slice())
            .map(|(a, b)| (1.0 - damping) * a.max(floor).ln() + damping * b.max(floor).ln())
            .collect();
        current = LabelMarginals::from_logits(&logits);
    }
    Ok(best.expect("at least one iteration").1)
}

/// True upcoming marginals for the oracle: the self-consistent point of the
/// real shift mechanism.
pub fn oracle_next_marginals(
    probs: &Posteriors,
    samples: &[LabeledSample],
    lambda_pre: &LabelMarginals,
    shift: &ShiftConfig,
    start: &LabelMarginals,
) -> Result<LabelMarginals> {
    self_consistent_marginals(probs, samples, lambda_pre, start, |s| apply_shift(s, shift))
}

/// `KL(observed ‖ predicted)`, the adapter's anticipation error.
pub fn anticipation_error(observed: &LabelMarginals, predicted: &LabelMarginals) -> f64 {
    kl_divergence(observed.as_slice(), predicted.as_slice())
}
