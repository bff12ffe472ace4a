//! The retraining loop: deploy, observe the induced distribution, update
//! the adapter, anticipate, redeploy. Also pre-deployment anticipation and
//! candidate ranking.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{train_pass, PassOptions};
use crate::backbone::{accuracy_of, class_accuracies_from_decisions, DecisionRule, TrainOptions};
use crate::baselines::{oracle_next_marginals, self_consistent_marginals, Anticipation, Strategy};
use crate::error::{invalid, Error, Result};
use crate::mechanism::{apply_shift, induced_marginals, ShiftConfig};
use crate::scalar::Scalar;
use crate::simplex::{kl_divergence, ClassAccuracies};
use crate::world::{dirichlet_marginals, LabeledSample, WorldSpec};
use crate::{AdapterNet, Backbone, BufferEntry, LabelMarginals, MemoryBuffer, SufficientStatistic};

pub const DEFAULT_ROUNDS: usize = 200;
pub const DEFAULT_TRAIN_N: usize = 1000;
pub const DEFAULT_TEST_N: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 100.0;

const ADAPTER_SEED_SALT: u64 = 0x5eed_ada9_7e40_0001;

pub const CSV_HEADER: [&str; 7] = [
    "round",
    "model_id",
    "acc",
    "adapter_kl",
    "true_marginals",
    "pred_marginals",
    "stat",
];

/// Everything one trajectory needs besides the world and initial backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub shift: ShiftConfig,
    pub strategy: Strategy,
    pub rounds: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Backbones swapped in at the start of the given round.
    #[serde(default)]
    pub switch_schedule: Vec<(usize, Backbone)>,
}

impl TrajectoryConfig {
    pub fn new(shift: ShiftConfig, strategy: Strategy, seed: u64) -> Self {
        Self {
            shift,
            strategy,
            rounds: DEFAULT_ROUNDS,
            train_n: DEFAULT_TRAIN_N,
            test_n: DEFAULT_TEST_N,
            alpha: DEFAULT_ALPHA,
            seed,
            switch_schedule: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        if self.rounds == 0 {
            return invalid("need at least one round");
        }
        if self.train_n == 0 || self.test_n == 0 {
            return invalid("per-round sample sizes must be positive");
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return invalid("Dirichlet alpha must be positive");
        }
        Ok(())
    }
}

/// One round of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub round: usize,
    pub model_id: String,
    pub stat: SufficientStatistic,
    /// Empirical class frequencies of the round's drawn sample.
    pub true_marginals: LabelMarginals,
    pub predicted_marginals: Option<LabelMarginals>,
    /// Accuracy of the deployed rule on a fresh sample of the distribution
    /// it induces.
    pub accuracy: f64,
    /// `KL(true_marginals ‖ T(S_{t-1}))` before this round's update.
    pub adapter_kl: Option<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Serializable state of a trajectory between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub world: WorldSpec,
    pub backbone: Backbone,
    pub adapter: Option<AdapterNet>,
    pub buffer: Option<MemoryBuffer>,
    /// Class marginals of the upcoming round's distribution.
    pub marginals: LabelMarginals,
    /// Statistic of the rule deployed in the last completed round.
    pub stat: SufficientStatistic,
    /// Last completed round.
    pub round: usize,
    /// Domain restriction of the upcoming round.
    pub domain_filter: Option<Vec<usize>>,
    pub rng_state: ChaCha8Rng,
}

/// A trajectory that stopped early; `records` holds the rounds that did
/// complete.
#[derive(Debug, Clone, thiserror::Error)]
#[error("trajectory aborted after {} rounds: {source}", records.len())]
pub struct PartialTrajectory {
    pub records: Vec<TrajectoryRecord>,
    pub source: Error,
}

fn round_seed(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.random()
}

impl TrajectoryState {
    /// Round 0: deploys the pretrained backbone on a near-balanced
    /// Dirichlet(alpha) prior and records its accuracy there.
    pub fn init(
        world: WorldSpec,
        backbone: Backbone,
        config: &TrajectoryConfig,
        adapter: Option<AdapterNet>,
    ) -> Result<(Self, TrajectoryRecord)> {
        config.validate()?;
        let k = world.num_classes();
        if backbone.num_classes() != k || backbone.dim() != world.dim() {
            return invalid("backbone shape does not match the world");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (adapter, buffer) = match &config.strategy {
            Strategy::Pap(p) => {
                let net = match adapter {
                    Some(net) => {
                        if net.num_classes() != k {
                            return invalid("adapter K does not match the world");
                        }
                        net
                    }
                    None => AdapterNet::new(k, &p.hidden, config.seed ^ ADAPTER_SEED_SALT)?,
                };
                (Some(net), Some(MemoryBuffer::new(p.decay)?))
            }
            _ => (None, None),
        };
        let initial = dirichlet_marginals(k, config.alpha, &mut rng)?;
        let filter = config
            .shift
            .draw_domain_filter(world.num_domains(), &mut rng)?;
        let train =
            world.sample_with_marginals(&initial, config.train_n, filter.as_deref(), &mut rng)?;
        let test =
            world.sample_with_marginals(&initial, config.test_n, filter.as_deref(), &mut rng)?;
        let stat = backbone.class_accuracies(&DecisionRule::Argmax, &train)?;
        let accuracy = backbone.accuracy(&DecisionRule::Argmax, &test)?;
        let record = TrajectoryRecord {
            round: 0,
            model_id: backbone.id.clone(),
            true_marginals: LabelMarginals::empirical(k, train.iter().map(|s| s.y))?,
            predicted_marginals: None,
            accuracy,
            adapter_kl: None,
            notes: imputation_notes(&stat),
            stat: stat.clone(),
        };
        let marginals = apply_shift(&stat, &config.shift)?;
        let domain_filter = config
            .shift
            .draw_domain_filter(world.num_domains(), &mut rng)?;
        Ok((
            Self {
                world,
                backbone,
                adapter,
                buffer,
                marginals,
                stat,
                round: 0,
                domain_filter,
                rng_state: rng,
            },
            record,
        ))
    }

    /// Replaces the deployed backbone; adapter and buffer are untouched.
    pub fn switch_backbone(&mut self, new_model: Backbone) -> Result<()> {
        if new_model.num_classes() != self.world.num_classes() {
            return invalid(format!(
                "switched backbone has {} classes, world has {}",
                new_model.num_classes(),
                self.world.num_classes()
            ));
        }
        if new_model.dim() != self.world.dim() {
            return invalid("switched backbone feature dimension does not match the world");
        }
        self.backbone = new_model;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plays round `self.round + 1`.
    pub fn run_round(&mut self, config: &TrajectoryConfig) -> Result<TrajectoryRecord> {
        let t = self.round + 1;
        for (at, model) in &config.switch_schedule {
            if *at == t {
                self.switch_backbone(model.clone())?;
            }
        }
        let k = self.world.num_classes();
        let mut notes = Vec::new();
        let train = self.world.sample_with_marginals(
            &self.marginals,
            config.train_n,
            self.domain_filter.as_deref(),
            &mut self.rng_state,
        )?;
        let observed = LabelMarginals::empirical(k, train.iter().map(|s| s.y))?;

        let mut adapter_kl = None;
        let mut predicted = None;
        let rule = match &config.strategy {
            Strategy::NoAdaptation => DecisionRule::Argmax,
            Strategy::OracleFinetune {
                epochs,
                scope,
                lr,
                batch_size,
            } => {
                let opts = TrainOptions {
                    batch_size: *batch_size,
                    seed: round_seed(&mut self.rng_state),
                };
                self.backbone = self
                    .backbone
                    .finetune_linear(&train, *epochs, *lr, *scope, opts)?;
                DecisionRule::Argmax
            }
            Strategy::OracleDistribution => {
                let probs = self.backbone.predict_batch(&train)?;
                let m = oracle_next_marginals(
                    &probs,
                    &train,
                    &self.backbone.lambda_pre,
                    &config.shift,
                    &self.marginals,
                )?;
                DecisionRule::Adjusted(m)
            }
            Strategy::Pap(settings) => {
                let (Some(net), Some(buffer)) = (self.adapter.as_mut(), self.buffer.as_mut())
                else {
                    return invalid("adapter strategy without adapter state");
                };
                let anticipated = net.forward(&self.stat)?;
                adapter_kl = Some(kl_divergence(observed.as_slice(), anticipated.as_slice()));
                buffer.push(BufferEntry {
                    stat: self.stat.clone(),
                    marginals: observed.clone(),
                    round: t as u64,
                })?;
                if !settings.freeze {
                    let opts = PassOptions {
                        batch_size: settings.batch_size,
                        epochs: settings.epochs_per_round,
                    };
                    train_pass(net, buffer, settings.lr, t as u64, opts)?;
                }
                let previous = net.forward(&self.stat)?;
                let m = match settings.anticipation {
                    Anticipation::PreviousStatistic => previous,
                    Anticipation::SelfConsistent => {
                        let net = &*net;
                        let probs = self.backbone.predict_batch(&train)?;
                        self_consistent_marginals(
                            &probs,
                            &train,
                            &self.backbone.lambda_pre,
                            &previous,
                            |s| net.forward(s),
                        )?
                    }
                };
                predicted = Some(m.clone());
                DecisionRule::Adjusted(m)
            }
        };

        let probs = self.backbone.predict_batch(&train)?;
        let decisions = probs.decide(&rule, &self.backbone.lambda_pre)?;
        let stat = class_accuracies_from_decisions(k, train.iter().map(|s| s.y), decisions)?;
        notes.extend(imputation_notes(&stat));
        let next_marginals = apply_shift(&stat, &config.shift)?;
        let next_filter = config
            .shift
            .draw_domain_filter(self.world.num_domains(), &mut self.rng_state)?;
        let test = self.world.sample_with_marginals(
            &next_marginals,
            config.test_n,
            next_filter.as_deref(),
            &mut self.rng_state,
        )?;
        let test_probs = self.backbone.predict_batch(&test)?;
        let test_decisions = test_probs.decide(&rule, &self.backbone.lambda_pre)?;
        let accuracy = accuracy_of(&test, &test_decisions);

        self.marginals = next_marginals;
        self.domain_filter = next_filter;
        self.stat = stat.clone();
        self.round = t;
        Ok(TrajectoryRecord {
            round: t,
            model_id: self.backbone.id.clone(),
            stat,
            true_marginals: observed,
            predicted_marginals: predicted,
            accuracy,
            adapter_kl,
            notes,
        })
    }
}

fn imputation_notes(stat: &SufficientStatistic) -> Vec<String> {
    stat.imputed()
        .iter()
        .map(|c| format!("imputed_class_{c}"))
        .collect()
}

/// Runs `config.rounds` rounds (round 0 included) and returns the log
/// together with the final state.
pub fn run_trajectory_with_state(
    world: WorldSpec,
    backbone: Backbone,
    config: &TrajectoryConfig,
    adapter: Option<AdapterNet>,
) -> std::result::Result<(Vec<TrajectoryRecord>, TrajectoryState), PartialTrajectory> {
    let (mut state, first) =
        TrajectoryState::init(world, backbone, config, adapter).map_err(|source| {
            PartialTrajectory {
                records: Vec::new(),
                source,
            }
        })?;
    let mut records = Vec::with_capacity(config.rounds);
    records.push(first);
    continue_trajectory(&mut state, config, &mut records)?;
    Ok((records, state))
}

/// Plays rounds until `records` reaches `config.rounds`.
pub fn continue_trajectory(
    state: &mut TrajectoryState,
    config: &TrajectoryConfig,
    records: &mut Vec<TrajectoryRecord>,
) -> std::result::Result<(), PartialTrajectory> {
    while state.round + 1 < config.rounds {
        match state.run_round(config) {
            Ok(r) => records.push(r),
            Err(source) => {
                return Err(PartialTrajectory {
                    records: std::mem::take(records),
                    source,
                })
            }
        }
    }
    Ok(())
}

pub fn run_trajectory(
    world: WorldSpec,
    backbone: Backbone,
    config: &TrajectoryConfig,
) -> std::result::Result<Vec<TrajectoryRecord>, PartialTrajectory> {
    run_trajectory_with_state(world, backbone, config, None).map(|(r, _)| r)
}

/// Formats `x` with 10 significant digits in positional notation.
pub fn format_sig10(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() {
            "0".into()
        } else {
            x.to_string()
        };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (9 - magnitude).clamp(0, 340) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding may carry into a new leading digit (9.9999999996 -> 10.000000000).
    let digits = s.chars().filter(|c| c.is_ascii_digit()).count();
    let leading_zeros = s
        .trim_start_matches('-')
        .chars()
        .take_while(|c| *c == '0' || *c == '.')
        .filter(|c| *c == '0')
        .count();
    if digits - leading_zeros > 10 && decimals > 0 {
        let decimals = decimals - 1;
        return format!("{x:.decimals$}");
    }
    s
}

fn join_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format_sig10(*x))
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes the trajectory log as CSV with vectors joined by `;`.
pub fn write_csv<W: Write>(records: &[TrajectoryRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.model_id.clone(),
            format_sig10(r.accuracy),
            r.adapter_kl.map(format_sig10).unwrap_or_default(),
            join_vec(r.true_marginals.as_slice()),
            r.predicted_marginals
                .as_ref()
                .map(|m| join_vec(m.as_slice()))
                .unwrap_or_default(),
            join_vec(r.stat.as_slice()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[TrajectoryRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

/// Mean accuracy over records with `round` in `[from, to]`.
pub fn mean_accuracy(records: &[TrajectoryRecord], from: usize, to: usize) -> Option<f64> {
    let sel: Vec<f64> = records
        .iter()
        .filter(|r| r.round >= from && r.round <= to)
        .map(|r| r.accuracy)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// Anticipated post-deployment accuracy `Σ_i T(stat)_i · acc_i`.
pub fn anticipate_accuracy<S: Scalar>(
    net: &crate::adapter::Mlp<S>,
    stat: &ClassAccuracies<S>,
    candidate_class_accs: &ClassAccuracies<S>,
) -> Result<S> {
    if candidate_class_accs.len() != stat.len() {
        return invalid("statistic and candidate accuracies differ in length");
    }
    let predicted = net.forward(stat)?;
    Ok(predicted
        .as_slice()
        .iter()
        .zip(candidate_class_accs.as_slice())
        .map(|(&p, &a)| p * a)
        .sum())
}

/// Pre-deployment view of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEstimate {
    pub id: String,
    /// Accuracy on the current sample.
    pub current_accuracy: f64,
    /// Anticipated accuracy after deployment.
    pub estimate: f64,
    pub class_accuracies: SufficientStatistic,
}

/// Scores each candidate by its anticipated post-deployment accuracy and
/// sorts descending (ties by id).
pub fn rank_candidates(
    net: &AdapterNet,
    current_samples: &[LabeledSample],
    candidates: &[Backbone],
) -> Result<Vec<CandidateEstimate>> {
    if candidates.len() < 2 {
        return invalid("ranking needs at least two candidates");
    }
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let probs = c.predict_batch(current_samples)?;
        let decisions = probs.decide(&DecisionRule::Argmax, &c.lambda_pre)?;
        let accs = class_accuracies_from_decisions(
            c.num_classes(),
            current_samples.iter().map(|s| s.y),
            decisions.iter().copied(),
        )?;
        let estimate = anticipate_accuracy(net, &accs, &accs)?;
        out.push(CandidateEstimate {
            id: c.id.clone(),
            current_accuracy: accuracy_of(current_samples, &decisions),
            estimate,
            class_accuracies: accs,
        });
    }
    out.sort_by(|a, b| {
        b.estimate
            .total_cmp(&a.estimate)
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(out)
}

/// Simulated accuracy of `candidate` (plain argmax) after the shift its
/// statistic induces, on a fresh sample of size `n`.
pub fn post_deployment_accuracy(
    world: &WorldSpec,
    candidate: &Backbone,
    stat: &SufficientStatistic,
    shift: &ShiftConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let marginals = induced_marginals(stat, shift.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample =
        world.sample_with_marginals(&marginals, n, shift.domain_filter.as_deref(), &mut rng)?;
    candidate.accuracy(&DecisionRule::Argmax, &sample)
}
