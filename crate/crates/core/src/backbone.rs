//! Frozen pretrained classifiers: an exact Bayes oracle over a [`WorldSpec`]
//! (optionally with corrupted means) and a trainable linear-softmax model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::correction_weights;
use crate::error::{invalid, Error, Result};
use crate::simplex::{argmax, softmax};
use crate::world::{LabeledSample, WorldSpec};
use crate::{LabelMarginals, SufficientStatistic};

/// Accuracy assigned to a class that has no samples in the evaluation set.
pub const IMPUTED_ACCURACY: f64 = 0.5;

/// Default mini-batch size for linear training.
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case")]
pub enum Model {
    BayesOracle {
        world: WorldSpec,
        /// Per-component mean offsets, same layout as the world's means.
        corruption: Option<Vec<f64>>,
    },
    LinearSoftmax {
        k: usize,
        dim: usize,
        /// `k x dim`, row-major.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

/// A frozen classifier together with the label marginals of its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub id: String,
    pub lambda_pre: LabelMarginals,
    #[serde(flatten)]
    pub model: Model,
}

/// Which parameters fine-tuning may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    #[default]
    All,
    /// Refit only the bias, i.e. the class-prior term.
    LastBiasOnly,
}

/// How a backbone's posterior is turned into a class decision.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionRule {
    Argmax,
    /// Prior correction toward `predicted` marginals.
    Adjusted(LabelMarginals),
}

/// Row-major `n x k` block of posterior vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    k: usize,
    data: Vec<f64>,
}

impl Posteriors {
    /// Wraps row-major probability rows of width `k`.
    pub fn from_rows(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || !data.len().is_multiple_of(k) {
            return invalid("posterior rows must have width k");
        }
        Ok(Self { k, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Decisions under `rule` for every row.
    pub fn decide(&self, rule: &DecisionRule, lambda_pre: &LabelMarginals) -> Result<Vec<usize>> {
        match rule {
            DecisionRule::Argmax => Ok((0..self.len()).map(|i| argmax(self.row(i))).collect()),
            DecisionRule::Adjusted(predicted) => {
                let w = correction_weights(lambda_pre, predicted)?;
                let mut scratch = vec![0.0; self.k];
                Ok((0..self.len())
                    .map(|i| {
                        for ((s, p), wi) in scratch.iter_mut().zip(self.row(i)).zip(&w) {
                            *s = p * wi;
                        }
                        argmax(&scratch)
                    })
                    .collect())
            }
        }
    }
}

impl Backbone {
    pub fn bayes_oracle(
        id: impl Into<String>,
        world: WorldSpec,
        lambda_pre: LabelMarginals,
        corruption: Option<Vec<f64>>,
    ) -> Result<Self> {
        if lambda_pre.len() != world.num_classes() {
            return invalid("lambda_pre length does not match class count");
        }
        if let Some(c) = &corruption {
            if c.len() != world.means().len() || c.iter().any(|v| !v.is_finite()) {
                return invalid("corruption must hold one finite offset per mean coordinate");
            }
        }
        Ok(Self {
            id: id.into(),
            lambda_pre,
            model: Model::BayesOracle { world, corruption },
        })
    }

    /// Bayes oracle whose means are perturbed by `scale * N(0, I)` offsets.
    pub fn corrupted_oracle(
        id: impl Into<String>,
        world: WorldSpec,
        lambda_pre: LabelMarginals,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return invalid("corruption scale must be nonnegative");
        }
        let corruption = if scale == 0.0 {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(
                (0..world.means().len())
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        };
        Self::bayes_oracle(id, world, lambda_pre, corruption)
    }

    pub fn linear(
        id: impl Into<String>,
        k: usize,
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        lambda_pre: LabelMarginals,
    ) -> Result<Self> {
        if k < 2 || dim == 0 {
            return invalid("linear model needs k >= 2 and dim >= 1");
        }
        if weights.len() != k * dim || bias.len() != k || lambda_pre.len() != k {
            return invalid("linear model parameter shapes do not match k and dim");
        }
        Ok(Self {
            id: id.into(),
            lambda_pre,
            model: Model::LinearSoftmax {
                k,
                dim,
                weights,
                bias,
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.lambda_pre.len()
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            Model::BayesOracle { world, .. } => world.dim(),
            Model::LinearSoftmax { dim, .. } => *dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.model {
            Model::BayesOracle { .. } => "bayes_oracle",
            Model::LinearSoftmax { .. } => "linear_softmax",
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return invalid(format!(
                "feature vector has dimension {}, model expects {}",
                x.len(),
                self.dim()
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("feature vector must be finite");
        }
        Ok(())
    }

    fn logits_into(&self, x: &[f64], out: &mut Vec<f64>) {
        match &self.model {
            Model::BayesOracle { world, corruption } => {
                world.log_joint(
                    self.lambda_pre.as_slice(),
                    x,
                    world.domain_weights(),
                    corruption.as_deref(),
                    out,
                );
            }
            Model::LinearSoftmax {
                k,
                dim,
                weights,
                bias,
            } => {
                out.clear();
                for c in 0..*k {
                    let row = &weights[c * dim..(c + 1) * dim];
                    out.push(bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
                }
            }
        }
    }

    /// Posterior probability vector for one input.
    pub fn predict_probs(&self, x: &[f64]) -> Result<LabelMarginals> {
        self.check_dim(x)?;
        let mut logits = Vec::with_capacity(self.num_classes());
        self.logits_into(x, &mut logits);
        Ok(LabelMarginals::from_logits(&logits))
    }

    /// Posteriors for a whole sample.
    pub fn predict_batch(&self, samples: &[LabeledSample]) -> Result<Posteriors> {
        let k = self.num_classes();
        let mut data = Vec::with_capacity(samples.len() * k);
        let mut logits = Vec::with_capacity(k);
        for s in samples {
            self.check_dim(&s.x)?;
            self.logits_into(&s.x, &mut logits);
            data.extend(softmax(&logits));
        }
        Ok(Posteriors { k, data })
    }

    pub fn decide(&self, rule: &DecisionRule, x: &[f64]) -> Result<usize> {
        let p = self.predict_probs(x)?;
        match rule {
            DecisionRule::Argmax => Ok(p.argmax()),
            DecisionRule::Adjusted(predicted) => {
                let w = correction_weights(&self.lambda_pre, predicted)?;
                let scores: Vec<f64> = p.as_slice().iter().zip(&w).map(|(a, b)| a * b).collect();
                Ok(argmax(&scores))
            }
        }
    }

    /// Per-class accuracies of `rule` applied to this model on `samples`.
    pub fn class_accuracies(
        &self,
        rule: &DecisionRule,
        samples: &[LabeledSample],
    ) -> Result<SufficientStatistic> {
        let probs = self.predict_batch(samples)?;
        let decisions = probs.decide(rule, &self.lambda_pre)?;
        class_accuracies_from_decisions(self.num_classes(), samples.iter().map(|s| s.y), decisions)
    }

    /// Overall fraction of correct decisions.
    pub fn accuracy(&self, rule: &DecisionRule, samples: &[LabeledSample]) -> Result<f64> {
        let probs = self.predict_batch(samples)?;
        let decisions = probs.decide(rule, &self.lambda_pre)?;
        Ok(accuracy_of(samples, &decisions))
    }

    fn linear_parts(&self) -> Result<(usize, usize, &[f64], &[f64])> {
        match &self.model {
            Model::LinearSoftmax {
                k,
                dim,
                weights,
                bias,
            } => Ok((*k, *dim, weights, bias)),
            Model::BayesOracle { .. } => Err(Error::Unsupported(
                "the Bayes oracle backbone has no trainable parameters".into(),
            )),
        }
    }

    /// Continues gradient training on `samples`, returning a new backbone.
    /// `lambda_pre` is carried over unchanged.
    pub fn finetune_linear(
        &self,
        samples: &[LabeledSample],
        epochs: usize,
        lr: f64,
        scope: FinetuneScope,
        opts: TrainOptions,
    ) -> Result<Backbone> {
        let (k, dim, weights, bias) = self.linear_parts()?;
        if epochs == 0 {
            return Ok(self.clone());
        }
        if samples.is_empty() {
            return invalid("cannot fine-tune on an empty sample");
        }
        let mut w = weights.to_vec();
        let mut b = bias.to_vec();
        sgd_epochs(k, dim, &mut w, &mut b, samples, epochs, lr, scope, opts)?;
        Backbone::linear(self.id.clone(), k, dim, w, b, self.lambda_pre.clone())
    }
}

pub fn accuracy_of(samples: &[LabeledSample], decisions: &[usize]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .zip(decisions)
        .filter(|(s, d)| s.y == **d)
        .count();
    hits as f64 / samples.len() as f64
}

/// `acc[i] = #(y = i and decision = i) / #(y = i)`; classes with no
/// samples get [`IMPUTED_ACCURACY`] and are flagged.
pub fn class_accuracies_from_decisions(
    k: usize,
    labels: impl IntoIterator<Item = usize>,
    decisions: impl IntoIterator<Item = usize>,
) -> Result<SufficientStatistic> {
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (y, d) in labels.into_iter().zip(decisions) {
        if y >= k {
            return invalid(format!("label {y} out of range"));
        }
        totals[y] += 1;
        if y == d {
            hits[y] += 1;
        }
    }
    let mut imputed = Vec::new();
    let acc = (0..k)
        .map(|i| {
            if totals[i] == 0 {
                imputed.push(i);
                IMPUTED_ACCURACY
            } else {
                hits[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    SufficientStatistic::with_imputed(acc, imputed)
}

/// Mini-batch gradient-descent settings for linear training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression from zero initialization.
/// `lambda_pre` is the empirical class frequency of `samples`.
pub fn train_linear(
    id: impl Into<String>,
    k: usize,
    samples: &[LabeledSample],
    epochs: usize,
    lr: f64,
    opts: TrainOptions,
) -> Result<Backbone> {
    if samples.is_empty() {
        return invalid("cannot train on an empty sample");
    }
    if k < 2 {
        return invalid("need at least 2 classes");
    }
    let dim = samples[0].x.len();
    if dim == 0 || samples.iter().any(|s| s.x.len() != dim) {
        return invalid("samples must share a positive feature dimension");
    }
    let lambda_pre = LabelMarginals::empirical(k, samples.iter().map(|s| s.y))?;
    let mut w = vec![0.0; k * dim];
    let mut b = vec![0.0; k];
    sgd_epochs(
        k,
        dim,
        &mut w,
        &mut b,
        samples,
        epochs,
        lr,
        FinetuneScope::All,
        opts,
    )?;
    Backbone::linear(id, k, dim, w, b, lambda_pre)
}

#[allow(clippy::too_many_arguments)]
fn sgd_epochs(
    k: usize,
    dim: usize,
    w: &mut [f64],
    b: &mut [f64],
    samples: &[LabeledSample],
    epochs: usize,
    lr: f64,
    scope: FinetuneScope,
    opts: TrainOptions,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return invalid("learning rate must be nonnegative and finite");
    }
    if opts.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    if samples.iter().any(|s| s.x.len() != dim || s.y >= k) {
        return invalid("sample shape does not match the model");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut gw = vec![0.0; k * dim];
    let mut gb = vec![0.0; k];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let refs = batch.iter().map(|&i| &samples[i]);
            cross_entropy_grad(k, dim, w, b, refs, &mut gw, &mut gb);
            let scale = lr / batch.len() as f64;
            if scope == FinetuneScope::All {
                w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= scale * g);
            }
            b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= scale * g);
        }
    }
    Ok(())
}

/// Summed cross-entropy over `samples` and its gradient (also summed).
fn cross_entropy_grad<'a>(
    k: usize,
    dim: usize,
    w: &[f64],
    b: &[f64],
    samples: impl Iterator<Item = &'a LabeledSample>,
    gw: &mut [f64],
    gb: &mut [f64],
) -> f64 {
    gw.iter_mut().for_each(|g| *g = 0.0);
    gb.iter_mut().for_each(|g| *g = 0.0);
    let mut logits = vec![0.0; k];
    let mut loss = 0.0;
    for s in samples {
        for c in 0..k {
            let row = &w[c * dim..(c + 1) * dim];
            logits[c] = b[c] + row.iter().zip(&s.x).map(|(a, v)| a * v).sum::<f64>();
        }
        let p = softmax(&logits);
        loss -= p[s.y].max(f64::MIN_POSITIVE).ln();
        for c in 0..k {
            let delta = p[c] - if c == s.y { 1.0 } else { 0.0 };
            gb[c] += delta;
            let grow = &mut gw[c * dim..(c + 1) * dim];
            grow.iter_mut().zip(&s.x).for_each(|(g, v)| *g += delta * v);
        }
    }
    loss
}

/// Mean cross-entropy of a linear-softmax model on `samples` and its
/// gradient with respect to `(weights, bias)`.
pub fn linear_loss_and_grad(
    k: usize,
    dim: usize,
    weights: &[f64],
    bias: &[f64],
    samples: &[LabeledSample],
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; k * dim];
    let mut gb = vec![0.0; k];
    let n = samples.len().max(1) as f64;
    let loss = cross_entropy_grad(k, dim, weights, bias, samples.iter(), &mut gw, &mut gb);
    gw.iter_mut().for_each(|g| *g /= n);
    gb.iter_mut().for_each(|g| *g /= n);
    (loss / n, gw, gb)
}
