//! The marginal-predicting adapter: a rectifier MLP mapping per-class
//! accuracies to next-round label marginals, its decayed replay buffer, and
//! the prior-correction rule that re-weights backbone posteriors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::simplex::{argmax, kl_divergence, softmax, ClassAccuracies, Marginals};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_DECAY: f64 = 0.995;

/// Feed-forward network `[K, H1, ..., K]` with rectifier hidden layers and a
/// softmax head. Parameters live in one flat vector, layer by layer, each
/// layer as its row-major weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr<S>", into = "MlpRepr<S>", bound = "S: Scalar")]
pub struct Mlp<S: Scalar> {
    layer_sizes: Vec<usize>,
    params: Vec<S>,
    optimizer: Adam<S>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct OptimizerRepr<S: Scalar> {
    beta1: S,
    beta2: S,
    eps: S,
    m: Vec<S>,
    v: Vec<S>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct MlpRepr<S: Scalar> {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<S>>,
    biases: Vec<Vec<S>>,
    optimizer_state: OptimizerRepr<S>,
    step: u64,
}

impl<S: Scalar> From<Mlp<S>> for MlpRepr<S> {
    fn from(net: Mlp<S>) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in net.layer_offsets() {
            weights.push(net.params[w.0..w.1].to_vec());
            biases.push(net.params[b.0..b.1].to_vec());
        }
        MlpRepr {
            layer_sizes: net.layer_sizes,
            weights,
            biases,
            optimizer_state: OptimizerRepr {
                beta1: net.optimizer.beta1,
                beta2: net.optimizer.beta2,
                eps: net.optimizer.eps,
                m: net.optimizer.m,
                v: net.optimizer.v,
            },
            step: net.optimizer.step,
        }
    }
}

impl<S: Scalar> TryFrom<MlpRepr<S>> for Mlp<S> {
    type Error = Error;
    fn try_from(r: MlpRepr<S>) -> Result<Self> {
        validate_sizes(&r.layer_sizes)?;
        let n_layers = r.layer_sizes.len() - 1;
        if r.weights.len() != n_layers || r.biases.len() != n_layers {
            return invalid("adapter layer count does not match layer_sizes");
        }
        let mut params = Vec::with_capacity(param_count(&r.layer_sizes));
        for (l, (w, b)) in r.weights.into_iter().zip(r.biases).enumerate() {
            let (fan_in, fan_out) = (r.layer_sizes[l], r.layer_sizes[l + 1]);
            if w.len() != fan_in * fan_out || b.len() != fan_out {
                return invalid(format!("adapter layer {l} has the wrong shape"));
            }
            params.extend(w);
            params.extend(b);
        }
        let n = params.len();
        if r.optimizer_state.m.len() != n || r.optimizer_state.v.len() != n {
            return invalid("optimizer state does not match parameter count");
        }
        Ok(Mlp {
            layer_sizes: r.layer_sizes,
            params,
            optimizer: Adam {
                beta1: r.optimizer_state.beta1,
                beta2: r.optimizer_state.beta2,
                eps: r.optimizer_state.eps,
                m: r.optimizer_state.m,
                v: r.optimizer_state.v,
                step: r.step,
            },
        })
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return invalid("adapter layer sizes must be positive with at least input and output");
    }
    if sizes[0] != sizes[sizes.len() - 1] {
        return invalid("adapter input and output widths must both equal K");
    }
    if sizes[0] < 2 {
        return invalid("adapter needs K >= 2");
    }
    Ok(())
}

/// `Σ (fan_in * fan_out + fan_out)` over consecutive layer pairs.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

/// Per-sample forward activations kept for backpropagation.
struct Trace<S> {
    /// Input followed by each hidden layer's post-activation output.
    activations: Vec<Vec<S>>,
    probs: Vec<S>,
}

impl<S: Scalar> Mlp<S> {
    /// Fan-in-scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn new(k: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(k);
        sizes.extend_from_slice(hidden);
        sizes.push(k);
        validate_sizes(&sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&sizes));
        for pair in sizes.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            for _ in 0..pair[0] * pair[1] {
                params.push(S::of(rng.random_range(-bound..bound)));
            }
            params.extend(std::iter::repeat_n(S::zero(), pair[1]));
        }
        let n = params.len();
        Ok(Self {
            layer_sizes: sizes,
            params,
            optimizer: Adam::new(n),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer.reset();
    }

    /// Zeroes the output layer so the network predicts uniform marginals.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = *self.layer_offsets().last().expect("at least one layer");
        self.params[w.0..b.1]
            .iter_mut()
            .for_each(|p| *p = S::zero());
    }

    /// `((weight_start, weight_end), (bias_start, bias_end))` per layer.
    fn layer_offsets(&self) -> Vec<((usize, usize), (usize, usize))> {
        let mut out = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut at = 0;
        for pair in self.layer_sizes.windows(2) {
            let w = (at, at + pair[0] * pair[1]);
            let b = (w.1, w.1 + pair[1]);
            at = b.1;
            out.push((w, b));
        }
        out
    }

    fn trace(&self, input: &[S]) -> Trace<S> {
        let offsets = self.layer_offsets();
        let last = offsets.len() - 1;
        let mut activations = vec![input.to_vec()];
        let mut logits = Vec::new();
        for (l, ((w0, _), (b0, _))) in offsets.into_iter().enumerate() {
            let fan_in = self.layer_sizes[l];
            let fan_out = self.layer_sizes[l + 1];
            let x = activations.last().expect("input present");
            let mut z = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &self.params[w0 + o * fan_in..w0 + (o + 1) * fan_in];
                z.push(self.params[b0 + o] + dot(row, x));
            }
            if l == last {
                logits = z;
            } else {
                z.iter_mut().for_each(|v| *v = v.max(S::zero()));
                activations.push(z);
            }
        }
        Trace {
            activations,
            probs: softmax(&logits),
        }
    }

    /// Predicted label marginals for a raw accuracy vector (no validation).
    pub fn forward_slice(&self, stat: &[S]) -> Vec<S> {
        self.trace(stat).probs
    }

    /// Predicted label marginals `T(S)`.
    pub fn forward(&self, stat: &ClassAccuracies<S>) -> Result<Marginals<S>> {
        if stat.len() != self.num_classes() {
            return invalid(format!(
                "statistic has length {}, adapter expects {}",
                stat.len(),
                self.num_classes()
            ));
        }
        Marginals::new(self.forward_slice(stat.as_slice()))
    }

    /// Accumulates `weight * ∇ KL(target ‖ T(stat))` into `grad` and returns
    /// the weighted loss.
    fn backprop(&self, stat: &[S], target: &[S], weight: S, grad: &mut [S]) -> S {
        let tr = self.trace(stat);
        let loss = weight * kl_divergence(target, &tr.probs);
        let target_mass: S = target.iter().copied().sum();
        // d KL / d logits = p * Σt - t
        let mut delta: Vec<S> = tr
            .probs
            .iter()
            .zip(target)
            .map(|(&p, &t)| weight * (p * target_mass - t))
            .collect();
        let offsets = self.layer_offsets();
        for l in (0..offsets.len()).rev() {
            let ((w0, _), (b0, _)) = offsets[l];
            let fan_in = self.layer_sizes[l];
            let input = &tr.activations[l];
            for (o, &d) in delta.iter().enumerate() {
                grad[b0 + o] = grad[b0 + o] + d;
                if d == S::zero() {
                    continue;
                }
                let grow = &mut grad[w0 + o * fan_in..w0 + (o + 1) * fan_in];
                for (g, &x) in grow.iter_mut().zip(input) {
                    *g = *g + d * x;
                }
            }
            if l == 0 {
                break;
            }
            // Propagate to the previous (rectified) activation.
            let mut prev = vec![S::zero(); fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == S::zero() {
                    continue;
                }
                let row = &self.params[w0 + o * fan_in..w0 + (o + 1) * fan_in];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p = *p + d * w;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= S::zero() {
                    *p = S::zero();
                }
            }
            delta = prev;
        }
        loss
    }

    /// Mean of `weight * KL(target ‖ T(stat))` over `batch`, with its exact
    /// gradient with respect to [`Mlp::params`].
    pub fn loss_and_grad(&self, batch: &[(&[S], &[S], S)]) -> (S, Vec<S>) {
        let mut grad = vec![S::zero(); self.params.len()];
        let loss = self.accumulate(batch, &mut grad);
        let n = S::of(batch.len().max(1) as f64);
        grad.iter_mut().for_each(|g| *g = *g / n);
        (loss / n, grad)
    }

    /// Adds the summed (unnormalized) batch gradient into `grad` and returns
    /// the summed loss.
    fn accumulate(&self, batch: &[(&[S], &[S], S)], grad: &mut [S]) -> S {
        let mut loss = S::zero();
        for (stat, target, weight) in batch {
            loss = loss + self.backprop(stat, target, *weight, grad);
        }
        loss
    }

    /// One optimizer step on a weighted batch. Returns the pre-step loss.
    pub fn train_batch(&mut self, batch: &[(&[S], &[S], S)], lr: S) -> S {
        let mut grad = vec![S::zero(); self.params.len()];
        self.step_with(batch, lr, &mut grad)
    }

    fn step_with(&mut self, batch: &[(&[S], &[S], S)], lr: S, grad: &mut [S]) -> S {
        grad.iter_mut().for_each(|g| *g = S::zero());
        let loss = self.accumulate(batch, grad);
        let n = S::of(batch.len().max(1) as f64);
        self.optimizer
            .update_scaled(&mut self.params, grad, S::one() / n, lr);
        loss / n
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `KL(target ‖ predicted)`.
pub fn kl_loss<S: Scalar>(predicted: &Marginals<S>, target: &Marginals<S>) -> S {
    kl_divergence(target.as_slice(), predicted.as_slice())
}

/// One `(S_{t-1}, Λ^{(t)})` observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Entry<S: Scalar> {
    pub stat: ClassAccuracies<S>,
    pub marginals: Marginals<S>,
    pub round: u64,
}

/// Ordered memory of observations, replayed with exponentially decayed
/// weights `decay^(current_round - round)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ReplayBuffer<S: Scalar> {
    entries: Vec<Entry<S>>,
    decay: S,
}

impl<S: Scalar> ReplayBuffer<S> {
    pub fn new(decay: S) -> Result<Self> {
        if !(decay > S::zero() && decay <= S::one()) {
            return invalid(format!("decay must lie in (0, 1], got {decay}"));
        }
        Ok(Self {
            entries: Vec::new(),
            decay,
        })
    }

    pub fn push(&mut self, entry: Entry<S>) -> Result<()> {
        if entry.stat.len() != entry.marginals.len() {
            return invalid("buffer entry statistic and marginals differ in length");
        }
        if let Some(last) = self.entries.last() {
            if entry.round <= last.round {
                return invalid(format!(
                    "buffer rounds must increase: {} after {}",
                    entry.round, last.round
                ));
            }
            if entry.stat.len() != last.stat.len() {
                return invalid("buffer entries must share K");
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[Entry<S>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn decay(&self) -> S {
        self.decay
    }

    pub fn weight(&self, entry: &Entry<S>, current_round: u64) -> S {
        let age = current_round.saturating_sub(entry.round);
        self.decay.powi(age.min(i32::MAX as u64) as i32)
    }

    /// Mean decayed loss of `net` over the whole buffer.
    pub fn decayed_loss(&self, net: &Mlp<S>, current_round: u64) -> S {
        if self.entries.is_empty() {
            return S::zero();
        }
        let total: S = self
            .entries
            .iter()
            .map(|e| {
                let p = net.forward_slice(e.stat.as_slice());
                self.weight(e, current_round) * kl_divergence(e.marginals.as_slice(), &p)
            })
            .sum();
        total / S::of(self.entries.len() as f64)
    }
}

/// How a replay pass walks the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassOptions {
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self {
            batch_size: 1,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassReport<S> {
    pub steps: usize,
    /// Mean pre-step batch loss over the pass.
    pub mean_loss: S,
    /// Set when the buffer was empty and nothing happened.
    pub skipped: bool,
}

/// Replays the buffer in insertion order, `opts.epochs` times, weighting
/// each entry by its decay factor.
pub fn train_pass<S: Scalar>(
    net: &mut Mlp<S>,
    buffer: &ReplayBuffer<S>,
    lr: S,
    current_round: u64,
    opts: PassOptions,
) -> Result<PassReport<S>> {
    if buffer.is_empty() {
        return Ok(PassReport {
            steps: 0,
            mean_loss: S::zero(),
            skipped: true,
        });
    }
    if opts.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    if buffer.entries[0].stat.len() != net.num_classes() {
        return invalid("buffer K does not match adapter K");
    }
    let mut steps = 0;
    let mut total = S::zero();
    let mut grad = vec![S::zero(); net.num_params()];
    for _ in 0..opts.epochs {
        for chunk in buffer.entries.chunks(opts.batch_size) {
            let batch: Vec<(&[S], &[S], S)> = chunk
                .iter()
                .map(|e| {
                    (
                        e.stat.as_slice(),
                        e.marginals.as_slice(),
                        buffer.weight(e, current_round),
                    )
                })
                .collect();
            total = total + net.step_with(&batch, lr, &mut grad);
            steps += 1;
        }
    }
    Ok(PassReport {
        steps,
        mean_loss: total / S::of(steps.max(1) as f64),
        skipped: false,
    })
}

/// Correction weights `λ_i = predicted_i / lambda_pre_i`. A class with zero
/// training prior gets weight zero unless it is predicted to appear.
pub fn correction_weights<S: Scalar>(
    lambda_pre: &Marginals<S>,
    predicted: &Marginals<S>,
) -> Result<Vec<S>> {
    if lambda_pre.len() != predicted.len() {
        return invalid("lambda_pre and predicted marginals differ in length");
    }
    lambda_pre
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .enumerate()
        .map(|(i, (&pre, &pred))| {
            if pre > S::zero() {
                Ok(pred / pre)
            } else if pred > S::zero() {
                Err(Error::ZeroPriorConflict {
                    class: i,
                    predicted: pred.as_f64(),
                })
            } else {
                Ok(S::zero())
            }
        })
        .collect()
}

/// Bayes prior correction of a backbone posterior: `w_i ∝ p_i · T(S)_i /
/// Λ^pre_i`, renormalized, with its argmax (lowest index on ties).
pub fn adjust_prediction<S: Scalar>(
    probs_pre: &Marginals<S>,
    lambda_pre: &Marginals<S>,
    predicted: &Marginals<S>,
) -> Result<(Marginals<S>, usize)> {
    if probs_pre.len() != lambda_pre.len() {
        return invalid("posterior and lambda_pre differ in length");
    }
    let w = correction_weights(lambda_pre, predicted)?;
    let weights: Vec<S> = probs_pre
        .as_slice()
        .iter()
        .zip(&w)
        .map(|(&p, &l)| p * l)
        .collect();
    let class = argmax(&weights);
    let adjusted = Marginals::from_weights(weights)
        .map_err(|_| Error::InvalidArgument("adjusted posterior has zero mass".into()))?;
    Ok((adjusted, class))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let big = Mlp::<f32>::new(100, &DEFAULT_HIDDEN, 0).unwrap();
        assert_eq!(big.num_params(), 117_348);
        let small = Mlp::<f64>::new(4, &[8, 8], 0).unwrap();
        assert_eq!(small.num_params(), 148);
        assert_eq!(param_count(&[4, 8, 8, 4]), 148);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::<f64>::new(5, &[7, 3], 42).unwrap();
        let b = Mlp::<f64>::new(5, &[7, 3], 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Mlp::<f64>::new(5, &[7, 3], 43).unwrap());
        assert!(Mlp::<f64>::new(1, &[4], 0).is_err());
        assert!(Mlp::<f64>::new(3, &[0], 0).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut net = Mlp::<f64>::new(4, &[8, 8], 1).unwrap();
        net.zero_output_layer();
        let out = net
            .forward(&ClassAccuracies::new(vec![0.1, 0.9, 0.5, 0.3]).unwrap())
            .unwrap();
        assert!(out.as_slice().iter().all(|p| (*p - 0.25).abs() < 1e-15));
        assert!(net
            .forward(&ClassAccuracies::new(vec![0.1, 0.9]).unwrap())
            .is_err());
    }

    #[test]
    fn adjustment_reference_arithmetic() {
        let pre = Marginals::<f64>::new(vec![0.5, 0.5]).unwrap();
        let pred = Marginals::new(vec![0.8, 0.2]).unwrap();
        let probs = Marginals::new(vec![0.4, 0.6]).unwrap();
        let (adj, class) = adjust_prediction(&probs, &pre, &pred).unwrap();
        assert_eq!(class, 0);
        assert!((adj[0] - 0.64 / 0.88).abs() < 1e-12);
        assert!((adj[0] - 0.7273).abs() < 1e-4);
        assert!((adj[1] - 0.2727).abs() < 1e-4);
    }

    #[test]
    fn identity_correction() {
        let pre = Marginals::<f64>::new(vec![0.2, 0.3, 0.5]).unwrap();
        let probs = Marginals::new(vec![0.1, 0.6, 0.3]).unwrap();
        let (adj, class) = adjust_prediction(&probs, &pre, &pre).unwrap();
        assert_eq!(class, 1);
        for (a, b) in adj.as_slice().iter().zip(probs.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_prior_conflict() {
        let pre = Marginals::new(vec![1.0, 0.0]).unwrap();
        let probs = Marginals::new(vec![0.5, 0.5]).unwrap();
        let err = adjust_prediction(&probs, &pre, &Marginals::uniform(2)).unwrap_err();
        assert!(matches!(err, Error::ZeroPriorConflict { class: 1, .. }));
        // No conflict when the unseen class is also predicted absent.
        let (_, c) = adjust_prediction(&probs, &pre, &Marginals::one_hot(2, 0)).unwrap();
        assert_eq!(c, 0);
    }

    #[test]
    fn buffer_rounds_must_increase() {
        let mut buf = ReplayBuffer::<f64>::new(0.995).unwrap();
        let e = |r| Entry {
            stat: ClassAccuracies::new(vec![0.5, 0.5]).unwrap(),
            marginals: Marginals::uniform(2),
            round: r,
        };
        buf.push(e(1)).unwrap();
        assert!(buf.push(e(1)).is_err());
        buf.push(e(3)).unwrap();
        assert!((buf.weight(&buf.entries()[0], 3) - 0.995f64.powi(2)).abs() < 1e-15);
        assert!(ReplayBuffer::<f64>::new(0.0).is_err());
        assert!(ReplayBuffer::<f64>::new(1.5).is_err());
    }

    #[test]
    fn empty_buffer_pass_is_flagged_noop() {
        let mut net = Mlp::<f64>::new(3, &[4], 0).unwrap();
        let before = net.clone();
        let buf = ReplayBuffer::new(0.9).unwrap();
        let rep = train_pass(&mut net, &buf, 1e-3, 5, PassOptions::default()).unwrap();
        assert!(rep.skipped);
        assert_eq!(net, before);
    }

    #[test]
    fn zero_lr_pass_keeps_parameters() {
        let mut net = Mlp::<f64>::new(3, &[6, 6], 2).unwrap();
        let mut buf = ReplayBuffer::new(0.995).unwrap();
        buf.push(Entry {
            stat: ClassAccuracies::new(vec![0.2, 0.7, 0.9]).unwrap(),
            marginals: Marginals::new(vec![0.5, 0.3, 0.2]).unwrap(),
            round: 1,
        })
        .unwrap();
        let before = net.params().to_vec();
        train_pass(&mut net, &buf, 0.0, 1, PassOptions::default()).unwrap();
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut net = Mlp::<f64>::new(3, &[5, 4], 9).unwrap();
        let stat = [0.3, 0.6, 0.9];
        let target = [0.6, 0.3, 0.1];
        net.train_batch(&[(&stat, &target, 1.0)], 1e-3);
        let s = serde_json::to_string(&net).unwrap();
        let back: Mlp<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, net);
        assert!(s.contains("\"layer_sizes\":[3,5,4,3]"));
        assert!(s.contains("\"step\":1"));
    }
}
