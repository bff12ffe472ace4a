//! Probability vectors on the simplex and the numerics around them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

fn sum_tolerance<S: Scalar>(len: usize) -> S {
    let eps = S::epsilon() * S::of(8.0 * len.max(1) as f64);
    eps.max(S::of(1e-9))
}

/// Label marginals: a probability vector over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<S>", into = "Vec<S>", bound = "S: Scalar")]
pub struct Marginals<S: Scalar> {
    probs: Vec<S>,
}

impl<S: Scalar> Marginals<S> {
    /// Validates nonnegativity and unit mass.
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return invalid("marginals must be nonempty");
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < S::zero()) {
            return invalid(format!("marginal entry {p} is negative or non-finite"));
        }
        let total: S = probs.iter().copied().sum();
        if (total - S::one()).abs() > sum_tolerance::<S>(probs.len()) {
            return invalid(format!("marginals sum to {total}, expected 1"));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights to unit mass.
    pub fn from_weights(weights: Vec<S>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < S::zero()) {
            return invalid("weights must be finite and nonnegative");
        }
        let total: S = weights.iter().copied().sum();
        if total <= S::zero() {
            return invalid("weights have zero total mass");
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(k: usize) -> Self {
        let p = S::one() / S::of(k as f64);
        Self { probs: vec![p; k] }
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut probs = vec![S::zero(); k];
        probs[class] = S::one();
        Self { probs }
    }

    /// Softmax of arbitrary finite logits.
    pub fn from_logits(logits: &[S]) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    /// Empirical class frequencies of `labels` (raw counts, no smoothing).
    pub fn empirical(k: usize, labels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = vec![0usize; k];
        let mut n = 0usize;
        for y in labels {
            if y >= k {
                return invalid(format!("label {y} out of range for {k} classes"));
            }
            counts[y] += 1;
            n += 1;
        }
        if n == 0 {
            return invalid("cannot take empirical marginals of an empty sample");
        }
        let n = S::of(n as f64);
        Ok(Self {
            probs: counts.into_iter().map(|c| S::of(c as f64) / n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<S> {
        self.probs
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

impl<S: Scalar> std::ops::Index<usize> for Marginals<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.probs[i]
    }
}

impl<S: Scalar> TryFrom<Vec<S>> for Marginals<S> {
    type Error = Error;
    fn try_from(v: Vec<S>) -> Result<Self> {
        Self::new(v)
    }
}

impl<S: Scalar> From<Marginals<S>> for Vec<S> {
    fn from(m: Marginals<S>) -> Vec<S> {
        m.probs
    }
}

/// Per-class accuracies of a deployed decision rule: the sufficient
/// statistic driving the performative shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ClassAccuracies<S: Scalar> {
    acc: Vec<S>,
    /// Classes absent from the evaluation sample whose accuracy was imputed.
    #[serde(default)]
    imputed: Vec<usize>,
}

impl<S: Scalar> ClassAccuracies<S> {
    pub fn new(acc: Vec<S>) -> Result<Self> {
        Self::with_imputed(acc, Vec::new())
    }

    pub fn with_imputed(acc: Vec<S>, imputed: Vec<usize>) -> Result<Self> {
        if acc.is_empty() {
            return invalid("statistic must be nonempty");
        }
        if let Some(a) = acc
            .iter()
            .find(|a| !a.is_finite() || **a < S::zero() || **a > S::one())
        {
            return invalid(format!("class accuracy {a} outside [0, 1]"));
        }
        if imputed.iter().any(|&i| i >= acc.len()) {
            return invalid("imputed class index out of range");
        }
        Ok(Self { acc, imputed })
    }

    pub fn uniform(k: usize, value: S) -> Result<Self> {
        Self::new(vec![value; k])
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.acc
    }

    pub fn imputed(&self) -> &[usize] {
        &self.imputed
    }

    pub fn has_imputed(&self) -> bool {
        !self.imputed.is_empty()
    }

    /// Unweighted mean of the class accuracies (balanced accuracy).
    pub fn mean(&self) -> S {
        self.acc.iter().copied().sum::<S>() / S::of(self.acc.len() as f64)
    }
}

impl<S: Scalar> std::ops::Index<usize> for ClassAccuracies<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.acc[i]
    }
}

/// `log Σ exp(v_i)`, stable for large magnitudes. Returns `-inf` when every
/// entry is `-inf`.
pub fn log_sum_exp<S: Scalar>(values: &[S]) -> S {
    let max = values
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| a.max(b));
    if max == S::neg_infinity() || max == S::infinity() {
        return max;
    }
    let sum: S = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax via max-shift. Entries equal to `-inf` map to exactly zero.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let lse = log_sum_exp(logits);
    let mut out: Vec<S> = logits.iter().map(|&z| (z - lse).exp()).collect();
    // Renormalize to absorb the final rounding of exp.
    let total: S = out.iter().copied().sum();
    for p in &mut out {
        *p = *p / total;
    }
    out
}

/// `KL(target ‖ predicted) = Σ t_i log(t_i / p_i)` with `0 log 0 = 0`.
pub fn kl_divergence<S: Scalar>(target: &[S], predicted: &[S]) -> S {
    debug_assert_eq!(target.len(), predicted.len());
    let mut kl = S::zero();
    for (&t, &p) in target.iter().zip(predicted) {
        if t > S::zero() {
            kl = kl + t * (t.ln() - p.ln());
        }
    }
    // Rounding can push identical vectors slightly negative.
    kl.max(S::zero())
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax<S: PartialOrd + Copy>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_handles_extreme_logits() {
        let p = softmax(&[1000.0f64, 0.0, -1000.0]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[2], 0.0);
        let q = softmax(&[f64::NEG_INFINITY, 0.0]);
        assert_eq!(q, vec![0.0, 1.0]);
    }

    #[test]
    fn kl_reference_values() {
        assert_eq!(kl_divergence(&[0.3f64, 0.7], &[0.3, 0.7]), 0.0);
        let a = kl_divergence(&[1.0f64, 0.0], &[0.5, 0.5]);
        assert!((a - std::f64::consts::LN_2).abs() < 1e-12);
        let b = kl_divergence(&[0.5f64, 0.5], &[0.25, 0.75]);
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn marginals_reject_bad_vectors() {
        assert!(Marginals::<f64>::new(vec![0.5, 0.6]).is_err());
        assert!(Marginals::<f64>::new(vec![-0.1, 1.1]).is_err());
        assert!(Marginals::<f64>::new(vec![]).is_err());
        assert!(Marginals::<f32>::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn empirical_counts() {
        let m = Marginals::<f64>::empirical(3, [0, 0, 2, 2]).unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.0, 0.5]);
        assert!(Marginals::<f64>::empirical(3, [3]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn accuracies_validate_range() {
        assert!(ClassAccuracies::<f64>::new(vec![0.0, 1.0]).is_ok());
        assert!(ClassAccuracies::<f64>::new(vec![1.2]).is_err());
    }
}
