//! Synthetic ground truth: isotropic Gaussian class/domain components with
//! closed-form Bayes posteriors.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::simplex::log_sum_exp;
use crate::LabelMarginals;

/// One labelled draw from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: usize,
}

/// Ground-truth generative model. Means are stored row-major with component
/// `(class i, domain j)` at rows `i * d_domains + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWorld")]
pub struct WorldSpec {
    k: usize,
    d_domains: usize,
    dim: usize,
    sigma: f64,
    means: Vec<f64>,
    domain_weights: Vec<f64>,
    seed: u64,
}

#[derive(Deserialize)]
struct RawWorld {
    k: usize,
    d_domains: usize,
    dim: usize,
    sigma: f64,
    means: Vec<f64>,
    domain_weights: Vec<f64>,
    seed: u64,
}

impl TryFrom<RawWorld> for WorldSpec {
    type Error = Error;
    fn try_from(r: RawWorld) -> Result<Self> {
        let w = WorldSpec {
            k: r.k,
            d_domains: r.d_domains,
            dim: r.dim,
            sigma: r.sigma,
            means: r.means,
            domain_weights: r.domain_weights,
            seed: r.seed,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Offset of the per-domain jitter relative to the class-mean spacing.
const DOMAIN_JITTER: f64 = 0.35;

impl WorldSpec {
    /// Draws component means from a seeded RNG.
    ///
    /// Class centres are uniform in `[-overlap, overlap]^dim`, then each
    /// class's offset from the origin is rescaled by its own factor in
    /// `[0.6, 1.4]`, so some classes crowd the middle and others sit apart.
    /// Domains add a Gaussian offset of scale `0.35 * overlap` per component.
    pub fn new(
        k: usize,
        domains: usize,
        dim: usize,
        overlap: f64,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if k < 2 {
            return invalid(format!("need at least 2 classes, got {k}"));
        }
        if domains == 0 || dim == 0 {
            return invalid("domain count and feature dimension must be positive");
        }
        if !(overlap > 0.0 && overlap.is_finite()) {
            return invalid(format!("overlap must be positive, got {overlap}"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return invalid(format!("sigma must be positive, got {sigma}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = Vec::with_capacity(k * domains * dim);
        for _ in 0..k {
            let radial: f64 = rng.random_range(0.6..1.4);
            let centre: Vec<f64> = (0..dim)
                .map(|_| overlap * radial * rng.random_range(-1.0..1.0))
                .collect();
            for _ in 0..domains {
                for &c in &centre {
                    let jitter = if domains > 1 {
                        let z: f64 = rng.sample(StandardNormal);
                        DOMAIN_JITTER * overlap * z
                    } else {
                        0.0
                    };
                    means.push(c + jitter);
                }
            }
        }
        let spec = Self {
            k,
            d_domains: domains,
            dim,
            sigma,
            means,
            domain_weights: vec![1.0 / domains as f64; domains],
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a world from explicit means (`k * domains * dim`, row-major).
    pub fn from_means(
        k: usize,
        domains: usize,
        dim: usize,
        sigma: f64,
        means: Vec<f64>,
        domain_weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            k,
            d_domains: domains,
            dim,
            sigma,
            means,
            domain_weights,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d_domains == 0 || self.dim == 0 {
            return invalid("world needs k >= 2, at least one domain and dim >= 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return invalid("sigma must be positive and finite");
        }
        if self.means.len() != self.k * self.d_domains * self.dim {
            return invalid(format!(
                "expected {} mean coordinates, got {}",
                self.k * self.d_domains * self.dim,
                self.means.len()
            ));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return invalid("means must be finite");
        }
        if self.domain_weights.len() != self.d_domains
            || self.domain_weights.iter().any(|w| w.is_nan() || *w < 0.0)
            || (self.domain_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return invalid("domain weights must be a probability vector over domains");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn num_domains(&self) -> usize {
        self.d_domains
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn domain_weights(&self) -> &[f64] {
        &self.domain_weights
    }

    pub fn num_components(&self) -> usize {
        self.k * self.d_domains
    }

    /// Mean of component `(class, domain)`.
    pub fn mean(&self, class: usize, domain: usize) -> &[f64] {
        let row = class * self.d_domains + domain;
        &self.means[row * self.dim..(row + 1) * self.dim]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Domain weights renormalized over `filter` (all domains when `None`).
    pub fn restricted_domain_weights(&self, filter: Option<&[usize]>) -> Result<Vec<f64>> {
        let Some(filter) = filter else {
            return Ok(self.domain_weights.clone());
        };
        if filter.is_empty() {
            return invalid("domain filter must be nonempty");
        }
        let mut w = vec![0.0; self.d_domains];
        for &j in filter {
            if j >= self.d_domains {
                return invalid(format!("domain {j} out of range"));
            }
            w[j] = self.domain_weights[j];
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return invalid("domain filter selects zero-weight domains only");
        }
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    }

    /// Unnormalized log posterior scores `log prior_i + log p(x | y = i)`,
    /// with optional per-coordinate offsets added to every mean.
    pub(crate) fn log_joint(
        &self,
        prior: &[f64],
        x: &[f64],
        domain_weights: &[f64],
        mean_offset: Option<&[f64]>,
        out: &mut Vec<f64>,
    ) {
        let inv_two_var = 0.5 / (self.sigma * self.sigma);
        let mut per_domain = Vec::with_capacity(self.d_domains);
        out.clear();
        for (i, &p) in prior.iter().enumerate().take(self.k) {
            if p <= 0.0 {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            per_domain.clear();
            for (j, &w) in domain_weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                let row = i * self.d_domains + j;
                let mu = &self.means[row * self.dim..(row + 1) * self.dim];
                let sq: f64 = match mean_offset {
                    None => mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum(),
                    Some(eps) => {
                        let e = &eps[row * self.dim..(row + 1) * self.dim];
                        mu.iter()
                            .zip(e)
                            .zip(x)
                            .map(|((m, o), v)| (v - m - o) * (v - m - o))
                            .sum()
                    }
                };
                // The Gaussian normalizer is shared by all components and cancels.
                per_domain.push(w.ln() - sq * inv_two_var);
            }
            out.push(p.ln() + log_sum_exp(&per_domain));
        }
    }

    pub(crate) fn posterior_with_offset(
        &self,
        prior: &LabelMarginals,
        x: &[f64],
        domain_filter: Option<&[usize]>,
        mean_offset: Option<&[f64]>,
    ) -> Result<LabelMarginals> {
        self.check_point(x)?;
        if prior.len() != self.k {
            return invalid("prior length does not match class count");
        }
        let weights = self.restricted_domain_weights(domain_filter)?;
        let mut scores = Vec::with_capacity(self.k);
        self.log_joint(prior.as_slice(), x, &weights, mean_offset, &mut scores);
        Ok(LabelMarginals::from_logits(&scores))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return invalid(format!(
                "feature vector has dimension {}, expected {}",
                x.len(),
                self.dim
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("feature vector must be finite");
        }
        Ok(())
    }

    /// Exact `P(Y | X = x)` under `prior`, mixing domains by their (optionally
    /// restricted) weights. Computed in log space.
    pub fn bayes_posterior(
        &self,
        prior: &LabelMarginals,
        x: &[f64],
        domain_filter: Option<&[usize]>,
    ) -> Result<LabelMarginals> {
        self.posterior_with_offset(prior, x, domain_filter, None)
    }

    /// Draws `n` i.i.d. samples with class labels from `marginals` and domains
    /// from the (filtered) domain weights.
    pub fn sample_with_marginals<R: Rng + ?Sized>(
        &self,
        marginals: &LabelMarginals,
        n: usize,
        domain_filter: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<Vec<LabeledSample>> {
        if marginals.len() != self.k {
            return invalid("marginals length does not match class count");
        }
        let dweights = self.restricted_domain_weights(domain_filter)?;
        let class_dist = WeightedIndex::new(marginals.as_slice())
            .map_err(|e| Error::InvalidArgument(format!("marginals: {e}")))?;
        let domain_dist = WeightedIndex::new(&dweights)
            .map_err(|e| Error::InvalidArgument(format!("domain weights: {e}")))?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let y = class_dist.sample(rng);
            let domain = domain_dist.sample(rng);
            let mu = self.mean(y, domain);
            let x = mu
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + self.sigma * z
                })
                .collect();
            out.push(LabeledSample { x, y, domain });
        }
        Ok(out)
    }
}

/// Symmetric Dirichlet(alpha) draw over `k` classes via normalized Gamma
/// variates.
pub fn dirichlet_marginals<R: Rng + ?Sized>(
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LabelMarginals> {
    if k == 0 {
        return invalid("need at least one class");
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    LabelMarginals::from_weights(draws)
}

/// Seeded convenience wrapper around [`dirichlet_marginals`].
pub fn dirichlet_marginals_seeded(k: usize, alpha: f64, seed: u64) -> Result<LabelMarginals> {
    dirichlet_marginals(k, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}
