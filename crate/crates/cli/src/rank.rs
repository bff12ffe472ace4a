//! Pre-deployment ranking of candidate backbones.

use std::fmt::Write as _;

use performa::trajectory::{post_deployment_accuracy, rank_candidates};
use performa::{AdapterNet, Backbone, LabelMarginals};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, Resolved};
use crate::run::{load_adapter, RunError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub id: String,
    pub pre_deployment: f64,
    pub estimate: f64,
    pub post_deployment: Option<f64>,
    pub rank_pre: usize,
    pub rank_estimate: usize,
    pub rank_post: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub tau: f64,
    /// Rows sorted by PaP estimate, best first.
    pub rows: Vec<RankRow>,
}

/// 1-based ranks of `values`, highest first; ties keep input order.
fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut out = vec![0; values.len()];
    for (rank, i) in order.into_iter().enumerate() {
        out[i] = rank + 1;
    }
    out
}

impl RankReport {
    /// Whether the estimate ordering equals the simulated ordering.
    pub fn ordering_matches(&self) -> Option<bool> {
        self.rows
            .iter()
            .map(|r| r.rank_post.map(|p| p == r.rank_estimate))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().all(|b| b))
    }

    pub fn estimate_mae(&self) -> Option<f64> {
        self.mae(|r| r.estimate)
    }

    pub fn pre_deployment_mae(&self) -> Option<f64> {
        self.mae(|r| r.pre_deployment)
    }

    fn mae(&self, f: impl Fn(&RankRow) -> f64) -> Option<f64> {
        let errs = self
            .rows
            .iter()
            .map(|r| r.post_deployment.map(|p| (f(r) - p).abs()))
            .collect::<Option<Vec<_>>>()?;
        Some(errs.iter().sum::<f64>() / errs.len() as f64)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let _ = writeln!(
            s,
            "{:<width$}  {:>14}  {:>14}  {:>15}",
            "model", "pre-deployment", "PaP estimate", "post-deployment"
        );
        for r in &self.rows {
            let post = match (r.post_deployment, r.rank_post) {
                (Some(p), Some(k)) => format!("{:.4} (#{k})", p),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:<width$}  {:>14}  {:>14}  {:>15}",
                r.id,
                format!("{:.4} (#{})", r.pre_deployment, r.rank_pre),
                format!("{:.4} (#{})", r.estimate, r.rank_estimate),
                post,
            );
        }
        s
    }
}

/// Scores candidates with a trained adapter against a sample from the
/// current (balanced) population, optionally simulating one round of
/// deployment for each.
pub fn rank_with(
    resolved: &Resolved,
    net: &AdapterNet,
    candidates: &[Backbone],
    eval_n: usize,
    seed: u64,
    simulate: bool,
) -> Result<RankReport, RunError> {
    if candidates.len() < 2 {
        return Err(ConfigError::Invalid("ranking needs at least two candidates".into()).into());
    }
    let k = resolved.world.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let current = resolved.world.sample_with_marginals(
        &LabelMarginals::uniform(k),
        eval_n,
        None,
        &mut rng,
    )?;
    let estimates = rank_candidates(net, &current, candidates)?;
    let post = if simulate {
        let mut v = Vec::with_capacity(estimates.len());
        for e in &estimates {
            let model = candidates
                .iter()
                .find(|c| c.id == e.id)
                .expect("candidate present");
            v.push(Some(post_deployment_accuracy(
                &resolved.world,
                model,
                &e.class_accuracies,
                &resolved.shift,
                eval_n,
                seed.wrapping_add(1),
            )?));
        }
        v
    } else {
        vec![None; estimates.len()]
    };
    let pre: Vec<f64> = estimates.iter().map(|e| e.current_accuracy).collect();
    let est: Vec<f64> = estimates.iter().map(|e| e.estimate).collect();
    let rank_pre = ranks(&pre);
    let rank_est = ranks(&est);
    let rank_post = if simulate {
        let p: Vec<f64> = post.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        ranks(&p).into_iter().map(Some).collect()
    } else {
        vec![None; estimates.len()]
    };
    let rows = estimates
        .iter()
        .enumerate()
        .map(|(i, e)| RankRow {
            id: e.id.clone(),
            pre_deployment: e.current_accuracy,
            estimate: e.estimate,
            post_deployment: post[i],
            rank_pre: rank_pre[i],
            rank_estimate: rank_est[i],
            rank_post: rank_post[i],
        })
        .collect();
    Ok(RankReport {
        tau: resolved.shift.tau,
        rows,
    })
}

/// Ranks `config.candidates` with the adapter in `config.adapter_snapshot`.
pub fn report_ranking(config: &ExperimentConfig) -> Result<RankReport, RunError> {
    config.validate()?;
    let Some(path) = &config.adapter_snapshot else {
        return Err(ConfigError::Invalid("ranking requires `adapter_snapshot`".into()).into());
    };
    if config.candidates.len() < 2 {
        return Err(ConfigError::Invalid("ranking needs at least two candidates".into()).into());
    }
    let net = load_adapter(path)?;
    let resolved = Resolved::new(config)?;
    let candidates: Vec<Backbone> = config
        .candidates
        .iter()
        .map(|id| resolved.backbones[id].clone())
        .collect();
    rank_with(
        &resolved,
        &net,
        &candidates,
        config.rank_eval_n,
        config.seed,
        config.rank_simulate,
    )
}
