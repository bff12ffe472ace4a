//! Experiment configuration: a single JSON document with defaults for every
//! field, overridable from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use performa::backbone::{train_linear, TrainOptions};
use performa::baselines::{Anticipation, PapSettings, Strategy, DEFAULT_FT_EPOCHS, DEFAULT_FT_LR};
use performa::mechanism::{calibrate_tau, ShiftConfig};
use performa::world::WorldSpec;
use performa::{Backbone, FinetuneScope, LabelMarginals};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Problems with the configuration itself (as opposed to failures while
/// running it).
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("`tau` and `target_drop` are mutually exclusive")]
    ConflictingShift,
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub k: usize,
    pub domains: usize,
    pub dim: usize,
    pub overlap: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            k: 10,
            domains: 1,
            dim: 8,
            overlap: 2.0,
            sigma: 1.0,
            seed: 11,
        }
    }
}

impl WorldParams {
    pub fn build(&self) -> performa::Result<WorldSpec> {
        WorldSpec::new(
            self.k,
            self.domains,
            self.dim,
            self.overlap,
            self.sigma,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    BayesOracle,
    Linear,
}

/// Recipe for one backbone. Bayes oracles use `corruption` (mean-offset
/// scale) and `seed`; linear models are trained on a balanced sample of
/// `train_n` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub id: String,
    pub kind: BackboneKind,
    pub corruption: f64,
    pub seed: u64,
    pub train_n: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            id: "oracle".into(),
            kind: BackboneKind::BayesOracle,
            corruption: 0.0,
            seed: 0,
            train_n: 20_000,
            epochs: 30,
            lr: 0.1,
        }
    }
}

impl BackboneSpec {
    pub fn oracle(id: &str, corruption: f64, seed: u64) -> Self {
        Self {
            id: id.into(),
            corruption,
            seed,
            ..Self::default()
        }
    }

    pub fn linear(id: &str, train_n: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            kind: BackboneKind::Linear,
            train_n,
            seed,
            ..Self::default()
        }
    }

    pub fn build(&self, world: &WorldSpec) -> performa::Result<Backbone> {
        let k = world.num_classes();
        match self.kind {
            BackboneKind::BayesOracle => Backbone::corrupted_oracle(
                self.id.clone(),
                world.clone(),
                LabelMarginals::uniform(k),
                self.corruption,
                self.seed,
            ),
            BackboneKind::Linear => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let data = world.sample_with_marginals(
                    &LabelMarginals::uniform(k),
                    self.train_n,
                    None,
                    &mut rng,
                )?;
                let opts = TrainOptions {
                    seed: self.seed,
                    ..TrainOptions::default()
                };
                train_linear(self.id.clone(), k, &data, self.epochs, self.lr, opts)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchAt {
    pub round: usize,
    pub backbone: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldParams,
    pub backbones: Vec<BackboneSpec>,
    /// Id of the backbone deployed at round 0 (first entry when empty).
    pub deployed: String,
    pub tau: Option<f64>,
    pub target_drop: Option<f64>,
    pub calibration_n: usize,
    pub calibration_seed: u64,
    /// Per-round random restriction to this many domains.
    pub domain_subset: Option<usize>,
    pub strategies: Vec<String>,
    pub ft_epochs: usize,
    pub ft_scope: FinetuneScope,
    pub ft_lr: f64,
    pub adapter_hidden: Vec<usize>,
    pub adapter_lr: f64,
    pub buffer_decay: f64,
    pub adapter_batch_size: usize,
    pub anticipation: Anticipation,
    /// Adapter weights to start from instead of a fresh initialization.
    pub adapter_snapshot: Option<PathBuf>,
    pub freeze_adapter: bool,
    pub rounds: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub alpha: f64,
    pub seed: u64,
    pub num_seeds: usize,
    /// First round of the summary window (the window ends at the last round).
    pub summary_from: usize,
    pub switch_schedule: Vec<SwitchAt>,
    /// Backbone ids compared by `rank`.
    pub candidates: Vec<String>,
    pub rank_eval_n: usize,
    pub rank_simulate: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pap = PapSettings::default();
        Self {
            world: WorldParams::default(),
            backbones: vec![BackboneSpec::default()],
            deployed: String::new(),
            tau: None,
            target_drop: None,
            calibration_n: 200_000,
            calibration_seed: 3,
            domain_subset: None,
            strategies: vec!["none".into(), "pap".into()],
            ft_epochs: DEFAULT_FT_EPOCHS,
            ft_scope: FinetuneScope::All,
            ft_lr: DEFAULT_FT_LR,
            adapter_hidden: pap.hidden,
            adapter_lr: pap.lr,
            buffer_decay: pap.decay,
            adapter_batch_size: pap.batch_size,
            anticipation: pap.anticipation,
            adapter_snapshot: None,
            freeze_adapter: false,
            rounds: performa::trajectory::DEFAULT_ROUNDS,
            train_n: performa::trajectory::DEFAULT_TRAIN_N,
            test_n: performa::trajectory::DEFAULT_TEST_N,
            alpha: performa::trajectory::DEFAULT_ALPHA,
            seed: 0,
            num_seeds: 10,
            summary_from: 50,
            switch_schedule: Vec::new(),
            candidates: Vec::new(),
            rank_eval_n: 20_000,
            rank_simulate: true,
        }
    }
}

/// Default target drop when neither `tau` nor `target_drop` is given.
pub const DEFAULT_TARGET_DROP: f64 = 0.10;

/// Keys present in `given` but absent from `reference`, as dotted paths.
fn unknown_keys(given: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(r)) = (given, reference) else {
        return;
    };
    for (key, value) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match r.get(key) {
            None => out.push(path),
            Some(inner) => unknown_keys(value, inner, &path, out),
        }
    }
}

/// Every optional field spelled out, so key checking sees the full schema.
fn schema_reference() -> Value {
    let mut v = serde_json::to_value(ExperimentConfig::default()).expect("default serializes");
    for key in ["tau", "target_drop", "domain_subset", "adapter_snapshot"] {
        v[key] = Value::from(0);
    }
    v
}

impl ExperimentConfig {
    /// Parses a JSON document, reporting every unknown key at once.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text)?
        };
        let mut unknown = Vec::new();
        unknown_keys(&value, &schema_reference(), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tau.is_some() && self.target_drop.is_some() {
            return Err(ConfigError::ConflictingShift);
        }
        if let Some(t) = self.tau {
            if t == 0.0 || !t.is_finite() {
                return invalid("tau must be finite and nonzero");
            }
        }
        if let Some(d) = self.target_drop {
            if !(0.0..1.0).contains(&d) {
                return invalid("target_drop must lie in [0, 1)");
            }
        }
        if self.rounds == 0 || self.train_n == 0 || self.test_n == 0 {
            return invalid("rounds, train_n and test_n must be at least 1");
        }
        if self.num_seeds == 0 {
            return invalid("num_seeds must be at least 1");
        }
        if self.backbones.is_empty() {
            return invalid("at least one backbone is required");
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.backbones {
            if !seen.insert(b.id.as_str()) {
                return invalid(format!("duplicate backbone id `{}`", b.id));
            }
        }
        if !self.deployed.is_empty() && !seen.contains(self.deployed.as_str()) {
            return invalid(format!(
                "deployed backbone `{}` is not defined",
                self.deployed
            ));
        }
        for s in &self.switch_schedule {
            if !seen.contains(s.backbone.as_str()) {
                return invalid(format!("switch target `{}` is not defined", s.backbone));
            }
            if s.round == 0 {
                return invalid("switches happen at round 1 or later");
            }
        }
        for c in &self.candidates {
            if !seen.contains(c.as_str()) {
                return invalid(format!("candidate `{c}` is not defined"));
            }
        }
        if self.strategies.is_empty() {
            return invalid("at least one strategy is required");
        }
        for s in &self.strategies {
            self.strategy(s)?;
        }
        if let Some(n) = self.domain_subset {
            if n == 0 || n > self.world.domains {
                return invalid("domain_subset must be between 1 and the number of domains");
            }
        }
        if self.adapter_hidden.is_empty() || self.adapter_hidden.contains(&0) {
            return invalid("adapter hidden widths must be positive");
        }
        if self.adapter_lr.is_nan()
            || self.adapter_lr < 0.0
            || self.buffer_decay.is_nan()
            || self.buffer_decay <= 0.0
            || self.buffer_decay > 1.0
        {
            return invalid("adapter_lr must be nonnegative and buffer_decay in (0, 1]");
        }
        Ok(())
    }

    /// Builds the strategy named by a CLI label.
    pub fn strategy(&self, label: &str) -> Result<Strategy, ConfigError> {
        Ok(match label {
            "none" => Strategy::NoAdaptation,
            "oracle-dist" => Strategy::OracleDistribution,
            "oracle-ft" => Strategy::OracleFinetune {
                epochs: self.ft_epochs,
                scope: self.ft_scope,
                lr: self.ft_lr,
                batch_size: performa::backbone::DEFAULT_BATCH_SIZE,
            },
            "pap" => Strategy::Pap(PapSettings {
                hidden: self.adapter_hidden.clone(),
                lr: self.adapter_lr,
                decay: self.buffer_decay,
                batch_size: self.adapter_batch_size,
                epochs_per_round: 1,
                freeze: self.freeze_adapter,
                anticipation: self.anticipation,
            }),
            other => {
                return invalid(format!(
                    "unknown strategy `{other}` (expected none, oracle-dist, oracle-ft or pap)"
                ))
            }
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    pub fn deployed_id(&self) -> &str {
        if self.deployed.is_empty() {
            &self.backbones[0].id
        } else {
            &self.deployed
        }
    }

    pub fn backbone_spec(&self, id: &str) -> Option<&BackboneSpec> {
        self.backbones.iter().find(|b| b.id == id)
    }

    /// Canonical JSON: keys sorted at every level, floats round-tripped.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 of [`ExperimentConfig::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// A configuration turned into concrete objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub world: WorldSpec,
    pub backbones: BTreeMap<String, Backbone>,
    pub deployed: Backbone,
    pub shift: ShiftConfig,
    /// Calibration outcome when `tau` was not given directly.
    pub calibration: Option<performa::mechanism::Calibration>,
}

impl Resolved {
    pub fn new(config: &ExperimentConfig) -> performa::Result<Self> {
        let world = config.world.build()?;
        let mut backbones = BTreeMap::new();
        for spec in &config.backbones {
            backbones.insert(spec.id.clone(), spec.build(&world)?);
        }
        let deployed = backbones[config.deployed_id()].clone();
        let (tau, calibration) = match config.tau {
            Some(t) => (t, None),
            None => {
                let target = config.target_drop.unwrap_or(DEFAULT_TARGET_DROP);
                let cal = calibrate_tau(
                    &world,
                    &deployed,
                    target,
                    config.calibration_n,
                    config.calibration_seed,
                )?;
                (cal.tau, Some(cal))
            }
        };
        let mut shift = ShiftConfig::new(tau)?;
        shift.target_drop = config.target_drop;
        shift.random_domain_subset = config.domain_subset;
        Ok(Self {
            world,
            backbones,
            deployed,
            shift,
            calibration,
        })
    }
}
