//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use groupmuon_core::{CriterionParams, GroupingRule, NewtonSchulzConfig, RankPolicy, Whitening};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::model::ToyModelConfig;
use crate::tasks::Task;

/// Default seeds used when a config omits them.
pub const DEFAULT_INIT_SEED: u64 = 0;
pub const DEFAULT_DATA_SEED: u64 = 1;
pub const DEFAULT_GROUPING_SEED: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub grouping: GroupingConfig,
    pub criterion: CriterionSection,
    pub training: TrainingSection,
    pub output: OutputSection,
    pub seeds: Seeds,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            grouping: GroupingConfig::default(),
            criterion: CriterionSection::default(),
            training: TrainingSection::default(),
            output: OutputSection::default(),
            seeds: Seeds::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Model shape; the init seed lives in `[seeds]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub task: Task,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ToyModelConfig::default();
        Self {
            num_layers: m.num_layers,
            d_model: m.d_model,
            num_heads: m.num_heads,
            head_dim: m.head_dim,
            vocab_size: m.vocab_size,
            seq_len: m.seq_len,
            task: m.task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Every matrix parameter whitened as a whole.
    MuonFull,
    /// Targeted attention projections whitened per head group.
    MuonGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningKind {
    NewtonSchulz,
    ExactPolar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub muon_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub whitening: WhiteningKind,
    pub ns_iterations: usize,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::MuonFull,
            muon_lr: 0.02,
            momentum: 0.95,
            nesterov: false,
            whitening: WhiteningKind::NewtonSchulz,
            ns_iterations: 5,
            adam_lr: 3.6e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn muon_full() -> Self {
        Self::default()
    }

    pub fn muon_group() -> Self {
        Self { kind: OptimizerKind::MuonGroup, ..Self::default() }
    }

    pub fn whitening(&self) -> Whitening {
        match self.whitening {
            WhiteningKind::NewtonSchulz => Whitening::NewtonSchulz(NewtonSchulzConfig::with_iterations(self.ns_iterations)),
            WhiteningKind::ExactPolar => Whitening::ExactPolar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns_iterations == 0 {
            return Err(HarnessError::Config("optimizer.ns_iterations must be at least 1".into()));
        }
        for (name, v) in [("muon_lr", self.muon_lr), ("adam_lr", self.adam_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("optimizer.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(HarnessError::Config(format!("optimizer.{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.adam_weight_decay >= 0.0 && self.adam_weight_decay.is_finite()) {
            return Err(HarnessError::Config("optimizer.adam_weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which attention projections get head-grouped whitening.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupTarget {
    #[serde(rename = "qk")]
    Qk,
    #[serde(rename = "v")]
    V,
    /// Q and K fixed to random grouping with g = H/2; the configured grouping applies to V.
    #[serde(rename = "fixed-qk+v")]
    FixedQkV,
    #[serde(rename = "qkv")]
    Qkv,
}

impl GroupTarget {
    pub fn name(&self) -> &'static str {
        match self {
            GroupTarget::Qk => "qk",
            GroupTarget::V => "v",
            GroupTarget::FixedQkV => "fixed-qk+v",
            GroupTarget::Qkv => "qkv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Adjacent,
    Interval,
    Random,
}

impl RuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Adjacent => "adjacent",
            RuleKind::Interval => "interval",
            RuleKind::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub target: GroupTarget,
    pub rule: RuleKind,
    pub group_size: usize,
    /// Random rule only: draw a fresh partition at every step.
    pub resample_each_step: bool,
    pub lr_transfer: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self { target: GroupTarget::Qk, rule: RuleKind::Random, group_size: 6, resample_each_step: true, lr_transfer: false }
    }
}

impl GroupingConfig {
    pub fn rule_with_seed(&self, seed: u64) -> GroupingRule {
        match self.rule {
            RuleKind::Adjacent => GroupingRule::Adjacent,
            RuleKind::Interval => GroupingRule::Interval,
            RuleKind::Random => GroupingRule::Random { seed, resample_each_step: self.resample_each_step },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriterionSection {
    pub beta: f64,
    pub eta: f64,
    pub rank_tolerance: f64,
}

impl Default for CriterionSection {
    fn default() -> Self {
        Self { beta: 1.0, eta: 0.1, rank_tolerance: 1e-10 }
    }
}

impl CriterionSection {
    pub fn rank_policy(&self) -> RankPolicy {
        RankPolicy::Relative(self.rank_tolerance)
    }

    pub fn params(&self) -> Result<CriterionParams> {
        Ok(CriterionParams::new(self.beta, self.eta)?.with_rank_policy(self.rank_policy()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: u64,
    pub eval_every: u64,
    pub batch_size: usize,
    pub val_batches: usize,
    /// Attach rank and norm-gap records every `profile_every` steps; 0 disables.
    pub profile_every: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { steps: 200, eval_every: 25, batch_size: 4, val_batches: 2, profile_every: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl OutputFormat {
    pub fn csv(&self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }

    pub fn json(&self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), format: OutputFormat::Both }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub grouping: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: DEFAULT_INIT_SEED, data: DEFAULT_DATA_SEED, grouping: DEFAULT_GROUPING_SEED }
    }
}

/// Sizes for the property battery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub draws: usize,
    pub seed: u64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { draws: 100, seed: 7 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self) -> ToyModelConfig {
        let m = &self.model;
        ToyModelConfig {
            num_layers: m.num_layers,
            d_model: m.d_model,
            num_heads: m.num_heads,
            head_dim: m.head_dim,
            vocab_size: m.vocab_size,
            seq_len: m.seq_len,
            task: m.task,
            init_seed: self.seeds.init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.optimizer.validate()?;
        let (g, h) = (self.grouping.group_size, self.model.num_heads);
        if g == 0 || h % g != 0 {
            return Err(HarnessError::Config(format!(
                "grouping.group_size {g} does not divide model.num_heads {h}"
            )));
        }
        if self.grouping.target == GroupTarget::FixedQkV && h % 2 != 0 {
            return Err(HarnessError::Config(format!(
                "grouping.target fixed-qk+v needs an even model.num_heads, got {h}"
            )));
        }
        self.criterion.params()?;
        if !(self.criterion.rank_tolerance > 0.0 && self.criterion.rank_tolerance < 1.0) {
            return Err(HarnessError::Config("criterion.rank_tolerance must lie in (0, 1)".into()));
        }
        let t = &self.training;
        for (name, v) in [
            ("steps", t.steps),
            ("eval_every", t.eval_every),
            ("batch_size", t.batch_size as u64),
            ("val_batches", t.val_batches as u64),
        ] {
            if v == 0 {
                return Err(HarnessError::Config(format!("training.{name} must be positive")));
            }
        }
        if self.verify.draws == 0 {
            return Err(HarnessError::Config("verify.draws must be positive".into()));
        }
        Ok(())
    }
}
