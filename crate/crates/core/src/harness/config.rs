use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{synth_generate, DomainSet, SynthSpec};
use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::lus::LusConfig;
use crate::mdc::DiversityMode;
use crate::mefn::{ModelConfig, SimilaritySource};
use crate::objectives::LossWeights;

pub const CONFIG_VERSION: u32 = 1;

/// Where the corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// A `manifest.json` written by [`DomainSet::save`].
    Manifest(PathBuf),
    /// Generated on the fly.
    Synthetic(SynthSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SynthSpec::default())
    }
}

/// How target samples are picked for annotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Uncertainty candidates narrowed by diversity.
    #[default]
    Adose,
    /// Uniform draw from the unlabeled pool.
    Random,
    /// Highest fused-prediction entropy.
    Entropy,
    /// Smallest least-disagreement scores, no diversity stage.
    LusOnly,
    /// Uniformly drawn candidates narrowed by diversity.
    MdcOnly,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adose => "adose",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::LusOnly => "lus-only",
            Strategy::MdcOnly => "mdc-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Budget as a fraction of the unlabeled target pool.
    pub fraction: f64,
    pub rounds: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { fraction: 0.10, rounds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_epochs: usize,
    pub round_epochs: usize,
    /// Samples drawn from each domain per minibatch.
    pub per_domain: usize,
    pub adam: AdamConfig,
    /// Start every round from fresh parameters instead of the previous round's.
    pub reinit_each_round: bool,
    pub similarity: SimilaritySource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_epochs: 30,
            round_epochs: 10,
            per_domain: 16,
            adam: AdamConfig::default(),
            reinit_each_round: false,
            similarity: SimilaritySource::Auto,
        }
    }
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub dataset: DatasetSource,
    /// Seed for synthetic generation; the run seed when absent.
    pub data_seed: Option<u64>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lus: LusConfig,
    pub budget: BudgetConfig,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub diversity: DiversityMode,
    /// Fraction of the target held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
    /// Leave wall-clock fields out of the report.
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            dataset: DatasetSource::default(),
            data_seed: None,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            lus: LusConfig::default(),
            budget: BudgetConfig::default(),
            train: TrainConfig::default(),
            strategy: Strategy::Adose,
            diversity: DiversityMode::Dissimilar,
            test_fraction: 0.3,
            seed: 0,
            deterministic: true,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.lus.validate()?;
        if !(self.budget.fraction > 0.0 && self.budget.fraction <= 1.0) || self.budget.rounds == 0 {
            return Err(Error::InvalidConfig("budget needs a fraction in (0, 1] and at least one round".into()));
        }
        if self.train.per_domain == 0 {
            return Err(Error::InvalidConfig("per-domain batch size must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("test fraction {} outside (0, 1)", self.test_fraction)));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    /// Reads a JSON config. A relative manifest path is taken relative to
    /// the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let DatasetSource::Manifest(m) = &mut cfg.dataset {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Loads or generates the full corpus (before the test split).
    pub fn load_dataset(&self) -> Result<DomainSet> {
        match &self.dataset {
            DatasetSource::Manifest(path) => DomainSet::load(path),
            DatasetSource::Synthetic(spec) => synth_generate(spec, self.data_seed.unwrap_or(self.seed)),
        }
    }
}

/// Independent stream seeds derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub sampler: u64,
    pub selection: u64,
}

impl Seeds {
    pub fn derive(cfg: &RunConfig) -> Self {
        let s = cfg.seed;
        Seeds {
            run: s,
            data: cfg.data_seed.unwrap_or(s),
            split: mix(s, 1),
            init: mix(s, 2),
            sampler: mix(s, 3),
            selection: mix(s, 4),
        }
    }
}

/// SplitMix64 finaliser over `seed + stream`.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
