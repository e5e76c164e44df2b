use std::path::{Path, PathBuf};

use degap::data::{CorpusConfig, OntologyConfig};
use degap::prefixes::Variant;
use degap::train_eval::TrainConfig;
use degap::transformer::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory written by `gen-data`; empty means generate in memory
    /// from the settings below.
    pub dir: String,
    pub seed: u64,
    pub train_contexts: usize,
    pub dev_fraction: f64,
    pub ontology: OntologyConfig,
    pub corpus: CorpusConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: String::new(),
            seed: 1,
            train_contexts: 800,
            dev_fraction: 0.1,
            ontology: OntologyConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub sweep_lengths: Vec<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            variants: Variant::ALL.to_vec(),
            sweep_lengths: vec![0, 2, 4, 8, 16],
        }
    }
}

/// Everything a run needs. `seed` is the run seed; it overrides
/// `train.seed` and also seeds model initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Short digest of the resolved config with the seed blanked out, so
    /// runs that differ only by seed share a prefix.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.train.seed = 0;
        hex::encode(&Sha256::digest(c.to_toml().as_bytes())[..6])
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-seed{}", self.hash(), self.seed))
    }
}

/// Flags shared by the commands that read a run config. Flags win over
/// the config file, which wins over built-in defaults.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run config; unknown keys are rejected
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data directory produced by `gen-data`
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Number of optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model width; also sets the feed-forward width to twice this
    #[arg(long)]
    pub d_model: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data {
            c.data.dir = d.display().to_string();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(v) = self.variant {
            c.model.variant = v;
        }
        if let Some(s) = self.steps {
            c.train.training_steps = s;
        }
        if let Some(lr) = self.lr {
            c.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        if let Some(m) = self.d_model {
            c.model.d_model = m;
            c.model.ffn_dim = 2 * m;
        }
        c.train.seed = c.seed;
        Ok(c)
    }
}
