//! Run configuration: a single TOML file with strict (unknown keys rejected)
//! parsing and kind-specific validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{Tying, Variant};
use crate::model::{Activation, Architecture};
use crate::objectives::{Likelihood, Optimiser, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToyRegression,
    Classification,
    KScan,
    EarlyStop,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Evidence at the linearisation-point weights.
    Naive,
    /// Evidence at the linear-model optimum, full Taylor surrogate.
    StarFull,
    /// Evidence at the linear-model optimum, purely linear surrogate.
    StarSimple,
}

impl Objective {
    pub fn tag(&self) -> &'static str {
        match self {
            Objective::Naive => "naive",
            Objective::StarFull => "star-full",
            Objective::StarSimple => "star-simple",
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Objective::StarSimple => Variant::Simple,
            _ => Variant::FullTaylor,
        }
    }

    pub fn parse(s: &str) -> Result<Objective> {
        match s {
            "naive" => Ok(Objective::Naive),
            "star-full" => Ok(Objective::StarFull),
            "star-simple" => Ok(Objective::StarSimple),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

pub fn parse_tying(s: &str) -> Result<Tying> {
    match s {
        "single" => Ok(Tying::Single),
        "per-group" => Ok(Tying::PerGroup),
        _ => Err(Error::Config(format!("unknown tying mode {s:?}"))),
    }
}

pub fn tying_tag(t: Tying) -> &'static str {
    match t {
        Tying::Single => "single",
        Tying::PerGroup => "per-group",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    /// "tanh" or "leaky-relu"
    pub activation: String,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_true")]
    pub final_bias: bool,
}

fn default_leaky_slope() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

impl ArchConfig {
    pub fn activation(&self) -> Result<Activation> {
        match self.activation.as_str() {
            "tanh" => Ok(Activation::Tanh),
            "leaky-relu" => Ok(Activation::LeakyRelu(self.leaky_slope)),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    /// Fully normalised MLP over the given input/output sizes.
    pub fn build(&self, input_dim: usize, output_dim: usize) -> Result<Architecture> {
        let arch = Architecture::fully_normalised_mlp(
            input_dim,
            &self.hidden,
            output_dim,
            self.activation()?,
            self.final_bias,
        );
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainSection {
    /// "sgd" or "adam"
    #[serde(default = "default_optimiser")]
    pub optimiser: String,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
}

fn default_optimiser() -> String {
    "sgd".into()
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lr_decay() -> f64 {
    0.1
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> Result<TrainConfig> {
        let optimiser = match self.optimiser.as_str() {
            "sgd" => Optimiser::SgdMomentum,
            "adam" => Optimiser::Adam,
            other => return Err(Error::Config(format!("unknown optimiser {other:?}"))),
        };
        let cfg = TrainConfig {
            optimiser,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            lr_decay: self.lr_decay,
            checkpoint_epochs: self.checkpoint_epochs.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LikelihoodSection {
    /// "gaussian" or "categorical"
    pub kind: String,
    #[serde(default)]
    pub sigma2: Option<f64>,
}

impl LikelihoodSection {
    pub fn build(&self) -> Result<Likelihood> {
        match self.kind.as_str() {
            "gaussian" => {
                let sigma2 = self
                    .sigma2
                    .ok_or_else(|| Error::Config("gaussian likelihood requires sigma2".into()))?;
                if !(sigma2 > 0.0) {
                    return Err(Error::Config("sigma2 must be positive".into()));
                }
                Ok(Likelihood::Gaussian { sigma2 })
            }
            "categorical" => Ok(Likelihood::Categorical),
            other => Err(Error::Config(format!("unknown likelihood {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ToySection {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ClassificationSection {
    /// IDX files; when absent a bundled synthetic set is generated
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    pub classes: Vec<u8>,
    pub max_train: usize,
    pub max_test: usize,
    #[serde(default = "default_true")]
    pub pool2: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct KScanSection {
    pub k_set: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// evidence objective tag; kinds that sweep objectives ignore it
    #[serde(default = "default_objective")]
    pub objective: String,
    #[serde(default = "default_tying")]
    pub tying: String,
    #[serde(default)]
    pub include_biases: bool,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub likelihood: LikelihoodSection,
    #[serde(default)]
    pub toy: Option<ToySection>,
    #[serde(default)]
    pub classification: Option<ClassificationSection>,
    #[serde(default)]
    pub kscan: Option<KScanSection>,
}

fn default_objective() -> String {
    "star-simple".into()
}
fn default_tying() -> String {
    "per-group".into()
}
fn default_mc_samples() -> usize {
    100
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn objective(&self) -> Result<Objective> {
        Objective::parse(&self.objective)
    }

    pub fn tying(&self) -> Result<Tying> {
        parse_tying(&self.tying)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        self.objective()?;
        self.tying()?;
        self.arch.activation()?;
        self.likelihood.build()?;
        match self.kind {
            ExperimentKind::ToyRegression | ExperimentKind::EarlyStop => {
                let toy = self
                    .toy
                    .as_ref()
                    .ok_or_else(|| Error::Config("kind requires a [toy] section".into()))?;
                if toy.n_train == 0 || toy.n_test == 0 {
                    return Err(Error::Config("toy counts must be positive".into()));
                }
                if self.kind == ExperimentKind::EarlyStop
                    && self.train.checkpoint_epochs.is_empty()
                {
                    return Err(Error::Config(
                        "early-stop requires train.checkpoint-epochs".into(),
                    ));
                }
            }
            ExperimentKind::Classification => {
                let c = self.classification.as_ref().ok_or_else(|| {
                    Error::Config("kind requires a [classification] section".into())
                })?;
                if c.classes.is_empty() {
                    return Err(Error::Config("classes must be non-empty".into()));
                }
            }
            ExperimentKind::KScan => {
                let toy = self
                    .toy
                    .as_ref()
                    .ok_or_else(|| Error::Config("k-scan requires a [toy] section".into()))?;
                if toy.n_train == 0 || toy.n_test == 0 {
                    return Err(Error::Config("toy counts must be positive".into()));
                }
                let ks = self
                    .kscan
                    .as_ref()
                    .ok_or_else(|| Error::Config("k-scan requires a [kscan] section".into()))?;
                if ks.k_set.iter().any(|&k| !(k > 0.0)) {
                    return Err(Error::Config("k values must be positive".into()));
                }
            }
            ExperimentKind::Verify => {}
        }
        Ok(())
    }
}
