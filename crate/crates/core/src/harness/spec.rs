use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, BoundaryConfig, Norm};
use crate::dictlearn::DictLearnConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::{ClassifierConfig, TrainConfig, TrainMode};

use super::data::SynthSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Classifier alone, natural training.
    Natural,
    /// Frontend plus classifier.
    Defended,
    /// Classifier alone, PGD adversarial training.
    Adversarial,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Natural => "natural",
            Variant::Defended => "defended",
            Variant::Adversarial => "adversarial",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// `SCDS` file or CIFAR-10 batches at `path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub synthetic: SynthSpec,
    /// Leading images used for training; the next `test` for evaluation.
    pub train: usize,
    pub test: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            seed: 0,
            synthetic: SynthSpec {
                samples: 1200,
                ..SynthSpec::default()
            },
            train: 1000,
            test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySpec {
    /// Training patches sampled for dictionary learning.
    pub patches: usize,
    pub learn: DictLearnConfig,
    /// Use this `SCFD` file instead of learning one.
    pub path: Option<PathBuf>,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            patches: 10_000,
            learn: DictLearnConfig::default(),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub variants: Vec<Variant>,
    /// Empty axes fall back to the attack's (or frontend's) own value.
    pub eps: Vec<f64>,
    pub top_t: Vec<usize>,
    pub top_u: Vec<usize>,
    pub restarts: Vec<usize>,
    /// When set, δ = ratio · ε at every grid point.
    pub step_ratio: Option<f64>,
    /// Test images attacked per grid point.
    pub examples: usize,
    /// Start each ε point (ascending) from the previous point's perturbation.
    pub warm_start: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Defended],
            eps: Vec::new(),
            top_t: Vec::new(),
            top_u: Vec::new(),
            restarts: Vec::new(),
            step_ratio: Some(0.125),
            examples: 100,
            warm_start: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub variants: Vec<Variant>,
    pub examples: usize,
    pub boundary_examples: usize,
    pub linf: AttackConfig,
    pub l2: AttackConfig,
    pub l1: AttackConfig,
    pub boundary: BoundaryConfig,
}

impl Default for CompareSpec {
    fn default() -> Self {
        let l2 = AttackConfig {
            norm: Norm::L2,
            eps: 1.0,
            step: 0.125,
            ..Default::default()
        };
        let l1 = AttackConfig {
            norm: Norm::L1,
            eps: 10.0,
            step: 1.25,
            ..Default::default()
        };
        Self {
            variants: vec![Variant::Natural, Variant::Defended],
            examples: 100,
            boundary_examples: 20,
            linf: AttackConfig::default(),
            l2,
            l1,
            boundary: BoundaryConfig::default(),
        }
    }
}

/// Everything one experiment needs; loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    pub dictionary: DictionarySpec,
    pub frontend: FrontendConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    /// Training mode of the `adversarial` variant.
    pub adversarial_training: TrainMode,
    pub attacks: Vec<AttackSpec>,
    pub sweep: SweepSpec,
    pub compare: CompareSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSpec::default(),
            dictionary: DictionarySpec::default(),
            frontend: FrontendConfig::default(),
            classifier: ClassifierConfig {
                num_classes: 4,
                ..Default::default()
            },
            train: TrainConfig::default(),
            adversarial_training: TrainMode::Adversarial {
                eps: 8.0 / 255.0,
                step: 1.0 / 255.0,
                steps: 10,
            },
            attacks: vec![AttackSpec {
                name: "linf-pgd".into(),
                attack: AttackConfig::default(),
            }],
            sweep: SweepSpec::default(),
            compare: CompareSpec::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dictionary.learn.validate()?;
        if self.dictionary.path.is_none() {
            self.frontend.validate(self.dictionary.learn.atoms)?;
        }
        for a in &self.attacks {
            a.attack.validate()?;
        }
        let s = &self.sweep;
        if s.examples == 0 {
            return Err(Error::Config("sweep.examples must be >= 1".into()));
        }
        if s.eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config("sweep.eps values must be >= 0".into()));
        }
        if s.restarts.contains(&0) || s.top_t.contains(&0) {
            return Err(Error::Config("sweep restarts and top_t values must be >= 1".into()));
        }
        if self.data.source == DataSource::File && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for file data".into()));
        }
        if self.data.train == 0 || self.data.test == 0 {
            return Err(Error::Config("data.train and data.test must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&canon).expect("spec serializes")))
    }
}

/// Annotated default configuration for `print-schema`.
pub fn schema_text() -> String {
    let body = ExperimentSpec::default().to_toml().expect("default spec serializes");
    format!(
        "# Experiment configuration. Every key is optional; shown values are the\n\
         # defaults. Norms are \"1\", \"2\" or \"inf\"; losses are \"cross-entropy\"\n\
         # or \"cw-margin\"; variants are \"natural\", \"defended\", \"adversarial\".\n\
         # Sweep axes left empty fall back to the attack's own setting.\n\n{body}"
    )
}
