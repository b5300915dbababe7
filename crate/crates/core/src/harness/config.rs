use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{EvolveConfig, FitnessKind, ProxyConfig, TrainConfig};
use crate::losses::{GenomeLayout, LossKey};
use crate::model::ModelConfig;
use crate::synthgen::{DatasetConfig, Modality};

use super::probe::ProbeConfig;

pub const CONFIG_VERSION: u32 = 1;

pub const DATASET_FILE: &str = "dataset.evds";
pub const LABELS_FILE: &str = "labels.txt";
pub const HISTORY_FILE: &str = "history.ndjson";
pub const TIMINGS_FILE: &str = "timings.ndjson";
pub const BEST_WEIGHTS_FILE: &str = "best.weights";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_DIR: &str = "report";

/// A distillation term from an auxiliary encoder's hidden layer (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillEdge {
    pub source: Modality,
    pub layer: usize,
}

/// Active loss terms; together they fix the genome layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSelection {
    pub tasks: Vec<LossKey>,
    pub distill: Vec<DistillEdge>,
}

impl Default for LossSelection {
    fn default() -> Self {
        let full = GenomeLayout::full();
        let mut tasks = Vec::new();
        let mut distill = Vec::new();
        for key in full.keys() {
            match *key {
                LossKey::Distill(source, layer) => distill.push(DistillEdge { source, layer }),
                k => tasks.push(k),
            }
        }
        Self { tasks, distill }
    }
}

impl LossSelection {
    pub fn layout(&self) -> Result<GenomeLayout> {
        let mut keys = Vec::with_capacity(self.tasks.len() + self.distill.len());
        for k in &self.tasks {
            if matches!(k, LossKey::Distill(..)) {
                return Err(Error::invalid(format!("{k} belongs under distill, not tasks")));
            }
            keys.push(*k);
        }
        for e in &self.distill {
            let k = LossKey::Distill(e.source, e.layer);
            k.check()?;
            keys.push(k);
        }
        GenomeLayout::new(keys)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitnessSettings {
    pub kind: FitnessKind,
    /// Clusters; `None` uses the dataset's class count.
    pub k: Option<usize>,
    pub zipf_s: f64,
    pub trials: usize,
}

impl Default for FitnessSettings {
    fn default() -> Self {
        Self {
            kind: FitnessKind::Elo,
            k: None,
            zipf_s: 1.0,
            trials: 20,
        }
    }
}

/// Everything one experiment needs. Stored as versioned JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub losses: LossSelection,
    #[serde(default)]
    pub fitness: FitnessSettings,
    #[serde(default)]
    pub evolve: EvolveConfig,
    #[serde(default)]
    pub proxy: ProxyConfig,
    /// Final training run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Seeds model initialization and final training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/dataset.evds`.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    /// Defaults to `<output_dir>/labels.txt`.
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            losses: LossSelection::default(),
            fitness: FitnessSettings::default(),
            evolve: EvolveConfig::default(),
            proxy: ProxyConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
            output_dir: default_output_dir(),
            dataset_path: None,
            labels_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::format(
                "config",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        self.dataset.validate()?;
        self.model.validate(self.dataset.frames)?;
        let layout = self.layout()?;
        for e in &self.losses.distill {
            if e.layer > self.model.hidden.len() {
                return Err(Error::invalid(format!(
                    "distillation from {:?} layer {} but the encoder has {} hidden layers",
                    e.source,
                    e.layer,
                    self.model.hidden.len()
                )));
            }
        }
        if layout.dim() == 0 {
            return Err(Error::invalid("no loss terms are active"));
        }
        self.proxy.validate()?;
        if self.evolve.budget == 0 {
            return Err(Error::invalid("evolve budget must be at least 1"));
        }
        if self.fitness.trials == 0 || self.clusters() == 0 {
            return Err(Error::invalid("fitness needs at least one trial and one cluster"));
        }
        if !(self.fitness.zipf_s > 0.0) {
            return Err(Error::invalid("fitness zipf_s must be positive"));
        }
        self.probe.validate()
    }

    pub fn layout(&self) -> Result<GenomeLayout> {
        self.losses.layout()
    }

    pub fn clusters(&self) -> usize {
        self.fitness.k.unwrap_or(self.dataset.num_classes)
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn dataset_file(&self) -> PathBuf {
        self.dataset_path.clone().unwrap_or_else(|| self.out_path(DATASET_FILE))
    }

    pub fn labels_file(&self) -> PathBuf {
        self.labels_path.clone().unwrap_or_else(|| self.out_path(LABELS_FILE))
    }
}
