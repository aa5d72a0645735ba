use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Standardization;
use crate::layers::NetworkConfig;
use crate::loss::LossKind;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::taxonomy::{lookup, Taxonomy};

/// Adaptive-moment optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optional changes to the preset network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkOverrides {
    pub nb_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub out_heads: Option<usize>,
    pub dropout: Option<f64>,
    pub attn_dropout: Option<Vec<f64>>,
}

/// Patient-level fold protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
    /// When false only the first outer fold is evaluated.
    pub cross_validate: bool,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            outer: 7,
            inner: 4,
            seed: 0,
            cross_validate: true,
        }
    }
}

/// Inner-fold selection grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub enabled: bool,
    pub thresholds: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            enabled: true,
            thresholds: vec![0.3, 0.5, 0.7],
            learning_rates: vec![1e-3, 1e-2],
        }
    }
}

/// Everything that determines an experiment's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Preset name or hierarchy string.
    pub taxonomy: String,
    /// `paper-gat`, `gat`, `gcn`, `sage` or `mlp`.
    pub model: String,
    pub network: NetworkOverrides,
    pub loss: LossKind,
    pub use_constraint_at_inference: bool,
    pub k: usize,
    pub standardization: Standardization,
    pub threshold: f64,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    pub folds: FoldConfig,
    pub grid: GridConfig,
    /// Always `sum`: losses are summed over classes and cells.
    pub reduction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            taxonomy: "fc-deep".into(),
            model: "paper-gat".into(),
            network: NetworkOverrides::default(),
            loss: LossKind::Mcloss,
            use_constraint_at_inference: true,
            k: 7,
            standardization: Standardization::Zscore,
            threshold: DEFAULT_THRESHOLD,
            optimizer: OptimizerConfig::default(),
            seeds: vec![0, 1, 2, 3],
            folds: FoldConfig::default(),
            grid: GridConfig::default(),
            reduction: "sum".into(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// The same experiment as a flat baseline: cross-entropy, no constraint anywhere.
    pub fn flat(&self) -> Self {
        ExperimentConfig {
            loss: LossKind::Bce,
            use_constraint_at_inference: false,
            ..self.clone()
        }
    }

    pub fn is_flat(&self) -> bool {
        self.loss == LossKind::Bce && !self.use_constraint_at_inference
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.optimizer.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.reduction != "sum" {
            return Err(Error::Config(format!("unsupported reduction {:?}", self.reduction)));
        }
        if self.grid.enabled && (self.grid.thresholds.is_empty() || self.grid.learning_rates.is_empty()) {
            return Err(Error::Config("selection grid is empty".into()));
        }
        self.taxonomy()?;
        self.network_config(1)?;
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        lookup(&self.taxonomy).map_err(|e| Error::Config(e.to_string()))
    }

    /// Network shape for a taxonomy with `classes` classes.
    pub fn network_config(&self, classes: usize) -> Result<NetworkConfig> {
        let mut n = NetworkConfig::preset(&self.model, crate::data::MARKERS.len(), classes)
            .map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.network;
        if let Some(v) = o.nb_layers {
            n.nb_layers = v;
        }
        if let Some(v) = o.hidden_dim {
            n.hidden_dim = v;
        }
        if let Some(v) = o.num_heads {
            n.num_heads = v;
        }
        if let Some(v) = o.out_heads {
            n.out_heads = v;
        }
        if let Some(v) = o.dropout {
            n.dropout = v;
        }
        if let Some(v) = &o.attn_dropout {
            n.attn_dropout = v.clone();
        }
        Ok(n)
    }

    /// Hex digest of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
