use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::layers::{Network, NetworkConfig};
use crate::metrics::MetricsReport;
use crate::taxonomy::{lookup, Taxonomy};

const FORMAT: &str = "fchc-checkpoint";
const VERSION: u32 = 1;

/// Parameter tensor as little-endian `f64` bytes in base64.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl ParamBlob {
    fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        ParamBlob {
            rows: t.rows(),
            cols: t.cols(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::SchemaMismatch(format!("parameter blob: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::SchemaMismatch(
                "parameter blob length is not a multiple of 8".into(),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(self.rows, self.cols, values)
    }
}

/// Versioned, self-describing model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub network: NetworkConfig,
    pub taxonomy_spec: String,
    pub seed: u64,
    pub params: Vec<ParamBlob>,
    pub metrics: Option<MetricsReport>,
}

impl Checkpoint {
    pub fn new(
        network: &Network,
        cfg: &ExperimentConfig,
        t: &Taxonomy,
        seed: u64,
        metrics: Option<MetricsReport>,
    ) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: cfg.clone(),
            network: network.config.clone(),
            taxonomy_spec: t.spec_string().to_string(),
            seed,
            params: network.params.iter().map(ParamBlob::encode).collect(),
            metrics,
        }
    }

    pub fn network(&self) -> Result<Network> {
        let params: Vec<Tensor> = self.params.iter().map(ParamBlob::decode).collect::<Result<_>>()?;
        let shapes = self.network.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape()) {
            return Err(Error::SchemaMismatch(
                "parameter shapes do not match the network config".into(),
            ));
        }
        Ok(Network {
            config: self.network.clone(),
            params,
        })
    }

    /// The taxonomy the model was trained under, with preset names when the config names a preset.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let named = lookup(&self.config.taxonomy)
            .ok()
            .filter(|t| t.spec_string() == self.taxonomy_spec);
        match named {
            Some(t) => Ok(t),
            None => Taxonomy::parse(&self.taxonomy_spec),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::SchemaMismatch(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}
