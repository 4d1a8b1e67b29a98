//! JSON checkpoint: configuration, weights, EMA weights, optimizer state and data statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Params};
use crate::tokenizer::TokenTable;
use crate::train::AdamState;

pub const FORMAT: &str = "xtal-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub step: usize,
    pub model: Model,
    pub ema: Params,
    pub optimizer: AdamState,
    pub token_table: TokenTable,
    /// Empirical distribution of atoms per cell in the training set.
    pub atom_count_hist: BTreeMap<usize, f64>,
}

impl Checkpoint {
    pub fn new(
        config: RunConfig,
        step: usize,
        model: Model,
        ema: Params,
        optimizer: AdamState,
        token_table: TokenTable,
        atom_count_hist: BTreeMap<usize, f64>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            config,
            step,
            model,
            ema,
            optimizer,
            token_table,
            atom_count_hist,
        }
    }

    /// The model carrying EMA weights, used for sampling.
    pub fn ema_model(&self) -> Model {
        Model { cfg: self.model.cfg.clone(), edm: self.model.edm, params: self.ema.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != FORMAT || ck.version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Config("checkpoint config hash mismatch".into()));
        }
        if ck.token_table.token_dim() != ck.model.cfg.d_h {
            return Err(Error::Config("token table width differs from the model".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::mp20_elements;

    #[test]
    fn save_load() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("width", "16"), ("layers", "1"), ("heads", "2"), ("gem_edge_hidden", "8")] {
            cfg.set(k, v).unwrap();
        }
        let model = Model::new(cfg.model.clone(), cfg.edm, 1).unwrap();
        let table = TokenTable::build(&mp20_elements(), 16, true).unwrap();
        let ck = Checkpoint::new(
            cfg,
            3,
            model.clone(),
            model.params.clone(),
            AdamState::new(&model.params),
            table,
            [(2, 0.5), (4, 0.5)].into_iter().collect(),
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        let mut bad = ck.clone();
        bad.config_hash = "0".into();
        bad.save(&p).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
