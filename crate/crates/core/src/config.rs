//! Flat `key = value` run configuration merged from file, environment and flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DEFAULT_MAX_ATOMS;
use crate::edm::EdmConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "CRYSTALITE_";

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `CRYSTALITE_LR=1e-3` becomes `lr = 1e-3`.
pub fn env_entries<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_ascii_lowercase(), v)))
        .collect();
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub edm: EdmConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub token_dim: usize,
    pub use_pca: bool,
    pub max_atoms: usize,
    /// Metric logging interval in training steps.
    pub log_every: usize,
    /// Sampler steps for the periodic samples drawn during training.
    pub log_sample_steps: usize,
    pub log_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            edm: EdmConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            token_dim: 16,
            use_pca: true,
            max_atoms: DEFAULT_MAX_ATOMS,
            log_every: 500,
            log_sample_steps: 50,
            log_samples: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    match v {
        "" | "none" | "off" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.sampler;
        let e = &mut self.edm;
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                t.seed = self.seed;
            }
            "width" => m.width = parse(key, v)?,
            "layers" => m.layers = parse(key, v)?,
            "heads" => {
                m.heads = parse(key, v)?;
                m.gem.num_heads = m.heads;
            }
            "token_dim" => {
                self.token_dim = parse(key, v)?;
                m.d_h = self.token_dim;
            }
            "use_pca" => self.use_pca = parse(key, v)?,
            "coord_freqs" => m.coord_freqs = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "gem" => m.gem.enabled = parse(key, v)?,
            "gem_radius" => m.gem.radius = parse(key, v)?,
            "gem_fourier_freqs" => m.gem.fourier_freqs = parse(key, v)?,
            "gem_rbf_count" => m.gem.rbf_count = parse(key, v)?,
            "gem_rbf_max" => m.gem.rbf_max = parse(key, v)?,
            "gem_edge_hidden" => m.gem.edge_hidden = parse(key, v)?,
            "gem_gate" => m.gem.gate = parse(key, v)?,
            "gem_distance_bias" => m.gem.distance_bias = parse(key, v)?,
            "gem_edge_bias" => m.gem.edge_bias = parse(key, v)?,
            "p_mean" => e.p_mean = parse(key, v)?,
            "p_std" => e.p_std = parse(key, v)?,
            "sigma_data" => {
                let x = parse(key, v)?;
                (e.sigma_data_h, e.sigma_data_f, e.sigma_data_lat) = (x, x, x);
            }
            "sigma_data_h" => e.sigma_data_h = parse(key, v)?,
            "sigma_data_f" => e.sigma_data_f = parse(key, v)?,
            "sigma_data_lat" => e.sigma_data_lat = parse(key, v)?,
            "lambda_h" => e.lambda_h = parse(key, v)?,
            "lambda_f" => e.lambda_f = parse(key, v)?,
            "lambda_lat" => e.lambda_lat = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "warmup" => t.warmup = parse(key, v)?,
            "ema_decay" => t.ema_decay = parse(key, v)?,
            "csp_fraction" => t.csp_fraction = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "augment" => t.augment = parse(key, v)?,
            "sample_steps" => s.steps = parse(key, v)?,
            "sigma_min" => s.sigma_min = parse(key, v)?,
            "sigma_max" => s.sigma_max = parse(key, v)?,
            "rho" => s.rho = parse(key, v)?,
            "s_churn" => s.s_churn = parse(key, v)?,
            "s_noise" => s.s_noise = parse(key, v)?,
            "s_min" => s.s_min = parse(key, v)?,
            "s_max" => s.s_max = parse(key, v)?,
            "aa_types" => s.aa_types = parse_opt(key, v)?,
            "aa_coords" => s.aa_coords = parse_opt(key, v)?,
            "aa_lattice" => s.aa_lattice = parse_opt(key, v)?,
            "aa_cap" => s.alpha_max = parse(key, v)?,
            "max_atoms" => self.max_atoms = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "log_sample_steps" => self.log_sample_steps = parse(key, v)?,
            "log_samples" => self.log_samples = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let (m, t, s, e) = (&self.model, &self.train, &self.sampler, &self.edm);
        let list: Vec<(&'static str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("width", m.width.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("token_dim", self.token_dim.to_string()),
            ("use_pca", self.use_pca.to_string()),
            ("coord_freqs", m.coord_freqs.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("gem", m.gem.enabled.to_string()),
            ("gem_radius", m.gem.radius.to_string()),
            ("gem_fourier_freqs", m.gem.fourier_freqs.to_string()),
            ("gem_rbf_count", m.gem.rbf_count.to_string()),
            ("gem_rbf_max", m.gem.rbf_max.to_string()),
            ("gem_edge_hidden", m.gem.edge_hidden.to_string()),
            ("gem_gate", m.gem.gate.to_string()),
            ("gem_distance_bias", m.gem.distance_bias.to_string()),
            ("gem_edge_bias", m.gem.edge_bias.to_string()),
            ("p_mean", e.p_mean.to_string()),
            ("p_std", e.p_std.to_string()),
            ("sigma_data_h", e.sigma_data_h.to_string()),
            ("sigma_data_f", e.sigma_data_f.to_string()),
            ("sigma_data_lat", e.sigma_data_lat.to_string()),
            ("lambda_h", e.lambda_h.to_string()),
            ("lambda_f", e.lambda_f.to_string()),
            ("lambda_lat", e.lambda_lat.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("warmup", t.warmup.to_string()),
            ("ema_decay", t.ema_decay.to_string()),
            ("csp_fraction", t.csp_fraction.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("augment", t.augment.to_string()),
            ("sample_steps", s.steps.to_string()),
            ("sigma_min", s.sigma_min.to_string()),
            ("sigma_max", s.sigma_max.to_string()),
            ("rho", s.rho.to_string()),
            ("s_churn", s.s_churn.to_string()),
            ("s_noise", s.s_noise.to_string()),
            ("s_min", s.s_min.to_string()),
            ("s_max", s.s_max.to_string()),
            ("aa_types", opt_str(s.aa_types)),
            ("aa_coords", opt_str(s.aa_coords)),
            ("aa_lattice", opt_str(s.aa_lattice)),
            ("aa_cap", s.alpha_max.to_string()),
            ("max_atoms", self.max_atoms.to_string()),
            ("log_every", self.log_every.to_string()),
            ("log_sample_steps", self.log_sample_steps.to_string()),
            ("log_samples", self.log_samples.to_string()),
        ];
        list.into_iter().collect()
    }

    /// Defaults, then file, then environment, then flags.
    pub fn resolve(file: Option<&Path>, env: &[(String, String)], flags: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            for (k, v) in parse_flat(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in env.iter().chain(flags) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.edm.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.model.d_h != self.token_dim {
            return Err(Error::Config("model token width differs from token_dim".into()));
        }
        if self.max_atoms == 0 {
            return Err(Error::Config("max_atoms must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
