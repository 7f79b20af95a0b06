//! `key = value` run configuration with documented defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use neighbor_forcing::io::{format_key_values, parse_key_values};
use neighbor_forcing::model::{BlockPlan, DenoiserConfig, MaskMode};
use neighbor_forcing::synthdata::{DynamicsConfig, Nonlinearity};
use neighbor_forcing::training::{Stage, TrainConfig};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for model init, training batches and generation noise"),
    ("data_seed", "7", "seed of the synthetic dynamics and trajectories"),
    ("sequences", "16", "number of trajectories written by `data`"),
    ("frames", "120", "latent chunks per trajectory"),
    ("state_dim", "4", "dimension m of the hidden state path"),
    ("ambient_dim", "64", "dimension D of the rendered observations"),
    ("latent_dim", "16", "dimension d of each latent chunk"),
    ("delta_u", "0.1", "bound on the per-frame state step"),
    ("eps_r", "0.01", "bound on the rendering residual norm"),
    ("rho", "0.1", "recorded manifold neighborhood radius"),
    ("nonlinearity", "tanh", "render nonlinearity: tanh or identity"),
    ("n_layers", "2", "transformer layers"),
    ("n_heads", "2", "attention heads"),
    ("d_model", "64", "model width"),
    ("d_ff", "256", "feed-forward hidden width"),
    ("rope_base", "10000.0", "rotary embedding base"),
    ("lambda", "5", "ConvKV compression ratio (kernel = stride)"),
    ("rotate_memory_values", "false", "also rotate compressed values to their span start"),
    ("first_block", "6", "chunks in the first block"),
    ("next_block", "8", "chunks in every later block"),
    ("train_blocks", "3", "blocks per training window"),
    ("mask", "block-causal", "training mask: block-causal or none"),
    ("stage", "1", "training stage: 1 or 2"),
    ("steps", "2000", "optimizer steps"),
    ("batch_size", "4", "windows per optimizer step"),
    ("lr", "0.001", "Adam learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator epsilon"),
    ("t_min", "0.02", "lower end of the training step range"),
    ("t_max", "0.98", "upper end of the training step range"),
    ("freeze_denoiser", "true", "stage 2: train only the compressor"),
    ("target_loss", "none", "stop early once the 50-step mean loss is below this"),
    ("blocks", "6", "blocks generated by `generate`"),
    ("sampler_steps", "3", "Euler steps per block"),
    ("convkv", "on", "segmented cache with compression: on or off"),
    ("sequence", "0", "dataset trajectory supplying reference and condition"),
    ("precision", "f64", "generation precision: f64 or f32"),
    ("reps", "5", "timed repetitions per benchmark mode"),
    ("warmup", "1", "untimed benchmark repetitions"),
    ("zeroshot_seeds", "20", "runs per variant in the zero-shot experiment"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(&text)? {
            cfg.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let canonical = key.replace('-', "_");
        let (k, _, _) = KEYS
            .iter()
            .find(|(k, _, _)| *k == canonical)
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Sets `key` when a flag was given.
    pub fn apply<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not registered"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| anyhow!("config key {key}: cannot parse {raw:?}"))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            other => bail!("config key {key}: expected on/off, got {other:?}"),
        }
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            "none" | "" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// The resolved configuration in file syntax.
    pub fn render(&self) -> String {
        format_key_values(self.values.iter().map(|(k, v)| (*k, v.clone())))
    }

    pub fn dynamics(&self) -> Result<DynamicsConfig> {
        Ok(DynamicsConfig {
            state_dim: self.get("state_dim")?,
            ambient_dim: self.get("ambient_dim")?,
            latent_dim: self.get("latent_dim")?,
            delta_u: self.get("delta_u")?,
            eps_r: self.get("eps_r")?,
            rho: self.get("rho")?,
            nonlinearity: match self.raw("nonlinearity") {
                "tanh" => Nonlinearity::Tanh,
                "identity" => Nonlinearity::Identity,
                other => bail!("unknown nonlinearity {other:?}"),
            },
        })
    }

    /// Model shape; latent and condition widths follow the dataset.
    pub fn model(&self, latent_dim: usize, cond_dim: usize) -> Result<DenoiserConfig> {
        let cfg = DenoiserConfig {
            n_layers: self.get("n_layers")?,
            n_heads: self.get("n_heads")?,
            d_model: self.get("d_model")?,
            d_latent: latent_dim,
            d_cond: cond_dim,
            d_ff: self.get("d_ff")?,
            rope_base: self.get("rope_base")?,
            lambda: self.get("lambda")?,
            rotate_memory_values: self.flag("rotate_memory_values")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self, n_blocks: usize) -> Result<BlockPlan> {
        Ok(BlockPlan::new(self.get("first_block")?, self.get("next_block")?, n_blocks)?)
    }

    pub fn mask(&self) -> Result<MaskMode> {
        MaskMode::parse(self.raw("mask")).ok_or_else(|| anyhow!("unknown mask {:?}", self.raw("mask")))
    }

    pub fn stage(&self) -> Result<Stage> {
        match self.raw("stage") {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            other => bail!("stage must be 1 or 2, got {other:?}"),
        }
    }

    pub fn training(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            adam_eps: self.get("adam_eps")?,
            batch_size: self.get("batch_size")?,
            steps: self.get("steps")?,
            seed: self.get("seed")?,
            t_min: self.get("t_min")?,
            t_max: self.get("t_max")?,
            stage: self.stage()?,
            plan: self.plan(self.get("train_blocks")?)?,
            mask: self.mask()?,
            freeze_denoiser: self.flag("freeze_denoiser")?,
            log_every: 1,
            target_loss: self.optional("target_loss")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default();
        cfg.dynamics().unwrap();
        cfg.model(16, 8).unwrap();
        let t = cfg.training().unwrap();
        assert_eq!(t.plan.n_chunks(), 22);
        assert_eq!(t.target_loss, None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("learning_rate", "1").is_err());
        cfg.set("batch-size", "8").unwrap();
        assert_eq!(cfg.get::<usize>("batch_size").unwrap(), 8);
    }

    #[test]
    fn rendered_config_reloads() {
        let mut cfg = RunConfig::default();
        cfg.set("steps", "17").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, cfg.render()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back.render(), cfg.render());
    }
}
