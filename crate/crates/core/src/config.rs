//! Experiment configuration and run manifests.
//!
//! Configs are TOML documents with [env], [model], [train] and [eval]
//! sections. Every key mirrors a module config field, unknown keys are
//! rejected, and parsing a serialized config reproduces it exactly. Runs
//! always write the fully resolved config next to their outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EpisodeConfig;
use crate::error::{Error, Result};
use crate::models::{DiscMode, LatentSpec};
use crate::train::{KlMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub horizon: usize,
    pub goal_x_min: f64,
    pub goal_x_max: f64,
    pub goal_y_abs_min: f64,
    pub goal_y_abs_max: f64,
    pub goal_travel: f64,
    pub proximity: f64,
    pub p_lower: f64,
    pub resample_window: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        EnvSection {
            horizon: e.horizon,
            goal_x_min: e.goal_x.0,
            goal_x_max: e.goal_x.1,
            goal_y_abs_min: e.goal_y_abs.0,
            goal_y_abs_max: e.goal_y_abs.1,
            goal_travel: e.goal_travel,
            proximity: e.proximity,
            p_lower: e.p_lower,
            resample_window: e.resample_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub disc_embed: usize,
    /// "continuous" or "discrete".
    pub latent_mode: String,
    pub latent_dim: usize,
    pub discrete_blocks: usize,
    pub discrete_block_size: usize,
    pub n_modes: usize,
    pub posemb_dim: usize,
    /// "trajectory" or "per_step".
    pub disc_mode: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 256,
            disc_embed: 32,
            latent_mode: "continuous".into(),
            latent_dim: 2,
            discrete_blocks: 3,
            discrete_block_size: 16,
            n_modes: 2,
            posemb_dim: 8,
            disc_mode: "trajectory".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub f: f64,
    pub lambda_adv: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_bc: f64,
    pub disc_lr: f64,
    pub total_steps: u64,
    pub disc_updates: usize,
    pub bc_aux_weight: f64,
    pub grad_clip: f64,
    /// "prior_encoder", "encoder_prior" or "prior_ce_bottleneck".
    pub kl_mode: String,
    pub eval_every: u64,
    pub infomgail_weight: f64,
    /// Negative disables annealing; otherwise the floor f is annealed to.
    pub anneal_f_min: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            f: t.f,
            lambda_adv: t.lambda_adv,
            beta: t.beta,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_bc: t.lr_bc,
            disc_lr: t.disc_lr,
            total_steps: t.total_steps,
            disc_updates: t.disc_updates,
            bc_aux_weight: t.bc_aux_weight,
            grad_clip: t.grad_clip,
            kl_mode: t.kl_mode.name().into(),
            eval_every: t.eval_every,
            infomgail_weight: t.infomgail_weight,
            anneal_f_min: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub minade_k: usize,
    /// Data trajectories scored in the final minADE pass.
    pub minade_episodes: usize,
    pub smoothing_decay: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 10_000, minade_k: 16, minade_episodes: 200, smoothing_decay: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Apply `section.key=value` overrides on the TOML tree, rejecting
    /// unknown keys through the typed re-parse.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{key}` is not section.key")))?;
            let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
                .or_else(|_| toml::from_str(&format!("v = \"{raw}\"")))
                .map_err(|e| Error::Config(format!("override value `{raw}`: {e}")))?;
            let parsed = parsed.get("v").cloned().expect("wrapped value");
            let table = value
                .get_mut(section)
                .and_then(|s| s.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown section `{section}`")))?;
            if !table.contains_key(field) {
                return Err(Error::Config(format!("unknown key `{section}.{field}`")));
            }
            table.insert(field.to_string(), parsed);
        }
        let text = toml::to_string_pretty(&value).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            horizon: self.env.horizon,
            goal_x: (self.env.goal_x_min, self.env.goal_x_max),
            goal_y_abs: (self.env.goal_y_abs_min, self.env.goal_y_abs_max),
            goal_travel: self.env.goal_travel,
            proximity: self.env.proximity,
            p_lower: self.env.p_lower,
            resample_window: self.env.resample_window,
        }
    }

    pub fn latent_spec(&self) -> Result<LatentSpec> {
        match self.model.latent_mode.as_str() {
            "continuous" => Ok(LatentSpec::Continuous { dim: self.model.latent_dim }),
            "discrete" => Ok(LatentSpec::Discrete {
                blocks: self.model.discrete_blocks,
                block_size: self.model.discrete_block_size,
            }),
            other => Err(Error::Config(format!("unknown latent_mode `{other}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let disc_mode = match self.model.disc_mode.as_str() {
            "trajectory" => DiscMode::Trajectory,
            "per_step" => DiscMode::PerStep,
            other => return Err(Error::Config(format!("unknown disc_mode `{other}`"))),
        };
        Ok(TrainConfig {
            f: self.train.f,
            lambda_adv: self.train.lambda_adv,
            beta: self.train.beta,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            lr_bc: self.train.lr_bc,
            disc_lr: self.train.disc_lr,
            total_steps: self.train.total_steps,
            disc_updates: self.train.disc_updates,
            bc_aux_weight: self.train.bc_aux_weight,
            grad_clip: self.train.grad_clip,
            kl_mode: KlMode::parse(&self.train.kl_mode)?,
            disc_mode,
            latent: self.latent_spec()?,
            eval_every: self.train.eval_every,
            eval_episodes: self.eval.episodes,
            infomgail_weight: self.train.infomgail_weight,
            hidden: self.model.hidden,
            disc_embed: self.model.disc_embed,
            n_modes: self.model.n_modes,
            posemb_dim: self.model.posemb_dim,
            anneal_f_min: if self.train.anneal_f_min >= 0.0 {
                Some(self.train.anneal_f_min)
            } else {
                None
            },
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Run provenance: everything needed to reproduce the learning curve
/// bit for bit, plus an index of produced files. Written atomically when
/// the run starts and finalized when it ends.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub algo: String,
    pub seed: u64,
    pub data_file: String,
    pub data_sha256: String,
    pub config_file: String,
    pub config_sha256: String,
    pub binary_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        let tmp = path.with_extension("toml.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
