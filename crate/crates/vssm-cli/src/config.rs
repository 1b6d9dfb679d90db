//! Run configuration: profile defaults, optional TOML file, CLI overrides.
//! Precedence is CLI > file > profile defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vssm_core::model::VssmHyper;
use vssm_core::ssm::ScanMode;

use crate::{CmdError, CmdResult};

/// Named size/schedule presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Small stacks and a dataset subset; minutes on a desktop CPU.
    Desk,
    /// The full-scale configuration: 4 layers of width 1024, state 16,
    /// 200 epochs, the five-point learning-rate grid.
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> CmdResult<Profile> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(CmdError::config(format!(
                "unknown profile '{other}' (expected desk or paper)"
            ))),
        }
    }
}

/// Everything a run needs besides the dataset itself.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    // Model dims (t_len/obs_dim come from the dataset at load time).
    pub z_comp: usize,
    pub n_cat: usize,
    pub sigma: f64,
    pub tau: f64,
    pub width: usize,
    pub state: usize,
    pub hidden: usize,
    pub layers: usize,
    // Schedule.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub lambda: f64,
    pub hard_latents: bool,
    pub train_scan_parallel: bool,
    pub valid_fraction: f64,
    pub checkpoint_every: usize,
    /// Importance samples for the per-epoch validation likelihood curves.
    pub eval_k: usize,
    /// Cap on training items (0 = all).
    pub max_items: usize,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> RunConfig {
        match profile {
            Profile::Desk => RunConfig {
                seed: 0,
                threads: 1,
                z_comp: 8,
                n_cat: 16,
                sigma: 0.1,
                tau: 1.0,
                width: 128,
                state: 8,
                hidden: 128,
                layers: 2,
                epochs: 20,
                batch_size: 64,
                lr_grid: vec![1e-3],
                lambda: 1.0,
                hard_latents: true,
                train_scan_parallel: true,
                valid_fraction: 0.1,
                checkpoint_every: 5,
                eval_k: 10,
                max_items: 8000,
            },
            Profile::Paper => RunConfig {
                seed: 0,
                threads: 1,
                z_comp: 8,
                n_cat: 16,
                sigma: 0.1,
                tau: 1.0,
                width: 1024,
                state: 16,
                hidden: 1024,
                layers: 4,
                epochs: 200,
                batch_size: 64,
                lr_grid: vec![1e-2, 5e-3, 1e-3, 5e-4, 1e-4],
                lambda: 1.0,
                hard_latents: true,
                train_scan_parallel: true,
                valid_fraction: 0.1,
                checkpoint_every: 10,
                eval_k: 10,
                max_items: 0,
            },
        }
    }

    pub fn hyper(&self, t_len: usize, obs_dim: usize) -> VssmHyper {
        VssmHyper {
            t_len,
            obs_dim,
            z_comp: self.z_comp,
            n_cat: self.n_cat,
            sigma: self.sigma,
            tau: self.tau,
            width: self.width,
            state: self.state,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn train_mode(&self) -> ScanMode {
        if self.train_scan_parallel {
            ScanMode::Parallel
        } else {
            ScanMode::Sequential
        }
    }

    pub fn validate(&self) -> CmdResult<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CmdError::config("epochs and batch size must be positive"));
        }
        if !(self.sigma > 0.0) || !(self.tau > 0.0) {
            return Err(CmdError::config("sigma and tau must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(CmdError::config("lambda must be non-negative"));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(CmdError::config("valid fraction must be in (0, 1)"));
        }
        if self.lr_grid.is_empty() {
            return Err(CmdError::config("learning-rate grid must be non-empty"));
        }
        Ok(())
    }
}

/// TOML file shape; every field optional, missing ones fall back to the
/// profile defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub model: Option<FileModel>,
    pub train: Option<FileTrain>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileModel {
    pub z: Option<usize>,
    pub n: Option<usize>,
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    pub width: Option<usize>,
    pub state: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTrain {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub hard_latents: Option<bool>,
    pub train_scan_parallel: Option<bool>,
    pub valid_fraction: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub eval_k: Option<usize>,
    pub max_items: Option<usize>,
}

pub fn load_file(path: &Path) -> CmdResult<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::io_config(path, e))?;
    toml::from_str(&text).map_err(|e| CmdError::config(format!("{}: {e}", path.display())))
}

pub fn apply_file(cfg: &mut RunConfig, file: &FileConfig) {
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.threads {
        cfg.threads = v;
    }
    if let Some(m) = &file.model {
        if let Some(v) = m.z {
            cfg.z_comp = v;
        }
        if let Some(v) = m.n {
            cfg.n_cat = v;
        }
        if let Some(v) = m.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = m.tau {
            cfg.tau = v;
        }
        if let Some(v) = m.width {
            cfg.width = v;
        }
        if let Some(v) = m.state {
            cfg.state = v;
        }
        if let Some(v) = m.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = m.layers {
            cfg.layers = v;
        }
    }
    if let Some(t) = &file.train {
        if let Some(v) = t.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = &t.lr {
            cfg.lr_grid = v.clone();
        }
        if let Some(v) = t.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = t.hard_latents {
            cfg.hard_latents = v;
        }
        if let Some(v) = t.train_scan_parallel {
            cfg.train_scan_parallel = v;
        }
        if let Some(v) = t.valid_fraction {
            cfg.valid_fraction = v;
        }
        if let Some(v) = t.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if let Some(v) = t.eval_k {
            cfg.eval_k = v;
        }
        if let Some(v) = t.max_items {
            cfg.max_items = v;
        }
    }
}
