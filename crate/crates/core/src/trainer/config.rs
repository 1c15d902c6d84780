//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{CapacitySchedule, Likelihood};

pub const DEFAULT_AUG_SEED: u64 = 0;

/// Candidate pipelines scored when choosing the `K` used for training.
pub const DEFAULT_PIPELINE_POOL: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Number of representations `K`.
    pub k: usize,
    /// Clusters per representation `T`.
    pub t: usize,
    /// Number of clusterings `M` the aspect vector ranges over.
    pub m: usize,
    pub latent_dim: usize,
    pub hidden: [usize; 2],
    pub tau: f64,
    pub beta: f64,
    pub sigma0: f64,
    pub learning_rate: f64,
    /// Learning rate of the mixing-weight logits, as a multiple of `learning_rate`.
    /// The logits are only `K` scalars steered by an HSIC gradient that Adam
    /// normalizes, so at the base rate they barely move before the first M-step.
    pub mixing_lr_scale: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub delta: f64,
    pub u_z_max: f64,
    /// `None` means `ln M`.
    pub u_c_max: Option<f64>,
    /// Fraction of `epochs` over which both capacities ramp up.
    pub capacity_ramp: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub aug_seed: u64,
    /// Size of the candidate pool the `K` pipelines are selected from; a pool
    /// no larger than `K` uses the first `K` sampled pipelines as they are.
    pub pipeline_pool: usize,
    pub e_steps_per_m_step: usize,
    pub warmup_epochs: usize,
    pub likelihood: Likelihood,
    pub resample_augmentations: bool,
    /// Re-run k-means every this many M-steps; 0 keeps the first centers.
    pub reinit_every: usize,
    /// Coarse-grained stage (augmentation mixing and HSIC).
    pub coarse: bool,
    /// Cluster term in the E-step.
    pub cluster_loss: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 2,
            t: 3,
            m: 2,
            latent_dim: 16,
            hidden: [256, 128],
            tau: 0.9,
            beta: 1.0,
            sigma0: 0.2,
            learning_rate: 1e-3,
            mixing_lr_scale: 100.0,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 1000,
            delta: 0.0005,
            u_z_max: 25.0,
            u_c_max: None,
            capacity_ramp: 0.5,
            batch_size: 128,
            seed: 0,
            aug_seed: DEFAULT_AUG_SEED,
            pipeline_pool: DEFAULT_PIPELINE_POOL,
            e_steps_per_m_step: 5,
            warmup_epochs: 60,
            likelihood: Likelihood::Gaussian,
            resample_augmentations: false,
            reinit_every: 0,
            coarse: true,
            cluster_loss: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.m < 1 || self.k < self.m {
            return fail(format!("need K >= M >= 1, got K={} M={}", self.k, self.m));
        }
        if self.t < 2 {
            return fail(format!("need T >= 2, got {}", self.t));
        }
        if !(self.tau > 0.0 && self.tau <= 2.0) {
            return fail(format!("tau must lie in (0, 2], got {}", self.tau));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return fail(format!("sigma0 must be positive, got {}", self.sigma0));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mixing_lr_scale >= 0.0) {
            return fail("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam constants out of range".into());
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.e_steps_per_m_step == 0 {
            return fail("e_steps_per_m_step must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.capacity_ramp) {
            return fail(format!("capacity_ramp must lie in [0, 1], got {}", self.capacity_ramp));
        }
        self.u_z_schedule()?;
        self.u_c_schedule()?;
        Ok(())
    }

    fn ramp_epochs(&self) -> usize {
        (self.epochs as f64 * self.capacity_ramp).round() as usize
    }

    pub fn u_z_schedule(&self) -> Result<CapacitySchedule> {
        CapacitySchedule::new(0.0, self.u_z_max, self.ramp_epochs())
    }

    pub fn u_c_schedule(&self) -> Result<CapacitySchedule> {
        let max = self.u_c_max.unwrap_or_else(|| (self.m as f64).ln());
        CapacitySchedule::new(0.0, max, self.ramp_epochs())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k" => self.k = parse(key, v)?,
            "t" => self.t = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "hidden1" => self.hidden[0] = parse(key, v)?,
            "hidden2" => self.hidden[1] = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "sigma0" => self.sigma0 = parse(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "mixing_lr_scale" => self.mixing_lr_scale = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "u_z_max" => self.u_z_max = parse(key, v)?,
            "u_c_max" => {
                self.u_c_max = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "capacity_ramp" => self.capacity_ramp = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "aug_seed" => self.aug_seed = parse(key, v)?,
            "pipeline_pool" => self.pipeline_pool = parse(key, v)?,
            "e_steps_per_m_step" => self.e_steps_per_m_step = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "likelihood" => self.likelihood = parse(key, v)?,
            "resample_augmentations" => self.resample_augmentations = parse_bool(key, v)?,
            "reinit_every" => self.reinit_every = parse(key, v)?,
            "coarse" => self.coarse = parse_bool(key, v)?,
            "cluster_loss" => self.cluster_loss = parse_bool(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Canonical text form; [`RunConfig::parse_text`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("k", self.k.to_string());
        kv("t", self.t.to_string());
        kv("m", self.m.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("hidden1", self.hidden[0].to_string());
        kv("hidden2", self.hidden[1].to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("beta", format!("{:?}", self.beta));
        kv("sigma0", format!("{:?}", self.sigma0));
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("mixing_lr_scale", format!("{:?}", self.mixing_lr_scale));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("adam_beta1", format!("{:?}", self.adam_beta1));
        kv("adam_beta2", format!("{:?}", self.adam_beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("epochs", self.epochs.to_string());
        kv("delta", format!("{:?}", self.delta));
        kv("u_z_max", format!("{:?}", self.u_z_max));
        kv("u_c_max", self.u_c_max.map_or("auto".into(), |u| format!("{u:?}")));
        kv("capacity_ramp", format!("{:?}", self.capacity_ramp));
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("aug_seed", self.aug_seed.to_string());
        kv("pipeline_pool", self.pipeline_pool.to_string());
        kv("e_steps_per_m_step", self.e_steps_per_m_step.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("likelihood", self.likelihood.to_string());
        kv("resample_augmentations", self.resample_augmentations.to_string());
        kv("reinit_every", self.reinit_every.to_string());
        kv("coarse", self.coarse.to_string());
        kv("cluster_loss", self.cluster_loss.to_string());
        s
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash_hex(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
