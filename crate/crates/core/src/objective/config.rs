//! Flat `key = value` training configuration.

use sha2::{Digest, Sha256};

use super::{LossConfig, Schedule};
use crate::corpus::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::vocab::Vocabulary;

/// Keys accepted for compatibility but not acted on.
pub const IGNORED_KEYS: &[&str] = &[
    "optimizer",
    "embd_scaling",
    "use_value_extras",
    "zero_init_mlp",
    "batch_per_gpu",
    "chance_to_choose_removal_of_modalities_at_dist",
    "chance_to_remove_time_series_data",
    "temporal_masking_chance",
    "temporal_masking_k_mean",
    "temporal_masking_k_std",
    "temporal_masking_subset_fraction",
    "max_attention_masking_by_correlation_chance",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_embd: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_value_extras: usize,
    pub dropout: f64,
    pub continuous_pe_base_dim: usize,
    pub max_seq_length: usize,
    pub init_std: f64,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub gamma: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Validate every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_embd: 768,
            n_layers: 14,
            n_heads: 2,
            head_dim: 64,
            n_value_extras: 2,
            dropout: 0.2,
            continuous_pe_base_dim: 512,
            max_seq_length: crate::corpus::MAX_SEQ_LEN,
            init_std: 0.02,
            lr: 3e-4,
            gamma: 0.1,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            clip_norm: 0.1,
            epochs: 18,
            max_steps: None,
            batch_size: 16,
            val_fraction: 0.2,
            eval_every: 0,
            seed: 42,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Single-CPU configuration: width 64, two layers, no dropout.
    pub fn desk() -> Self {
        Self {
            n_embd: 64,
            n_layers: 2,
            n_heads: 2,
            head_dim: 32,
            dropout: 0.0,
            continuous_pe_base_dim: 64,
            max_seq_length: 512,
            lr: 3e-3,
            warmup_steps: 20,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            n_value_extras: self.n_value_extras,
            dropout: self.dropout,
            cont_pe_dim: self.continuous_pe_base_dim,
            max_seq_len: self.max_seq_length,
            init_std: self.init_std,
            ..ModelConfig::new(vocab, self.n_embd, self.n_layers, self.n_heads, self.head_dim)
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        Schedule {
            peak_lr: self.lr,
            min_lr: self.lr * self.gamma,
            warmup: self.warmup_steps,
            total: total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("lr = {} must be positive and gamma = {} in [0, 1]", self.lr, self.gamma)));
        }
        if !(0.0..1.0).contains(&self.b1) || !(0.0..1.0).contains(&self.b2) || !(self.eps > 0.0) {
            return Err(Error::Config("b1, b2 must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and clip_norm positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction = {} not in [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors, keys in [`IGNORED_KEYS`] are accepted and returned.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let mut cfg = Self::default();
        let mut ignored = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if IGNORED_KEYS.contains(&key) {
                ignored.push(key.to_string());
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok((cfg, ignored))
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("`{key}` has unparseable value `{value}`"))
        }
        let a = &mut self.augment;
        match key {
            "n_embd" => self.n_embd = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "n_value_extras" => self.n_value_extras = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "continuous_pe_base_dim" => self.continuous_pe_base_dim = num(key, value)?,
            "max_seq_length" => self.max_seq_length = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "dim_feedforward_scaling" => {
                if num::<f64>(key, value)? != 4.0 {
                    return Err("dim_feedforward_scaling must be 4".into());
                }
            }
            "lr" => self.lr = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "b1" => self.b1 = num(key, value)?,
            "b2" => self.b2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = Some(num(key, value)?),
            "batch_size" => self.batch_size = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "soft_labels_scale" => self.loss.soft_scale = num(key, value)?,
            "SL_sigma" => self.loss.sl_sigma = num(key, value)?,
            "mae_loss_scale" => self.loss.mae_scale = num(key, value)?,
            "split_loss_scale" => self.loss.split_scale = num(key, value)?,
            "augmentation_chance" => a.noise_chance = num(key, value)?,
            "augmentation_rate" => a.noise_rate = num(key, value)?,
            "random_removal_chance" => a.token_removal_chance = num(key, value)?,
            "random_removal_rate" => a.token_removal_rate = num(key, value)?,
            "random_block_removal_chance" => a.block_removal_chance = num(key, value)?,
            "random_block_removal_rate" => a.block_removal_rate = num(key, value)?,
            "random_block_removal_number" => {
                let n: f64 = num(key, value)?;
                if n < 0.0 || n.fract() != 0.0 {
                    return Err(format!("`{key}` must be a whole number, got `{value}`"));
                }
                a.block_removal_blocks = n as usize;
            }
            "random_modality_subset_chance" => a.modality_subset_chance = num(key, value)?,
            "random_modality_subset_fraction" => a.modality_subset_fraction = num(key, value)?,
            "random_modality_exclusion_chance" => a.modality_exclusion_chance = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let a = &self.augment;
        let mut lines = vec![
            format!("n_embd = {}", self.n_embd),
            format!("n_layers = {}", self.n_layers),
            format!("n_heads = {}", self.n_heads),
            format!("head_dim = {}", self.head_dim),
            format!("n_value_extras = {}", self.n_value_extras),
            format!("dropout = {:?}", self.dropout),
            format!("continuous_pe_base_dim = {}", self.continuous_pe_base_dim),
            format!("max_seq_length = {}", self.max_seq_length),
            format!("init_std = {:?}", self.init_std),
            format!("lr = {:?}", self.lr),
            format!("gamma = {:?}", self.gamma),
            format!("b1 = {:?}", self.b1),
            format!("b2 = {:?}", self.b2),
            format!("eps = {:?}", self.eps),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("warmup_steps = {}", self.warmup_steps),
            format!("clip_norm = {:?}", self.clip_norm),
            format!("epochs = {}", self.epochs),
        ];
        if let Some(m) = self.max_steps {
            lines.push(format!("max_steps = {m}"));
        }
        lines.extend([
            format!("batch_size = {}", self.batch_size),
            format!("val_fraction = {:?}", self.val_fraction),
            format!("eval_every = {}", self.eval_every),
            format!("seed = {}", self.seed),
            format!("soft_labels_scale = {:?}", self.loss.soft_scale),
            format!("SL_sigma = {:?}", self.loss.sl_sigma),
            format!("mae_loss_scale = {:?}", self.loss.mae_scale),
            format!("split_loss_scale = {:?}", self.loss.split_scale),
            format!("augmentation_chance = {:?}", a.noise_chance),
            format!("augmentation_rate = {:?}", a.noise_rate),
            format!("random_removal_chance = {:?}", a.token_removal_chance),
            format!("random_removal_rate = {:?}", a.token_removal_rate),
            format!("random_block_removal_chance = {:?}", a.block_removal_chance),
            format!("random_block_removal_rate = {:?}", a.block_removal_rate),
            format!("random_block_removal_number = {}", a.block_removal_blocks),
            format!("random_modality_subset_chance = {:?}", a.modality_subset_chance),
            format!("random_modality_subset_fraction = {:?}", a.modality_subset_fraction),
            format!("random_modality_exclusion_chance = {:?}", a.modality_exclusion_chance),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
