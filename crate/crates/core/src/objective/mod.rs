//! Composite training loss, AdamW with warmup/cosine schedule, and the
//! training loop.

mod config;
mod train;

use std::rc::Rc;

use rand::RngCore;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{build_mask, MaskKind, Model, ModelInput, Param};
use crate::numerics::{AbsErrItem, CeItem, Tape, Var};
use crate::vocab::Vocabulary;

pub use config::{TrainConfig, IGNORED_KEYS};
pub use train::{metrics_csv, train, StepMetrics, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub sl_sigma: f64,
    pub soft_scale: f64,
    pub mae_scale: f64,
    pub split_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sl_sigma: 0.01,
            soft_scale: 1.0,
            mae_scale: 1.0,
            split_scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sl_sigma > 0.0 && self.sl_sigma.is_finite()) {
            return Err(Error::Config(format!("SL_sigma = {} must be positive", self.sl_sigma)));
        }
        for (name, s) in [
            ("soft_labels_scale", self.soft_scale),
            ("mae_loss_scale", self.mae_scale),
            ("split_loss_scale", self.split_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} = {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Gaussian-smoothed one-hot over `width` local bins centred on `k`.
pub fn soft_target(width: usize, k: usize, sigma: f64) -> Vec<f64> {
    assert!(k < width, "true bin {k} outside range of width {width}");
    let w: Vec<f64> = (0..width)
        .map(|i| {
            let d = i as f64 - k as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Scalar values of the loss terms for one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub soft: f64,
    pub mae: f64,
    pub split: f64,
}

impl LossParts {
    pub fn add(&mut self, other: &LossParts) {
        self.total += other.total;
        self.soft += other.soft;
        self.mae += other.mae;
        self.split += other.split;
    }

    pub fn scaled(&self, c: f64) -> LossParts {
        LossParts {
            total: self.total * c,
            soft: self.soft * c,
            mae: self.mae * c,
            split: self.split * c,
        }
    }
}

/// Per-row targets for one sequence: row `p - 1` predicts position `p`.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub soft: Vec<CeItem>,
    pub mae: Vec<AbsErrItem>,
    pub split: Vec<CeItem>,
    pub boundary: usize,
}

impl LossTargets {
    pub fn build(seq: &TokenSequence, vocab: &Vocabulary, cfg: &LossConfig) -> Result<Self> {
        let t = seq.len();
        let mut soft = Vec::new();
        let mut mae = Vec::new();
        let mut split = Vec::new();
        let mut midpoints: Vec<Option<Rc<Vec<f64>>>> = vec![None; vocab.n_modalities()];
        let n_targets = t.saturating_sub(1);
        let first_split = seq.visit_boundary.max(1);
        let n_split = t.saturating_sub(first_split);
        let n_cont = (1..t).filter(|&p| vocab.modalities[seq.modalities[p]].is_continuous()).count();
        for p in 1..t {
            let spec = vocab.modality(seq.modalities[p])?;
            let range = spec.token_range();
            if range.is_empty() {
                return Err(Error::InsufficientData(format!("modality `{}` has an empty token range", spec.name)));
            }
            let local = seq.tokens[p].checked_sub(range.start).filter(|&k| k < range.len()).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "token {} at position {p} is outside modality `{}`",
                    seq.tokens[p], spec.name
                ))
            })?;
            let target = soft_target(range.len(), local, cfg.sl_sigma);
            let item = |weight: f64| CeItem {
                row: p - 1,
                start: range.start,
                end: range.end,
                target: target.clone(),
                weight,
            };
            soft.push(item(cfg.soft_scale / n_targets as f64));
            if p >= first_split {
                split.push(item(cfg.split_scale / n_split as f64));
            }
            if spec.is_continuous() {
                let mids = midpoints[spec.id].get_or_insert_with(|| Rc::new(spec.midpoints.clone())).clone();
                mae.push(AbsErrItem {
                    row: p - 1,
                    start: range.start,
                    end: range.end,
                    midpoints: mids,
                    truth: seq.values[p],
                    weight: cfg.mae_scale / (n_cont as f64 * spec.train_sd),
                });
            }
        }
        Ok(Self {
            soft,
            mae,
            split,
            boundary: seq.visit_boundary,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.soft.is_empty()
    }
}

/// Composite loss of one sequence on `tape`: soft CE and z-scored MAE under
/// the causal mask plus soft CE of visit-2 targets under the split mask.
/// Returns `None` when the sequence has fewer than two tokens.
pub fn sequence_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    vars: &[Var<'t>],
    seq: &TokenSequence,
    vocab: &Vocabulary,
    cfg: &LossConfig,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Option<(Var<'t>, LossParts)>> {
    let targets = LossTargets::build(seq, vocab, cfg)?;
    if targets.is_empty() {
        return Ok(None);
    }
    let input = ModelInput::from_sequence(seq, vocab);
    let n = input.len();
    let causal = Rc::new(build_mask(MaskKind::Causal, n)?);
    let logits = model.forward(tape, vars, &input, causal, reborrow(&mut dropout_rng))?.logits;
    let soft = logits.soft_cross_entropy(targets.soft)?;
    let mut total = soft;
    let mut parts = LossParts {
        soft: soft.value().item(),
        ..LossParts::default()
    };
    if !targets.mae.is_empty() {
        let mae = logits.expectation_abs_error(targets.mae)?;
        parts.mae = mae.value().item();
        total = total.add(mae)?;
    }
    if !targets.split.is_empty() {
        let mask = Rc::new(build_mask(MaskKind::SplitContext(targets.boundary), n)?);
        let split_logits = model.forward(tape, vars, &input, mask, dropout_rng)?.logits;
        let split = split_logits.soft_cross_entropy(targets.split)?;
        parts.split = split.value().item();
        total = total.add(split)?;
    }
    parts.total = total.value().item();
    Ok(Some((total, parts)))
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Loss terms of one sequence without gradients or dropout.
pub fn evaluate_loss(model: &Model, seq: &TokenSequence, vocab: &Vocabulary, cfg: &LossConfig) -> Result<Option<LossParts>> {
    let tape = Tape::new();
    let vars = model.register(&tape, false);
    Ok(sequence_loss(model, &tape, &vars, seq, vocab, cfg, None)?.map(|(_, p)| p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
    /// `total`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak_lr * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return if step == self.warmup { self.peak_lr } else { self.min_lr };
        }
        let frac = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= c);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, eps: f64, weight_decay: f64, clip_norm: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Paper defaults: betas (0.9, 0.999), eps 1e-8, no decay, clip 0.1.
    pub fn with_defaults(params: &[Param]) -> Self {
        Self::new(params, 0.9, 0.999, 1e-8, 0.0, 0.1)
    }

    /// Clips `grads` to the global norm, then applies one bias-corrected
    /// update with decoupled weight decay. Returns the pre-clip norm.
    pub fn update(&mut self, params: &mut [Param], grads: &mut [Vec<f64>], lr: f64) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer gradients",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if g.len() != p.tensor.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer gradient",
                    left: p.tensor.shape.clone(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let norm = clip_global_norm(grads, self.clip_norm);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data.iter_mut().enumerate() {
                *w -= lr * self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
