//! Mini-batch training with per-sequence tapes and ordered gradient reduction.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sequence_loss, AdamW, LossParts, TrainConfig};
use crate::corpus::{assemble_sequence, augment, ParticipantRecord, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::numerics::Tape;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub best: Checkpoint,
    pub best_val_loss: f64,
    pub best_step: usize,
    /// Parameters after the last completed step.
    pub last: Model,
    pub metrics: Vec<StepMetrics>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Step at which the loss became non-finite; `best` is the last good state.
    pub diverged_at: Option<usize>,
}

/// Trains a fresh model. Each sequence in a batch gets its own tape and RNG
/// stream, and gradients are summed in batch order, so results do not
/// depend on the number of worker threads.
pub fn train(records: &[ParticipantRecord], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InsufficientData("training cohort is empty".into()));
    }
    let model_cfg = cfg.model_config(vocab);
    let mut model = Model::new(model_cfg, cfg.seed)?;

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut stream(cfg.seed, u64::MAX));
    let n_val = if records.len() < 2 {
        0
    } else {
        ((cfg.val_fraction * records.len() as f64).round() as usize).clamp(usize::from(cfg.val_fraction > 0.0), records.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let assemble = |idx: &[usize]| -> Result<Vec<TokenSequence>> {
        idx.iter().map(|&i| assemble_sequence(&records[i], vocab, cfg.max_seq_length)).collect()
    };
    let train_seqs = assemble(train_idx)?;
    // A single participant is validated on itself.
    let val_seqs = if val_idx.is_empty() { train_seqs.clone() } else { assemble(val_idx)? };

    let steps_per_epoch = train_seqs.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs * steps_per_epoch);
    let schedule = cfg.schedule(total);
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };
    let mut opt = AdamW::new(&model.params, cfg.b1, cfg.b2, cfg.eps, cfg.weight_decay, cfg.clip_norm);

    let mut best = model.clone();
    let mut best_val = validation_loss(&model, &val_seqs, vocab, cfg)?;
    let mut best_step = 0;
    let mut metrics = Vec::with_capacity(total);
    let mut diverged_at = None;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..train_seqs.len()).collect();
        perm.shuffle(&mut stream(cfg.seed, u64::MAX - 1 - epoch as u64));
        for batch in perm.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let lr = schedule.lr_at(step + 1);
            let (grads, parts) = match batch_gradients(&model, &train_seqs, batch, vocab, cfg, step) {
                Ok(r) => r,
                Err(Error::NonFiniteValue(_)) => {
                    diverged_at = Some(step + 1);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            step += 1;
            if let Some(mut grads) = grads {
                if !parts.total.is_finite() {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                if let Err(e) = opt.update(&mut model.params, &mut grads, lr) {
                    if matches!(e, Error::NonFiniteGradient(_)) {
                        diverged_at = Some(step);
                        break 'epochs;
                    }
                    return Err(e);
                }
            }
            let val_loss = if step % eval_every == 0 || step == total {
                let v = validation_loss(&model, &val_seqs, vocab, cfg)?;
                if !v.is_finite() {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                if v < best_val {
                    best_val = v;
                    best = model.clone();
                    best_step = step;
                }
                Some(v)
            } else {
                None
            };
            metrics.push(StepMetrics {
                step,
                lr,
                loss: parts,
                val_loss,
            });
        }
    }

    let mut ckpt = Checkpoint::new(best, vocab.clone(), cfg.seed)?;
    ckpt.meta.insert("library_version".into(), crate::VERSION.into());
    ckpt.meta.insert("train_config_hash".into(), cfg.hash());
    ckpt.meta.insert("best_step".into(), best_step.to_string());
    ckpt.meta.insert("best_val_loss".into(), format!("{best_val:?}"));
    ckpt.meta.insert("steps".into(), step.to_string());
    let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].id.clone()).collect();
    Ok(TrainOutcome {
        best: ckpt,
        best_val_loss: best_val,
        best_step,
        last: model,
        metrics,
        train_ids: ids(train_idx),
        val_ids: ids(val_idx),
        diverged_at,
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

type SeqGrad = (Vec<Vec<f64>>, LossParts);

/// Mean gradient and loss over the sequences of `batch` that have targets.
fn batch_gradients(
    model: &Model,
    seqs: &[TokenSequence],
    batch: &[usize],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Option<Vec<Vec<f64>>>, LossParts)> {
    let per_seq: Vec<Option<SeqGrad>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = stream(cfg.seed, (step * cfg.batch_size + slot) as u64);
            let seq = augment(&seqs[i], vocab, &cfg.augment, &mut rng);
            let tape = Tape::new();
            let vars = model.register(&tape, true);
            let dropout: Option<&mut dyn RngCore> = if cfg.dropout > 0.0 { Some(&mut rng) } else { None };
            let Some((loss, parts)) = sequence_loss(model, &tape, &vars, &seq, vocab, &cfg.loss, dropout)? else {
                return Ok(None);
            };
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteValue(format!("loss of `{}`", seq.participant)));
            }
            let mut g = tape.backward(loss)?;
            let grads = vars
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
                .collect();
            Ok(Some((grads, parts)))
        })
        .collect::<Result<_>>()?;

    let mut sum: Option<Vec<Vec<f64>>> = None;
    let mut parts = LossParts::default();
    let mut n = 0usize;
    for (g, p) in per_seq.into_iter().flatten() {
        n += 1;
        parts.add(&p);
        match sum.as_mut() {
            None => sum = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
        }
    }
    if n == 0 {
        return Ok((None, parts));
    }
    let inv = 1.0 / n as f64;
    let mut sum = sum.expect("n > 0");
    sum.iter_mut().flatten().for_each(|x| *x *= inv);
    Ok((Some(sum), parts.scaled(inv)))
}

/// Mean total loss over sequences with targets, without augmentation.
fn validation_loss(model: &Model, seqs: &[TokenSequence], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<f64> {
    let losses: Vec<Option<LossParts>> =
        seqs.par_iter().map(|s| super::evaluate_loss(model, s, vocab, &cfg.loss)).collect::<Result<_>>()?;
    let vals: Vec<f64> = losses.into_iter().flatten().map(|p| p.total).collect();
    if vals.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Metrics log as CSV. The leading comment line records provenance.
pub fn metrics_csv(metrics: &[StepMetrics], provenance: &str) -> String {
    let mut out = format!("# {provenance}\nstep,lr,loss,soft,mae,split,val_loss\n");
    for m in metrics {
        let val = m.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.9e},{:.9},{:.9},{:.9},{:.9},{}\n",
            m.step, m.lr, m.loss.total, m.loss.soft, m.loss.mae, m.loss.split, val
        ));
    }
    out
}
