//! Expected-value decoding, next-token and longitudinal evaluation,
//! baselines, cross-modal probes, biological age and report statistics.

mod baseline;
mod bioage;
pub mod plot;
mod report;
pub mod stats;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::{Sex, TimeVec, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{parallel_input, MaskKind, Model, ModelInput};
use crate::numerics::softmax;
use crate::vocab::{ModalityKind, Vocabulary};

pub use baseline::{baseline_predict, longitudinal_pairs, BaselineKind, BaselinePredictions, LongitudinalPair};
pub use bioage::{bioage, BioAge, BIOAGE_ALPHA, BIOAGE_FOLDS};
pub use report::{MetricReport, ModalityMetrics};
pub use stats::{bh_fdr, fisher_z_compare, pearson, pearson_with_ci, PearsonResult};

/// Expectation of the bin midpoints under the softmax of `row` restricted to
/// the modality's token range.
pub fn decode_expected(row: &[f64], vocab: &Vocabulary, modality: usize) -> Result<f64> {
    let spec = vocab.modality(modality)?;
    if !spec.is_continuous() {
        return Err(Error::WrongKind {
            modality: format!("{} (use top-K)", spec.name),
            expected: "continuous",
            actual: "categorical",
        });
    }
    let range = spec.token_range();
    if row.len() < range.end {
        return Err(Error::ShapeMismatch {
            op: "decode_expected",
            left: vec![row.len()],
            right: vec![range.end],
        });
    }
    let p = softmax(&row[range]);
    let e: f64 = p.iter().zip(&spec.midpoints).map(|(p, m)| p * m).sum();
    let (lo, hi) = (spec.midpoints[0], spec.midpoints[spec.midpoints.len() - 1]);
    Ok(e.clamp(lo, hi))
}

/// Zero-based rank of `true_local` among the modality's logits; ties go to
/// the lower token id.
pub fn category_rank(row: &[f64], vocab: &Vocabulary, modality: usize, true_local: usize) -> Result<usize> {
    let spec = vocab.modality(modality)?;
    let range = spec.token_range();
    if true_local >= range.len() || row.len() < range.end {
        return Err(Error::InvalidArgument(format!(
            "category {true_local} or row width {} invalid for modality `{}`",
            row.len(),
            spec.name
        )));
    }
    let local = &row[range];
    let z = local[true_local];
    Ok(local.iter().enumerate().filter(|&(i, &v)| v > z || (v == z && i < true_local)).count())
}

/// Fraction of rows whose true category is among the top `k` of the
/// modality's range.
pub fn topk_accuracy(rows: &[&[f64]], truths: &[usize], vocab: &Vocabulary, modality: usize, k: usize) -> Result<f64> {
    let spec = vocab.modality(modality)?;
    if spec.is_continuous() {
        return Err(Error::WrongKind {
            modality: spec.name.clone(),
            expected: "categorical",
            actual: "continuous",
        });
    }
    if k == 0 || k > spec.num_tokens() {
        return Err(Error::InvalidArgument(format!(
            "top-{k} requested for `{}` with {} categories",
            spec.name,
            spec.num_tokens()
        )));
    }
    if rows.len() != truths.len() || rows.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "topk_accuracy",
            left: vec![rows.len()],
            right: vec![truths.len()],
        });
    }
    let mut hits = 0;
    for (row, &t) in rows.iter().zip(truths) {
        if category_rank(row, vocab, modality, t)? < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Per-modality predictions gathered during evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    /// `(predicted expectation, true value)` per continuous modality.
    pub continuous: BTreeMap<usize, Vec<(f64, f64)>>,
    /// Rank of the true category per categorical modality.
    pub ranks: BTreeMap<usize, Vec<usize>>,
}

impl Predictions {
    fn merge(&mut self, other: Predictions) {
        for (m, v) in other.continuous {
            self.continuous.entry(m).or_default().extend(v);
        }
        for (m, v) in other.ranks {
            self.ranks.entry(m).or_default().extend(v);
        }
    }

    fn record(&mut self, row: &[f64], vocab: &Vocabulary, modality: usize, token: usize, value: f64) -> Result<()> {
        let spec = vocab.modality(modality)?;
        match spec.kind {
            ModalityKind::Continuous => {
                let pred = decode_expected(row, vocab, modality)?;
                self.continuous.entry(modality).or_default().push((pred, value));
            }
            ModalityKind::Categorical => {
                let rank = category_rank(row, vocab, modality, token - spec.cum_base)?;
                self.ranks.entry(modality).or_default().push(rank);
            }
        }
        Ok(())
    }

    pub fn report(&self, vocab: &Vocabulary) -> MetricReport {
        MetricReport::from_predictions(self, vocab)
    }
}

/// Causal next-token prediction at every position after the first, pooled
/// per modality across participants.
pub fn eval_within_visit(model: &Model, vocab: &Vocabulary, seqs: &[TokenSequence]) -> Result<Predictions> {
    let parts: Vec<Predictions> = seqs
        .par_iter()
        .map(|seq| {
            let mut out = Predictions::default();
            if seq.len() < 2 {
                return Ok(out);
            }
            let logits = model.logits(&ModelInput::from_sequence(seq, vocab), MaskKind::Causal)?;
            for p in 1..seq.len() {
                out.record(logits.row(p - 1), vocab, seq.modalities[p], seq.tokens[p], seq.values[p])?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut all = Predictions::default();
    parts.into_iter().for_each(|p| all.merge(p));
    Ok(all)
}

/// Visit-2 targets of one sequence: the first visit-2 occurrence of every
/// modality, as `(modality, time, token, value)`.
pub fn visit2_targets(seq: &TokenSequence) -> Vec<(usize, TimeVec, usize, f64)> {
    let mut seen = BTreeMap::new();
    for p in seq.visit_boundary..seq.len() {
        seen.entry(seq.modalities[p]).or_insert((seq.times[p], seq.tokens[p], seq.values[p]));
    }
    seen.into_iter().map(|(m, (t, tok, v))| (m, t, tok, v)).collect()
}

/// Longitudinal predictions for one participant: visit-1 context, one
/// parallel probe per target. Returns one logits row per target.
pub fn predict_visit2(
    model: &Model,
    vocab: &Vocabulary,
    seq: &TokenSequence,
    targets: &[(usize, TimeVec)],
) -> Result<Vec<Vec<f64>>> {
    let context = seq.first_visit();
    let ctx = ModelInput::from_sequence(&context, vocab);
    let probe = parallel_input(&ctx, targets)?;
    let logits = model.logits(&probe.input, probe.mask)?;
    Ok(probe.probe_rows.iter().map(|&r| logits.row(r).to_vec()).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LongitudinalEval {
    /// Forecasts for every visit-2 modality, continuous and categorical.
    pub predictions: Predictions,
    /// Continuous modalities seen in both visits, with the model forecast
    /// filled in; baselines are scored on exactly these pairs.
    pub pairs: Vec<LongitudinalPair>,
}

impl LongitudinalEval {
    /// Model forecasts restricted to the baseline-comparable pairs.
    pub fn pair_predictions(&self) -> Predictions {
        let mut out = Predictions::default();
        for p in &self.pairs {
            if let Some(m) = p.model {
                out.continuous.entry(p.modality).or_default().push((m, p.truth));
            }
        }
        out
    }
}

/// Visit-1 to visit-2 forecasts for every participant with content in both
/// visits, all targets decoded in one parallel-mask pass.
pub fn eval_longitudinal(
    model: &Model,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    bmi_modality: Option<usize>,
) -> Result<LongitudinalEval> {
    let parts: Vec<(Predictions, Vec<LongitudinalPair>)> = seqs
        .par_iter()
        .map(|seq| {
            let mut out = Predictions::default();
            if seq.visit_boundary == 0 || seq.visit_boundary >= seq.len() {
                return Ok((out, Vec::new()));
            }
            let targets = visit2_targets(seq);
            let queries: Vec<(usize, TimeVec)> = targets.iter().map(|t| (t.0, t.1)).collect();
            let rows = predict_visit2(model, vocab, seq, &queries)?;
            let mut pairs = longitudinal_pairs(std::slice::from_ref(seq), vocab, bmi_modality);
            for ((m, _, tok, v), row) in targets.iter().zip(&rows) {
                out.record(row, vocab, *m, *tok, *v)?;
            }
            for pair in &mut pairs {
                let i = targets.iter().position(|t| t.0 == pair.modality).expect("pair modality is a target");
                pair.model = Some(decode_expected(&rows[i], vocab, pair.modality)?);
            }
            Ok((out, pairs))
        })
        .collect::<Result<_>>()?;
    let mut all = LongitudinalEval::default();
    for (p, pairs) in parts {
        all.predictions.merge(p);
        all.pairs.extend(pairs);
    }
    Ok(all)
}

/// Fixed covariates for minimal-input probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeContext {
    pub time: TimeVec,
    pub age: f64,
    pub sex: Sex,
}

/// For every bin of `m_in`, the expectation of `m_out` given a single
/// `m_in` token at that bin. Returns `(input midpoint, expectation)`; for a
/// categorical input the category index stands in for the midpoint.
pub fn crossmodal_sweep(
    model: &Model,
    vocab: &Vocabulary,
    m_in: usize,
    m_out: usize,
    ctx: &ProbeContext,
) -> Result<Vec<(f64, f64)>> {
    let spec_in = vocab.modality(m_in)?;
    let spec_out = vocab.modality(m_out)?;
    if !spec_out.is_continuous() {
        return Err(Error::WrongKind {
            modality: spec_out.name.clone(),
            expected: "continuous",
            actual: "categorical",
        });
    }
    (0..spec_in.num_tokens())
        .into_par_iter()
        .map(|b| {
            let (x, value_z) = if spec_in.is_continuous() {
                (spec_in.midpoints[b], spec_in.midpoints[b] / spec_in.train_sd)
            } else {
                (b as f64, 0.0)
            };
            let input = ModelInput {
                tokens: vec![spec_in.cum_base + b],
                value_z: vec![value_z],
                modalities: vec![m_in],
                times: vec![ctx.time],
                positions: vec![0],
                query_modalities: vec![m_out],
                query_times: vec![ctx.time],
                age: ctx.age,
                sex: ctx.sex,
            };
            let logits = model.logits(&input, MaskKind::Causal)?;
            Ok((x, decode_expected(logits.row(0), vocab, m_out)?))
        })
        .collect()
}

#[cfg(test)]
mod tests;
