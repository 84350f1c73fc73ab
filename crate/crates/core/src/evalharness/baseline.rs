//! Visit-1 to visit-2 pairs and the copy-forward and linear baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::{ols, predict_linear};
use super::Predictions;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Minimum training pairs for a per-modality linear fit.
pub const MIN_LINEAR_PAIRS: usize = 5;

/// One continuous modality observed in both visits of one participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalPair {
    pub participant: String,
    pub modality: usize,
    /// Last visit-1 observation.
    pub v1_value: f64,
    pub v1_token: usize,
    /// First visit-2 observation.
    pub truth: f64,
    pub age: f64,
    pub sex_index: usize,
    /// Last visit-1 token of the BMI modality, 0 when absent.
    pub bmi_token: usize,
    /// Model forecast, filled by longitudinal evaluation.
    pub model: Option<f64>,
}

impl LongitudinalPair {
    pub fn features(&self) -> Vec<f64> {
        vec![self.v1_token as f64, self.age, self.sex_index as f64, self.bmi_token as f64]
    }
}

/// Pairs for every continuous modality present in both visits.
pub fn longitudinal_pairs(seqs: &[TokenSequence], vocab: &Vocabulary, bmi_modality: Option<usize>) -> Vec<LongitudinalPair> {
    let mut out = Vec::new();
    for seq in seqs {
        let b = seq.visit_boundary;
        if b == 0 || b >= seq.len() {
            continue;
        }
        let mut last_v1: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for p in 0..b {
            last_v1.insert(seq.modalities[p], (seq.values[p], seq.tokens[p]));
        }
        let bmi_token = bmi_modality.and_then(|m| last_v1.get(&m)).map_or(0, |&(_, t)| t);
        let mut first_v2: BTreeMap<usize, f64> = BTreeMap::new();
        for p in b..seq.len() {
            first_v2.entry(seq.modalities[p]).or_insert(seq.values[p]);
        }
        for (m, truth) in first_v2 {
            let Some(&(v1_value, v1_token)) = last_v1.get(&m) else { continue };
            if !vocab.modalities[m].is_continuous() {
                continue;
            }
            out.push(LongitudinalPair {
                participant: seq.participant.clone(),
                modality: m,
                v1_value,
                v1_token,
                truth,
                age: seq.age,
                sex_index: seq.sex.index(),
                bmi_token,
                model: None,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Locf,
    Linear,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "locf" => Ok(Self::Locf),
            "linear" => Ok(Self::Linear),
            other => Err(Error::InvalidArgument(format!("unknown baseline `{other}` (expected locf or linear)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselinePredictions {
    /// Aligned with the test pairs; `None` where the baseline has no model.
    pub predictions: Vec<Option<f64>>,
    /// Modalities skipped for lack of training pairs.
    pub skipped: Vec<usize>,
}

impl BaselinePredictions {
    pub fn to_predictions(&self, test: &[LongitudinalPair]) -> Predictions {
        let mut out = Predictions::default();
        for (pair, pred) in test.iter().zip(&self.predictions) {
            if let Some(p) = pred {
                out.continuous.entry(pair.modality).or_default().push((*p, pair.truth));
            }
        }
        out
    }
}

/// LOCF copies the visit-1 value. Linear fits least squares per modality on
/// `[v1 token, age, sex, bmi token]` from `train`.
pub fn baseline_predict(kind: BaselineKind, train: &[LongitudinalPair], test: &[LongitudinalPair]) -> Result<BaselinePredictions> {
    match kind {
        BaselineKind::Locf => Ok(BaselinePredictions {
            predictions: test.iter().map(|p| Some(p.v1_value)).collect(),
            skipped: Vec::new(),
        }),
        BaselineKind::Linear => {
            let mut by_mod: BTreeMap<usize, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
            for p in train {
                let e = by_mod.entry(p.modality).or_default();
                e.0.push(p.features());
                e.1.push(p.truth);
            }
            let mut coefs = BTreeMap::new();
            let mut skipped = Vec::new();
            let wanted: std::collections::BTreeSet<usize> = test.iter().map(|p| p.modality).collect();
            for m in wanted {
                match by_mod.get(&m) {
                    Some((x, y)) if y.len() >= MIN_LINEAR_PAIRS => {
                        coefs.insert(m, ols(x, y)?);
                    }
                    _ => skipped.push(m),
                }
            }
            Ok(BaselinePredictions {
                predictions: test.iter().map(|p| coefs.get(&p.modality).map(|c| predict_linear(c, &p.features()))).collect(),
                skipped,
            })
        }
    }
}
