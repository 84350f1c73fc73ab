//! Intervention-conditioned prediction: sequence edits, paired control and
//! treatment arms, eligibility filtering, monthly trajectories, synthetic
//! trial populations and concordance scoring.

mod arms;
mod catalog;
mod trial;

use serde::{Deserialize, Serialize};

use crate::corpus::{time_features_at, TokenSequence, MONTH_MINUTES};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub use arms::{
    control_arm, filter_eligible, four_arm, simulate_arms, treatment_arm, trajectory, ArmOptions, ArmResult, Comparator,
    ControlArm, Eligibility, EligibilityRule, FourArm, TrajectoryPoint, DEFAULT_THRESHOLDS, MAX_HORIZON_MONTHS,
};
pub use catalog::{Catalog, CatalogEntry};
pub use trial::{
    concordance, run_trial, sample_trial_population, trial_cohort, truncated_normal_mass, truncated_normal_sample, ConcordanceReport,
    ConcordanceRow, Published, TrialResult, MIN_TRUNCATION_MASS, AGE_VARIABLE, TrialSpec, TrialVariable,
};

/// Dosing frequencies in tokens per month, monthly through three times daily.
pub const FREQUENCIES: [u32; 9] = [1, 2, 3, 4, 6, 8, 10, 15, 20];
/// Treatment durations in months.
pub const DURATIONS: [u32; 9] = [1, 2, 3, 4, 6, 9, 12, 18, 24];
/// Exercise "three times weekly", encoded at 12 tokens per month although
/// "daily" is 10.
pub const THREE_TIMES_WEEKLY: u32 = 12;

pub const FREQUENCY_NAMES: [(&str, u32); 10] = [
    ("monthly", 1),
    ("bi-weekly", 2),
    ("weekly", 3),
    ("twice-weekly", 4),
    ("every-3-days", 6),
    ("every-2-days", 8),
    ("daily", 10),
    ("twice-daily", 15),
    ("three-times-daily", 20),
    ("three-times-weekly", THREE_TIMES_WEEKLY),
];

/// Frequency in tokens per month from a level name or a number.
pub fn parse_frequency(text: &str) -> Result<u32> {
    let t = text.trim().to_ascii_lowercase().replace(['_', ' '], "-");
    let f = match FREQUENCY_NAMES.iter().find(|(n, _)| *n == t) {
        Some(&(_, f)) => f,
        None => t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("unknown dosing frequency `{text}`")))?,
    };
    check_frequency(f)?;
    Ok(f)
}

fn check_frequency(f: u32) -> Result<()> {
    if FREQUENCIES.contains(&f) || f == THREE_TIMES_WEEKLY {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "dosing frequency {f} is not one of {FREQUENCIES:?} (or {THREE_TIMES_WEEKLY})"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKind {
    /// Appends `frequency * duration` tokens of one category, spaced
    /// `1 / frequency` months apart after the visit-1 content.
    CategoricalAppend {
        modality: String,
        category: usize,
        frequency: u32,
        duration: u32,
    },
    /// Multiplies every visit-1 value of the listed continuous modalities by
    /// `factor` and re-bins the tokens.
    ContinuousScale { modalities: Vec<String>, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub label: String,
    #[serde(flatten)]
    pub kind: InterventionKind,
}

impl InterventionSpec {
    pub fn append(label: impl Into<String>, modality: impl Into<String>, category: usize, frequency: u32, duration: u32) -> Self {
        Self {
            label: label.into(),
            kind: InterventionKind::CategoricalAppend {
                modality: modality.into(),
                category,
                frequency,
                duration,
            },
        }
    }

    pub fn scale(label: impl Into<String>, modalities: &[&str], factor: f64) -> Self {
        Self {
            label: label.into(),
            kind: InterventionKind::ContinuousScale {
                modalities: modalities.iter().map(|m| m.to_string()).collect(),
                factor,
            },
        }
    }

    /// Leaves every sequence unchanged.
    pub fn noop() -> Self {
        Self::scale("no-op", &[], 1.0)
    }

    /// CPAP: a 75% reduction of the apnoea-hypopnoea family.
    pub fn cpap(ahi_modalities: &[&str]) -> Self {
        Self::scale("CPAP", ahi_modalities, 0.25)
    }

    /// Checks grid membership and the factor sign; with a vocabulary also
    /// resolves modalities, kinds and category range.
    pub fn validate(&self, vocab: Option<&Vocabulary>) -> Result<()> {
        let bad = |m: String| Error::InvalidArgument(format!("intervention `{}`: {m}", self.label));
        match &self.kind {
            InterventionKind::CategoricalAppend {
                modality,
                category,
                frequency,
                duration,
            } => {
                check_frequency(*frequency).map_err(|e| bad(e.to_string()))?;
                if !DURATIONS.contains(duration) {
                    return Err(bad(format!("duration {duration} is not one of {DURATIONS:?}")));
                }
                if let Some(v) = vocab {
                    let spec = v.modality(v.modality_id(modality)?)?;
                    if spec.is_continuous() {
                        return Err(Error::WrongKind {
                            modality: spec.name.clone(),
                            expected: "categorical",
                            actual: "continuous",
                        });
                    }
                    if *category >= spec.num_tokens() {
                        return Err(bad(format!(
                            "category index {category} out of range for `{modality}` ({} categories)",
                            spec.num_tokens()
                        )));
                    }
                }
            }
            InterventionKind::ContinuousScale { modalities, factor } => {
                if !(factor.is_finite() && *factor > 0.0) {
                    return Err(bad(format!("scale factor {factor} must be positive and finite")));
                }
                if let Some(v) = vocab {
                    for m in modalities {
                        let spec = v.modality(v.modality_id(m)?)?;
                        if !spec.is_continuous() {
                            return Err(Error::WrongKind {
                                modality: spec.name.clone(),
                                expected: "continuous",
                                actual: "categorical",
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Stamp after which appended tokens and horizons are measured: the last
/// visit-1 token, or the first visit stamp for an empty context.
pub fn anchor_stamp(seq: &TokenSequence) -> i64 {
    match seq.visit_boundary {
        0 => seq.first_visit_stamp(),
        b => seq.stamps[b - 1],
    }
}

/// Minute stamp `months` after `start`.
pub fn months_after(start: i64, months: f64) -> i64 {
    start + (months * MONTH_MINUTES).round() as i64
}

/// `(token id, minute stamp)` for `frequency * months` doses: stamps
/// `start + k / frequency` months for `k = 1..=n`.
pub fn dosing_tokens(cum_base: usize, category: usize, frequency: u32, months: u32, start: i64) -> Vec<(usize, i64)> {
    let n = frequency * months;
    (1..=n)
        .map(|k| (cum_base + category, months_after(start, k as f64 / frequency as f64)))
        .collect()
}

/// Dosing schedule of a `CategoricalAppend` spec starting at `start`.
pub fn dosing_schedule(spec: &InterventionSpec, vocab: &Vocabulary, start: i64) -> Result<Vec<(usize, i64)>> {
    spec.validate(Some(vocab))?;
    match &spec.kind {
        InterventionKind::CategoricalAppend {
            modality,
            category,
            frequency,
            duration,
        } => {
            let m = vocab.modality_id(modality)?;
            Ok(dosing_tokens(vocab.modalities[m].cum_base, *category, *frequency, *duration, start))
        }
        InterventionKind::ContinuousScale { .. } => Err(Error::InvalidArgument(format!(
            "intervention `{}` scales values and has no dosing schedule",
            spec.label
        ))),
    }
}

/// Inserts `doses` of `modality` into `seq`, keeping streams sorted by
/// `(stamp, modality)`. Inserted tokens carry value 0 and sleep flag 0;
/// they count toward visit 1 when stamped before the second visit.
pub fn insert_tokens(seq: &TokenSequence, modality: usize, doses: &[(usize, i64)]) -> Result<TokenSequence> {
    if doses.is_empty() {
        return Ok(seq.clone());
    }
    let t = seq.len();
    let v2 = seq.visit_stamps.get(1).copied();
    struct Slot {
        stamp: i64,
        modality: usize,
        token: usize,
        value: f64,
        time: crate::corpus::TimeVec,
        first_visit: bool,
    }
    let mut slots: Vec<Slot> = (0..t)
        .map(|i| Slot {
            stamp: seq.stamps[i],
            modality: seq.modalities[i],
            token: seq.tokens[i],
            value: seq.values[i],
            time: seq.times[i],
            first_visit: i < seq.visit_boundary,
        })
        .collect();
    for &(token, stamp) in doses {
        slots.push(Slot {
            stamp,
            modality,
            token,
            value: 0.0,
            time: time_features_at(stamp, false, seq.year_base)?,
            first_visit: v2.is_none_or(|v| stamp < v),
        });
    }
    slots.sort_by_key(|s| (!s.first_visit, s.stamp, s.modality));
    let mut out = TokenSequence {
        tokens: slots.iter().map(|s| s.token).collect(),
        values: slots.iter().map(|s| s.value).collect(),
        modalities: slots.iter().map(|s| s.modality).collect(),
        times: slots.iter().map(|s| s.time).collect(),
        stamps: slots.iter().map(|s| s.stamp).collect(),
        visit_boundary: slots.iter().filter(|s| s.first_visit).count(),
        ..seq.clone()
    };
    let last = slots.last().expect("doses are non-empty");
    let mut tail_time = last.time;
    tail_time[6] = 0;
    out.modalities.push(seq.modalities[t]);
    out.times.push(tail_time);
    out.stamps.push(last.stamp);
    out.validate()?;
    Ok(out)
}

/// Applies `spec` to `seq`. Appended doses start at the last visit-1 token;
/// scaling touches visit-1 positions only.
pub fn apply_intervention(seq: &TokenSequence, spec: &InterventionSpec, vocab: &Vocabulary) -> Result<TokenSequence> {
    apply_at(seq, spec, vocab, anchor_stamp(seq))
}

pub(crate) fn apply_at(seq: &TokenSequence, spec: &InterventionSpec, vocab: &Vocabulary, start: i64) -> Result<TokenSequence> {
    spec.validate(Some(vocab))?;
    match &spec.kind {
        InterventionKind::CategoricalAppend { modality, .. } => {
            let m = vocab.modality_id(modality)?;
            insert_tokens(seq, m, &dosing_schedule(spec, vocab, start)?)
        }
        InterventionKind::ContinuousScale { modalities, factor } => scale_values(seq, vocab, modalities, *factor),
    }
}

fn scale_values(seq: &TokenSequence, vocab: &Vocabulary, modalities: &[String], factor: f64) -> Result<TokenSequence> {
    let ids: Vec<usize> = modalities.iter().map(|m| vocab.modality_id(m)).collect::<Result<_>>()?;
    let mut out = seq.clone();
    for p in 0..seq.visit_boundary {
        if ids.contains(&seq.modalities[p]) {
            let v = seq.values[p] * factor;
            out.values[p] = v;
            out.tokens[p] = vocab.encode_number(seq.modalities[p], v)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
