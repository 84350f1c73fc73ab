//! Synthetic trial populations, trial simulation and concordance scoring.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arms::{control_arm, treatment_arm, ArmOptions, ArmResult, MAX_HORIZON_MONTHS};
use super::InterventionSpec;
use crate::corpus::{assemble_sequence, iso_minute, Event, ParticipantRecord, Sex, TokenSequence, MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vocab::{Measurement, Vocabulary};

/// Smallest retained probability mass accepted by the truncated sampler.
pub const MIN_TRUNCATION_MASS: f64 = 1e-3;
/// Table-1 row holding participant age rather than a measurement.
pub const AGE_VARIABLE: &str = "age";

fn default_n() -> usize {
    200
}

fn default_female_fraction() -> f64 {
    0.5
}

fn default_visit() -> NaiveDateTime {
    iso_minute::parse("2020-01-01T08:00").expect("valid literal")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialVariable {
    pub modality: String,
    pub mean: f64,
    pub sd: f64,
    pub low: f64,
    pub high: f64,
}

/// Published effect in signed percent change (negative for a decrease).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Published {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub name: String,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Baseline variables; the `age` row sets participant age.
    pub table1: Vec<TrialVariable>,
    #[serde(default = "default_female_fraction")]
    pub female_fraction: f64,
    #[serde(default = "default_visit", with = "iso_minute")]
    pub visit: NaiveDateTime,
    /// One intervention for a two-arm trial, two for a four-arm trial.
    pub arms: Vec<InterventionSpec>,
    pub outcome: String,
    pub horizon_months: f64,
    pub published: Published,
}

impl TrialSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::json("parsing trial spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::InvalidArgument(format!("trial `{}`: {m}", self.name));
        if self.n == 0 {
            return Err(bad("population size must be positive".into()));
        }
        for v in &self.table1 {
            let finite = [v.mean, v.sd, v.low, v.high].iter().all(|x| x.is_finite());
            if !finite || v.low >= v.high || v.sd < 0.0 {
                return Err(bad(format!("variable `{}` needs finite mean/sd, sd >= 0 and low < high", v.modality)));
            }
            if v.sd == 0.0 && !(v.low..=v.high).contains(&v.mean) {
                return Err(Error::InfeasibleTruncation(v.modality.clone()));
            }
        }
        if !self.table1.iter().any(|v| v.modality == AGE_VARIABLE) {
            return Err(bad(format!("table1 needs an `{AGE_VARIABLE}` row")));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return Err(bad(format!("female_fraction {} outside [0, 1]", self.female_fraction)));
        }
        if !(1..=2).contains(&self.arms.len()) {
            return Err(bad(format!("expected 1 or 2 interventions, found {}", self.arms.len())));
        }
        for a in &self.arms {
            a.validate(None)?;
        }
        if !(self.horizon_months > 0.0 && self.horizon_months <= MAX_HORIZON_MONTHS) {
            return Err(bad(format!("horizon {} months outside (0, {MAX_HORIZON_MONTHS}]", self.horizon_months)));
        }
        let p = self.published;
        if !(p.ci_low <= p.point && p.point <= p.ci_high) {
            return Err(bad(format!("published point {} outside [{}, {}]", p.point, p.ci_low, p.ci_high)));
        }
        Ok(())
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability mass of `N(mean, sd^2)` inside `[low, high]`.
pub fn truncated_normal_mass(mean: f64, sd: f64, low: f64, high: f64) -> f64 {
    if sd == 0.0 {
        return if (low..=high).contains(&mean) { 1.0 } else { 0.0 };
    }
    let (a, b) = ((low - mean) / sd, (high - mean) / sd);
    if a > 0.0 {
        std_normal_cdf(-a) - std_normal_cdf(-b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// One rejection-sampled draw from the truncated normal of `v`.
pub fn truncated_normal_sample<R: Rng + ?Sized>(v: &TrialVariable, rng: &mut R) -> Result<f64> {
    if truncated_normal_mass(v.mean, v.sd, v.low, v.high) < MIN_TRUNCATION_MASS {
        return Err(Error::InfeasibleTruncation(v.modality.clone()));
    }
    if v.sd == 0.0 {
        return Ok(v.mean);
    }
    let normal = Normal::new(v.mean, v.sd).map_err(|e| Error::InvalidArgument(format!("`{}`: {e}", v.modality)))?;
    loop {
        let x = normal.sample(rng);
        if (v.low..=v.high).contains(&x) {
            return Ok(x);
        }
    }
}

/// Single-visit records with every table-1 variable drawn independently.
pub fn sample_trial_population<R: Rng + ?Sized>(spec: &TrialSpec, rng: &mut R) -> Result<Vec<ParticipantRecord>> {
    spec.validate()?;
    (0..spec.n)
        .map(|i| {
            let mut age = 0.0;
            let mut events = Vec::with_capacity(spec.table1.len());
            for v in &spec.table1 {
                let x = truncated_normal_sample(v, rng)?;
                if v.modality == AGE_VARIABLE {
                    age = x;
                } else {
                    events.push(Event {
                        timestamp: spec.visit,
                        modality: v.modality.clone(),
                        value: Measurement::Number(x),
                        sleep: false,
                    });
                }
            }
            let sex = if rng.random::<f64>() < spec.female_fraction { Sex::Female } else { Sex::Male };
            Ok(ParticipantRecord {
                id: format!("{}-{i:04}", spec.name),
                age,
                sex,
                visits: vec![spec.visit],
                events,
            })
        })
        .collect()
}

/// Sampled and tokenized trial population for `seed`.
pub fn trial_cohort(spec: &TrialSpec, vocab: &Vocabulary, seed: u64) -> Result<Vec<TokenSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    sample_trial_population(spec, &mut rng)?
        .iter()
        .map(|r| assemble_sequence(r, vocab, MAX_SEQ_LEN))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub name: String,
    /// Single-intervention arms followed by the combination arm, if any.
    pub arms: Vec<ArmResult>,
    /// Signed percent effect of the compared arm.
    pub predicted: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub published: Published,
}

impl TrialResult {
    pub fn compared_arm(&self) -> &ArmResult {
        self.arms.last().expect("trial has at least one arm")
    }

    pub fn concordance_row(&self) -> ConcordanceRow {
        ConcordanceRow {
            label: self.name.clone(),
            predicted: self.predicted,
            published: self.published,
        }
    }
}

/// Samples the population, then scores control against the intervention
/// (two-arm) or against A+B with A and B reported alongside (four-arm).
pub fn run_trial(model: &Model, vocab: &Vocabulary, spec: &TrialSpec, seed: u64, resamples: usize) -> Result<TrialResult> {
    spec.validate()?;
    let outcome = vocab.modality_id(&spec.outcome)?;
    for a in &spec.arms {
        a.validate(Some(vocab))?;
    }
    let cohort = trial_cohort(spec, vocab, seed)?;
    let options = ArmOptions {
        horizon_months: spec.horizon_months,
        resamples,
        seed,
    };
    let control = control_arm(model, vocab, &cohort, outcome, options)?;
    let mut arms = Vec::new();
    for a in &spec.arms {
        arms.push(treatment_arm(model, vocab, &cohort, &control, &[a])?);
    }
    if spec.arms.len() == 2 {
        arms.push(treatment_arm(model, vocab, &cohort, &control, &[&spec.arms[0], &spec.arms[1]])?);
    }
    let compared = arms.last().expect("one arm per intervention");
    Ok(TrialResult {
        name: spec.name.clone(),
        predicted: compared.signed_percent,
        ci_low: compared.ci_low,
        ci_high: compared.ci_high,
        published: spec.published,
        arms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceRow {
    pub label: String,
    /// Predicted signed percent effect.
    pub predicted: f64,
    pub published: Published,
}

impl ConcordanceRow {
    /// Signs agree; a zero on either side is a miss.
    pub fn direction_hit(&self) -> bool {
        let (p, q) = (self.predicted, self.published.point);
        p != 0.0 && q != 0.0 && (p > 0.0) == (q > 0.0)
    }

    /// The predicted point lies inside the published interval.
    pub fn ci_hit(&self) -> bool {
        self.published.ci_low <= self.predicted && self.predicted <= self.published.ci_high
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub n: usize,
    pub direction_hits: usize,
    pub ci_hits: usize,
    pub rows: Vec<(ConcordanceRow, bool, bool)>,
}

impl ConcordanceReport {
    /// CSV with per-trial prediction, interval and hit flags, preceded by
    /// one `#` provenance line.
    pub fn to_csv(&self, provenance: &str, intervals: &[(f64, f64)]) -> String {
        let mut out = format!("# {provenance}\ntrial,predicted,ci_low,ci_high,published,published_low,published_high,direction_hit,ci_hit\n");
        for (i, (r, d, c)) in self.rows.iter().enumerate() {
            let (lo, hi) = intervals.get(i).copied().unwrap_or((f64::NAN, f64::NAN));
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
                r.label, r.predicted, lo, hi, r.published.point, r.published.ci_low, r.published.ci_high, d, c
            ));
        }
        out
    }
}

pub fn concordance(rows: &[ConcordanceRow]) -> ConcordanceReport {
    let scored: Vec<(ConcordanceRow, bool, bool)> = rows.iter().map(|r| (r.clone(), r.direction_hit(), r.ci_hit())).collect();
    ConcordanceReport {
        n: rows.len(),
        direction_hits: scored.iter().filter(|s| s.1).count(),
        ci_hits: scored.iter().filter(|s| s.2).count(),
        rows: scored,
    }
}
