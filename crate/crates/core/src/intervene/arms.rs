//! Paired control/treatment arms, eligibility filtering and trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{anchor_stamp, apply_at, dosing_tokens, insert_tokens, months_after, InterventionKind, InterventionSpec};
use crate::corpus::{time_features_at, TokenSequence};
use crate::error::{Error, Result};
use crate::evalharness::decode_expected;
use crate::model::{MaskKind, Model, ModelInput};
use crate::vocab::{quantile_sorted, Vocabulary};

/// Longest supported prediction horizon, in months.
pub const MAX_HORIZON_MONTHS: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmOptions {
    pub horizon_months: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for ArmOptions {
    fn default() -> Self {
        Self {
            horizon_months: 12.0,
            resamples: 1000,
            seed: 0,
        }
    }
}

impl ArmOptions {
    fn validate(&self) -> Result<()> {
        if !(self.horizon_months > 0.0 && self.horizon_months <= MAX_HORIZON_MONTHS) {
            return Err(Error::InvalidArgument(format!(
                "horizon {} months must lie in (0, {MAX_HORIZON_MONTHS}]",
                self.horizon_months
            )));
        }
        if self.resamples == 0 {
            return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
        }
        Ok(())
    }
}

/// Expected value of `outcome` queried at `stamp` after the context.
fn predict_at(model: &Model, vocab: &Vocabulary, ctx: &TokenSequence, outcome: usize, stamp: i64) -> Result<f64> {
    let time = time_features_at(stamp, false, ctx.year_base)?;
    let input = ModelInput::with_final_query(ctx, vocab, outcome, time)?;
    let logits = model.logits(&input, MaskKind::Causal)?;
    decode_expected(logits.row(input.len() - 1), vocab, outcome)
}

fn require_continuous(vocab: &Vocabulary, outcome: usize) -> Result<()> {
    let spec = vocab.modality(outcome)?;
    if spec.is_continuous() {
        Ok(())
    } else {
        Err(Error::WrongKind {
            modality: spec.name.clone(),
            expected: "continuous",
            actual: "categorical",
        })
    }
}

/// Control-arm predictions, computed once and shared by every treatment arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlArm {
    pub outcome: usize,
    pub options: ArmOptions,
    /// Cohort indices of the participants with visit-1 content.
    pub members: Vec<usize>,
    pub ids: Vec<String>,
    pub anchors: Vec<i64>,
    pub predictions: Vec<f64>,
    /// Participants without visit-1 content.
    pub skipped: Vec<String>,
}

pub fn control_arm(model: &Model, vocab: &Vocabulary, cohort: &[TokenSequence], outcome: usize, options: ArmOptions) -> Result<ControlArm> {
    options.validate()?;
    require_continuous(vocab, outcome)?;
    let (members, skipped): (Vec<usize>, Vec<usize>) = (0..cohort.len()).partition(|&i| cohort[i].visit_boundary > 0);
    let anchors: Vec<i64> = members.iter().map(|&i| anchor_stamp(&cohort[i])).collect();
    let predictions = members
        .par_iter()
        .zip(&anchors)
        .map(|(&i, &a)| {
            let ctx = cohort[i].first_visit();
            predict_at(model, vocab, &ctx, outcome, months_after(a, options.horizon_months))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ControlArm {
        outcome,
        options,
        ids: members.iter().map(|&i| cohort[i].participant.clone()).collect(),
        members,
        anchors,
        predictions,
        skipped: skipped.iter().map(|&i| cohort[i].participant.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub ids: Vec<String>,
    pub control: Vec<f64>,
    pub treatment: Vec<f64>,
    /// `treatment[i] - control[i]`.
    pub delta: Vec<f64>,
    pub mean_control: f64,
    pub mean_treatment: f64,
    pub mean_delta: f64,
    /// `100 * |mean_treatment - mean_control| / mean_control`.
    pub effect_percent: f64,
    /// `100 * mean_delta / |mean_control|`, carrying the direction.
    pub signed_percent: f64,
    /// Percentile bootstrap interval of `signed_percent` over participants.
    pub ci_low: f64,
    pub ci_high: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl ArmResult {
    /// Builds an arm from paired per-participant predictions.
    pub fn from_pairs(label: &str, ids: Vec<String>, control: Vec<f64>, treatment: Vec<f64>, options: &ArmOptions) -> Result<Self> {
        if control.is_empty() {
            return Err(Error::InsufficientData(format!("arm `{label}` has no participants")));
        }
        let delta: Vec<f64> = treatment.iter().zip(&control).map(|(t, c)| t - c).collect();
        let (mc, mt) = (mean(&control), mean(&treatment));
        if mc == 0.0 {
            return Err(Error::UndefinedEffect);
        }
        let mean_delta = mt - mc;
        let (ci_low, ci_high) = bootstrap_ci(&control, &treatment, options.resamples, options.seed);
        Ok(Self {
            label: label.to_string(),
            ids,
            control,
            treatment,
            delta,
            mean_control: mc,
            mean_treatment: mt,
            mean_delta,
            effect_percent: 100.0 * (mt - mc).abs() / mc,
            signed_percent: 100.0 * mean_delta / mc.abs(),
            ci_low,
            ci_high,
        })
    }
}

/// 95% percentile interval of the signed percent effect; resampling indices
/// depend only on `seed` and `n`, so arms of one cohort are resampled alike.
fn bootstrap_ci(control: &[f64], treatment: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let n = control.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let (mut sc, mut st) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sc += control[i];
            st += treatment[i];
        }
        if sc != 0.0 {
            stats.push(100.0 * (st - sc) / sc.abs());
        }
    }
    if stats.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    stats.sort_by(f64::total_cmp);
    (quantile_sorted(&stats, 0.025), quantile_sorted(&stats, 0.975))
}

/// Treatment arm for the edits in `specs`, applied in order, against a
/// precomputed control arm.
pub fn treatment_arm(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[TokenSequence],
    control: &ControlArm,
    specs: &[&InterventionSpec],
) -> Result<ArmResult> {
    for s in specs {
        s.validate(Some(vocab))?;
    }
    let opts = control.options;
    let treatment = control
        .members
        .par_iter()
        .zip(&control.anchors)
        .map(|(&i, &a)| {
            let mut ctx = cohort[i].first_visit();
            for s in specs {
                ctx = apply_at(&ctx, s, vocab, a)?;
            }
            predict_at(model, vocab, &ctx, control.outcome, months_after(a, opts.horizon_months))
        })
        .collect::<Result<Vec<f64>>>()?;
    let label = specs.iter().map(|s| s.label.as_str()).collect::<Vec<_>>().join(" + ");
    ArmResult::from_pairs(&label, control.ids.clone(), control.predictions.clone(), treatment, &opts)
}

/// Paired control/treatment simulation of one intervention.
pub fn simulate_arms(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[TokenSequence],
    spec: &InterventionSpec,
    outcome: usize,
    options: ArmOptions,
) -> Result<ArmResult> {
    spec.validate(Some(vocab))?;
    let control = control_arm(model, vocab, cohort, outcome, options)?;
    treatment_arm(model, vocab, cohort, &control, &[spec])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourArm {
    pub control: ControlArm,
    pub a: ArmResult,
    pub b: ArmResult,
    pub ab: ArmResult,
}

impl FourArm {
    /// `effect(A+B) - effect(A) - effect(B)` on the signed percent scale.
    pub fn interaction(&self) -> f64 {
        self.ab.signed_percent - self.a.signed_percent - self.b.signed_percent
    }
}

/// Control, A, B and A+B arms sharing one set of control predictions.
pub fn four_arm(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[TokenSequence],
    a: &InterventionSpec,
    b: &InterventionSpec,
    outcome: usize,
    options: ArmOptions,
) -> Result<FourArm> {
    if let (InterventionKind::ContinuousScale { modalities: ma, .. }, InterventionKind::ContinuousScale { modalities: mb, .. }) =
        (&a.kind, &b.kind)
    {
        if let Some(m) = ma.iter().find(|m| mb.contains(m)) {
            return Err(Error::InvalidArgument(format!(
                "interventions `{}` and `{}` both scale `{m}`",
                a.label, b.label
            )));
        }
    }
    a.validate(Some(vocab))?;
    b.validate(Some(vocab))?;
    let control = control_arm(model, vocab, cohort, outcome, options)?;
    let arm_a = treatment_arm(model, vocab, cohort, &control, &[a])?;
    let arm_b = treatment_arm(model, vocab, cohort, &control, &[b])?;
    let arm_ab = treatment_arm(model, vocab, cohort, &control, &[a, b])?;
    Ok(FourArm {
        control,
        a: arm_a,
        b: arm_b,
        ab: arm_ab,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::AtLeast => value >= threshold,
            Comparator::AtMost => value <= threshold,
        }
    }
}

/// Clinical thresholds for treatment-naive filtering, keyed by short label.
pub const DEFAULT_THRESHOLDS: [(&str, Comparator, f64); 9] = [
    ("ldl", Comparator::AtLeast, 130.0),
    ("sbp", Comparator::AtLeast, 140.0),
    ("dbp", Comparator::AtLeast, 90.0),
    ("glucose", Comparator::AtLeast, 100.0),
    ("hba1c", Comparator::AtLeast, 5.7),
    ("hdl", Comparator::AtMost, 40.0),
    ("tg", Comparator::AtLeast, 150.0),
    ("bmi", Comparator::AtLeast, 30.0),
    ("vitamin_d", Comparator::AtMost, 20.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EligibilityRule {
    pub modality: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl EligibilityRule {
    /// The default threshold for `label` applied to the vocabulary modality
    /// `modality`.
    pub fn default_for(label: &str, modality: impl Into<String>) -> Result<Self> {
        let key = label.to_ascii_lowercase();
        let &(_, comparator, threshold) = DEFAULT_THRESHOLDS
            .iter()
            .find(|(l, _, _)| *l == key)
            .ok_or_else(|| Error::InvalidArgument(format!("no default eligibility threshold for `{label}`")))?;
        Ok(Self {
            modality: modality.into(),
            comparator,
            threshold,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("eligibility threshold for `{}` is not finite", self.modality)))
        }
    }

    /// Both the observed baseline and the control prediction meet the rule.
    pub fn admits(&self, baseline: f64, prediction: f64) -> bool {
        self.comparator.holds(baseline, self.threshold) && self.comparator.holds(prediction, self.threshold)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Eligibility {
    /// Cohort indices meeting both criteria.
    pub kept: Vec<usize>,
    /// Participants without a visit-1 measurement of the rule's modality.
    pub missing: Vec<String>,
    pub failed_baseline: usize,
    pub failed_prediction: usize,
}

impl Eligibility {
    pub fn select(&self, cohort: &[TokenSequence]) -> Vec<TokenSequence> {
        self.kept.iter().map(|&i| cohort[i].clone()).collect()
    }
}

/// Keeps participants whose last visit-1 value and whose control-arm
/// prediction of the rule's modality both satisfy the rule.
pub fn filter_eligible(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[TokenSequence],
    rule: &EligibilityRule,
    horizon_months: f64,
) -> Result<Eligibility> {
    rule.validate()?;
    let m = vocab.modality_id(&rule.modality)?;
    require_continuous(vocab, m)?;
    let mut out = Eligibility::default();
    let mut baseline_ok = Vec::new();
    for (i, seq) in cohort.iter().enumerate() {
        match (0..seq.visit_boundary).rev().find(|&p| seq.modalities[p] == m) {
            None => out.missing.push(seq.participant.clone()),
            Some(p) if rule.comparator.holds(seq.values[p], rule.threshold) => baseline_ok.push(i),
            Some(_) => out.failed_baseline += 1,
        }
    }
    let preds = baseline_ok
        .par_iter()
        .map(|&i| {
            let a = anchor_stamp(&cohort[i]);
            predict_at(model, vocab, &cohort[i].first_visit(), m, months_after(a, horizon_months))
        })
        .collect::<Result<Vec<f64>>>()?;
    for (&i, p) in baseline_ok.iter().zip(preds) {
        if rule.comparator.holds(p, rule.threshold) {
            out.kept.push(i);
        } else {
            out.failed_prediction += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub month: u32,
    pub mean_delta: f64,
    /// Standard error of the mean delta.
    pub sem: f64,
    pub n: usize,
}

/// Monthly mean treatment-minus-control deltas for `t = 1..=months`. Doses
/// span visit 1 to month `t` at the spec's frequency; scaled contexts are
/// queried unchanged at each month.
pub fn trajectory(
    model: &Model,
    vocab: &Vocabulary,
    cohort: &[TokenSequence],
    spec: &InterventionSpec,
    outcome: usize,
    months: u32,
) -> Result<Vec<TrajectoryPoint>> {
    spec.validate(Some(vocab))?;
    require_continuous(vocab, outcome)?;
    let members: Vec<&TokenSequence> = cohort.iter().filter(|s| s.visit_boundary > 0).collect();
    let rows = members
        .par_iter()
        .map(|seq| {
            let ctx = seq.first_visit();
            let a = anchor_stamp(seq);
            let scaled = match &spec.kind {
                InterventionKind::ContinuousScale { .. } => Some(apply_at(&ctx, spec, vocab, a)?),
                InterventionKind::CategoricalAppend { .. } => None,
            };
            (1..=months)
                .map(|t| {
                    let at = months_after(a, t as f64);
                    let control = predict_at(model, vocab, &ctx, outcome, at)?;
                    let treated = match (&spec.kind, &scaled) {
                        (_, Some(s)) => predict_at(model, vocab, s, outcome, at)?,
                        (
                            InterventionKind::CategoricalAppend {
                                modality,
                                category,
                                frequency,
                                ..
                            },
                            None,
                        ) => {
                            let m = vocab.modality_id(modality)?;
                            let doses = dosing_tokens(vocab.modalities[m].cum_base, *category, *frequency, t, a);
                            predict_at(model, vocab, &insert_tokens(&ctx, m, &doses)?, outcome, at)?
                        }
                        _ => unreachable!("scaled context exists for scale specs"),
                    };
                    Ok(treated - control)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((0..months as usize)
        .map(|t| {
            let d: Vec<f64> = rows.iter().map(|r| r[t]).collect();
            let n = d.len();
            let mean_delta = if n > 0 { mean(&d) } else { f64::NAN };
            let sem = if n > 1 {
                (d.iter().map(|x| (x - mean_delta).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            TrajectoryPoint {
                month: t as u32 + 1,
                mean_delta,
                sem,
                n,
            }
        })
        .collect())
}
