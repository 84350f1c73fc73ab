//! Planted-ground-truth cohort generator: a latent health state read out by
//! every modality, between-visit drift and intervention-triggered effects.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{collect_values, from_minutes, to_minutes, Event, ParticipantRecord, Sex};
use crate::error::{Error, Result};
use crate::intervene::{dosing_tokens, months_after, InterventionSpec};
use crate::vocab::{build_vocabulary, Measurement, ModalityDef, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// `loading * s`
    #[default]
    Linear,
    /// `loading * (s^2 - 1)`
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPlan {
    pub name: String,
    pub offset: f64,
    pub loading: f64,
    pub noise_sd: f64,
    /// Units per year.
    #[serde(default)]
    pub drift: f64,
    /// Extra drift per year per unit of latent state.
    #[serde(default)]
    pub drift_loading: f64,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPlan {
    pub name: String,
    pub categories: Vec<String>,
    /// The category index is the number of thresholds below
    /// `loading * s + noise`.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub loading: f64,
    #[serde(default)]
    pub noise_sd: f64,
    /// Whether the modality is recorded at visits; intervention triggers are
    /// recorded only as doses.
    #[serde(default = "yes")]
    pub at_visits: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRule {
    pub trigger_modality: String,
    pub trigger_category: usize,
    pub target_modality: String,
    /// Fractional shift of the target after onset, in (-1, 1).
    pub effect: f64,
    pub onset_months: f64,
    /// Dosing frequency in tokens per month and duration in months.
    pub frequency: u32,
    pub duration: u32,
}

impl InterventionRule {
    /// The matching append edit for simulation.
    pub fn as_spec(&self) -> InterventionSpec {
        InterventionSpec::append(
            format!("{}:{}", self.trigger_modality, self.trigger_category),
            self.trigger_modality.clone(),
            self.trigger_category,
            self.frequency,
            self.duration,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_participants: usize,
    pub continuous: Vec<ContinuousPlan>,
    pub categorical: Vec<CategoricalPlan>,
    pub interventions: Vec<InterventionRule>,
    pub treated_fraction: f64,
    pub visit_gap_months: f64,
    pub seed: u64,
}

fn plan(name: &str, offset: f64, loading: f64, noise_sd: f64) -> ContinuousPlan {
    ContinuousPlan {
        name: name.into(),
        offset,
        loading,
        noise_sd,
        drift: 0.0,
        drift_loading: 0.0,
        readout: Readout::Linear,
        missing_rate: 0.0,
    }
}

impl Default for GeneratorConfig {
    /// Twelve continuous and two categorical modalities, 500 participants,
    /// two visits 24 months apart. `y = 2x` up to noise; `target` drops 20%
    /// after treatment; `control` is unaffected; `drift` changes between
    /// visits at a rate that depends on the latent state.
    fn default() -> Self {
        let mut continuous = vec![
            plan("x", 10.0, 1.0, 0.2),
            plan("y", 20.0, 2.0, 0.4),
            plan("target", 150.0, 20.0, 8.0),
            plan("control", 5.0, 0.5, 0.5),
            ContinuousPlan {
                drift: 1.0,
                drift_loading: 0.5,
                ..plan("drift", 30.0, 1.0, 0.8)
            },
        ];
        for (k, loading) in [0.8, -1.2, 1.5, -0.6, 1.0, 0.7].into_iter().enumerate() {
            continuous.push(ContinuousPlan {
                missing_rate: 0.1,
                ..plan(&format!("m{:02}", k + 6), 40.0 + 10.0 * k as f64, loading, 0.3)
            });
        }
        continuous.push(ContinuousPlan {
            readout: Readout::Quadratic,
            missing_rate: 0.1,
            ..plan("m12", 25.0, 2.0, 0.3)
        });
        Self {
            n_participants: 500,
            continuous,
            categorical: vec![
                CategoricalPlan {
                    name: "smoker".into(),
                    categories: vec!["no".into(), "yes".into()],
                    thresholds: vec![0.8],
                    loading: 1.0,
                    noise_sd: 0.5,
                    at_visits: true,
                },
                CategoricalPlan {
                    name: "medication".into(),
                    categories: vec!["none".into(), "treatment".into()],
                    thresholds: Vec::new(),
                    loading: 0.0,
                    noise_sd: 0.0,
                    at_visits: false,
                },
            ],
            interventions: vec![InterventionRule {
                trigger_modality: "medication".into(),
                trigger_category: 1,
                target_modality: "target".into(),
                effect: -0.2,
                onset_months: 1.0,
                frequency: 1,
                duration: 12,
            }],
            treated_fraction: 0.5,
            visit_gap_months: 24.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Config(format!("generator: {m}"));
        if self.n_participants == 0 {
            return Err(bad("n_participants must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.continuous {
            if !names.insert(c.name.as_str()) {
                return Err(bad(format!("duplicate modality `{}`", c.name)));
            }
            let finite = [c.offset, c.loading, c.noise_sd, c.drift, c.drift_loading].iter().all(|v| v.is_finite());
            if !finite || c.noise_sd < 0.0 || !(0.0..1.0).contains(&c.missing_rate) {
                return Err(bad(format!("modality `{}` needs finite parameters, noise_sd >= 0, missing_rate in [0, 1)", c.name)));
            }
        }
        for c in &self.categorical {
            if !names.insert(c.name.as_str()) {
                return Err(bad(format!("duplicate modality `{}`", c.name)));
            }
            if c.categories.is_empty() || c.thresholds.len() >= c.categories.len() || c.noise_sd < 0.0 {
                return Err(bad(format!("categorical `{}` needs fewer thresholds than categories and noise_sd >= 0", c.name)));
            }
        }
        for r in &self.interventions {
            if !(r.effect > -1.0 && r.effect < 1.0) {
                return Err(bad(format!("effect {} outside (-1, 1)", r.effect)));
            }
            let trig = self.categorical.iter().find(|c| c.name == r.trigger_modality);
            if trig.is_none_or(|c| r.trigger_category >= c.categories.len()) {
                return Err(bad(format!("trigger `{}:{}` is not a categorical modality/category", r.trigger_modality, r.trigger_category)));
            }
            if !self.continuous.iter().any(|c| c.name == r.target_modality) {
                return Err(bad(format!("target `{}` is not a continuous modality", r.target_modality)));
            }
            r.as_spec().validate(None)?;
        }
        if !(0.0..=1.0).contains(&self.treated_fraction) || !(self.visit_gap_months > 0.0) {
            return Err(bad("treated_fraction must lie in [0, 1] and visit_gap_months be positive".into()));
        }
        Ok(())
    }

    /// Modality definitions in generation order: continuous, then categorical.
    pub fn modality_defs(&self) -> Vec<ModalityDef> {
        let mut defs: Vec<ModalityDef> = self.continuous.iter().map(|c| ModalityDef::continuous(&c.name)).collect();
        for c in &self.categorical {
            let cats: Vec<&str> = c.categories.iter().map(String::as_str).collect();
            defs.push(ModalityDef::categorical(&c.name, &cats));
        }
        defs
    }

    /// Vocabulary fitted on `records` over this plan's modalities.
    pub fn vocabulary(&self, records: &[ParticipantRecord]) -> Result<Vocabulary> {
        build_vocabulary(&self.modality_defs(), &collect_values(records))
    }

    fn plan_of(&self, name: &str) -> Option<&ContinuousPlan> {
        self.continuous.iter().find(|c| c.name == name)
    }

    /// Correlation of two linear readouts at one visit:
    /// `a_i a_j / sqrt((a_i^2 + s_i^2)(a_j^2 + s_j^2))`.
    pub fn analytic_correlation(&self, a: &str, b: &str) -> Option<f64> {
        let (p, q) = (self.plan_of(a)?, self.plan_of(b)?);
        if p.readout != Readout::Linear || q.readout != Readout::Linear {
            return None;
        }
        let den = ((p.loading.powi(2) + p.noise_sd.powi(2)) * (q.loading.powi(2) + q.noise_sd.powi(2))).sqrt();
        (den > 0.0).then(|| p.loading * q.loading / den)
    }

    /// Visit-1 `E[output | input]` for two linear readouts.
    pub fn conditional_line(&self, input: &str, output: &str) -> Option<ConditionalLine> {
        let (p, q) = (self.plan_of(input)?, self.plan_of(output)?);
        if p.readout != Readout::Linear || q.readout != Readout::Linear {
            return None;
        }
        let var = p.loading.powi(2) + p.noise_sd.powi(2);
        if var == 0.0 {
            return None;
        }
        let slope = q.loading * p.loading / var;
        Some(ConditionalLine {
            input: input.into(),
            output: output.into(),
            slope,
            intercept: q.offset - slope * p.offset,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLine {
    pub input: String,
    pub output: String,
    pub slope: f64,
    pub intercept: f64,
}

impl ConditionalLine {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub id: String,
    pub latent: f64,
    pub treated: bool,
    /// Per intervention rule: planted change of the target at visit 2.
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub participants: Vec<ParticipantTruth>,
    pub conditional: Vec<ConditionalLine>,
}

impl GroundTruth {
    pub fn conditional(&self, input: &str, output: &str) -> Option<&ConditionalLine> {
        self.conditional.iter().find(|c| c.input == input && c.output == output)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing ground truth", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("parsing ground truth", e))
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates the cohort and its planted quantities. Participant `i` draws
/// from its own substream, so results do not depend on thread count.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<ParticipantRecord>, GroundTruth)> {
    config.validate()?;
    let n = config.n_participants;
    let n_treated = (config.treated_fraction * n as f64).round() as usize;
    let mut assignment: Vec<bool> = (0..n).map(|i| i < n_treated).collect();
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    master.set_stream(u64::MAX);
    assignment.shuffle(&mut master);

    let rows: Vec<(ParticipantRecord, ParticipantTruth)> = (0..n)
        .into_par_iter()
        .map(|i| participant(config, i, assignment[i]))
        .collect::<Result<_>>()?;
    let (records, participants): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let mut conditional = Vec::new();
    for p in &config.continuous {
        for q in &config.continuous {
            if p.name != q.name {
                conditional.extend(config.conditional_line(&p.name, &q.name));
            }
        }
    }
    Ok((
        records,
        GroundTruth {
            config: config.clone(),
            participants,
            conditional,
        },
    ))
}

fn participant(config: &GeneratorConfig, i: usize, treated: bool) -> Result<(ParticipantRecord, ParticipantTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64);
    let s = normal(&mut rng);
    let age = (rng.random_range(30.0..70.0f64) * 10.0).round() / 10.0;
    let sex = if rng.random::<bool>() { Sex::Female } else { Sex::Male };
    let day = rng.random_range(0..365);
    let v1 = NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date").and_hms_opt(8, 0, 0).expect("valid time") + Duration::days(day);
    let v1_min = to_minutes(&v1);
    let v2_min = months_after(v1_min, config.visit_gap_months);
    let years = config.visit_gap_months / 12.0;

    let n_cont = config.continuous.len();
    let mut events = Vec::new();
    let mut v2_untreated = vec![f64::NAN; n_cont];
    let mut v2_index = vec![None; n_cont];
    for (visit, start) in [v1_min, v2_min].into_iter().enumerate() {
        let dt = if visit == 0 { 0.0 } else { years };
        for (m, c) in config.continuous.iter().enumerate() {
            let noise = normal(&mut rng);
            let missing = rng.random::<f64>() < c.missing_rate;
            let offset_min = rng.random_range(0..120);
            if missing {
                continue;
            }
            let level = match c.readout {
                Readout::Linear => c.loading * s,
                Readout::Quadratic => c.loading * (s * s - 1.0),
            };
            let x = c.offset + level + (c.drift + c.drift_loading * s) * dt + c.noise_sd * noise;
            if visit == 1 {
                v2_untreated[m] = x;
                v2_index[m] = Some(events.len());
            }
            events.push(Event {
                timestamp: from_minutes(start + offset_min),
                modality: c.name.clone(),
                value: Measurement::Number(x),
                sleep: false,
            });
        }
        for c in &config.categorical {
            let noise = normal(&mut rng);
            let offset_min = rng.random_range(0..120);
            if !c.at_visits {
                continue;
            }
            let z = c.loading * s + c.noise_sd * noise;
            let k = c.thresholds.iter().filter(|&&t| t < z).count();
            events.push(Event {
                timestamp: from_minutes(start + offset_min),
                modality: c.name.clone(),
                value: Measurement::Category(c.categories[k].clone()),
                sleep: false,
            });
        }
    }

    let anchor = events
        .iter()
        .map(|e| to_minutes(&e.timestamp))
        .filter(|&t| t < v2_min)
        .max()
        .unwrap_or(v1_min);
    let mut deltas = vec![0.0; config.interventions.len()];
    if treated {
        for (r, rule) in config.interventions.iter().enumerate() {
            let plan = config.categorical.iter().find(|c| c.name == rule.trigger_modality).expect("validated trigger");
            for (_, stamp) in dosing_tokens(0, rule.trigger_category, rule.frequency, rule.duration, anchor) {
                events.push(Event {
                    timestamp: from_minutes(stamp),
                    modality: plan.name.clone(),
                    value: Measurement::Category(plan.categories[rule.trigger_category].clone()),
                    sleep: false,
                });
            }
            let m = config.continuous.iter().position(|c| c.name == rule.target_modality).expect("validated target");
            if let Some(ix) = v2_index[m] {
                if to_minutes(&events[ix].timestamp) >= months_after(anchor, rule.onset_months) {
                    let Measurement::Number(x) = events[ix].value else { unreachable!("continuous event") };
                    deltas[r] = rule.effect * v2_untreated[m];
                    events[ix].value = Measurement::Number(x + deltas[r]);
                }
            }
        }
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.modality.cmp(&b.modality)));
    let id = format!("synth-{i:05}");
    Ok((
        ParticipantRecord {
            id: id.clone(),
            age,
            sex,
            visits: vec![v1, from_minutes(v2_min)],
            events,
        },
        ParticipantTruth {
            id,
            latent: s,
            treated,
            deltas,
        },
    ))
}

/// Empirical Pearson correlation of two modalities at visit 1 over the
/// participants measuring both.
pub fn visit1_correlation(records: &[ParticipantRecord], a: &str, b: &str) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in records {
        let v2 = r.visits.get(1).copied();
        let first = |name: &str| {
            r.events.iter().find_map(|e| match (&e.value, v2) {
                (Measurement::Number(v), Some(t)) if e.modality == name && e.timestamp < t => Some(*v),
                (Measurement::Number(v), None) if e.modality == name => Some(*v),
                _ => None,
            })
        };
        if let (Some(x), Some(y)) = (first(a), first(b)) {
            xs.push(x);
            ys.push(y);
        }
    }
    crate::evalharness::pearson(&xs, &ys).ok()
}

/// Visit-2 values per modality name for the participants with the given
/// treatment status.
pub fn visit2_values(records: &[ParticipantRecord], truth: &GroundTruth, treated: bool) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (r, t) in records.iter().zip(&truth.participants) {
        if t.treated != treated {
            continue;
        }
        let Some(&v2) = r.visits.get(1) else { continue };
        for e in r.events.iter().filter(|e| e.timestamp >= v2) {
            if let Measurement::Number(v) = e.value {
                out.entry(e.modality.clone()).or_default().push(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_participants: 60,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn noiseless_readouts_are_exact() {
        let mut cfg = small(1);
        for c in &mut cfg.continuous {
            c.noise_sd = 0.0;
        }
        let (records, truth) = generate(&cfg).unwrap();
        for r in &records {
            let val = |name: &str| {
                r.events.iter().find_map(|e| match e.value {
                    Measurement::Number(v) if e.modality == name => Some(v),
                    _ => None,
                })
            };
            assert_eq!(val("y").unwrap(), 2.0 * val("x").unwrap());
        }
        let line = truth.conditional("x", "y").unwrap();
        assert_eq!((line.slope, line.intercept), (2.0, 0.0));
        assert_eq!(cfg.analytic_correlation("x", "y"), Some(1.0));
    }

    #[test]
    fn planted_effect_applies_to_treated_only() {
        let mut cfg = small(2);
        for c in &mut cfg.continuous {
            if c.name == "target" {
                c.noise_sd = 0.0;
                c.loading = 0.0;
            }
        }
        let (records, truth) = generate(&cfg).unwrap();
        let treated = visit2_values(&records, &truth, true);
        let untreated = visit2_values(&records, &truth, false);
        assert!(treated["target"].iter().all(|&v| (v - 120.0).abs() < 1e-9));
        assert!(untreated["target"].iter().all(|&v| v == 150.0));
        assert_eq!(truth.participants.iter().filter(|p| p.treated).count(), 30);
        for p in &truth.participants {
            if p.treated {
                assert!((p.deltas[0] + 30.0).abs() < 1e-9);
            } else {
                assert_eq!(p.deltas[0], 0.0);
            }
        }
        let doses: Vec<usize> = records
            .iter()
            .map(|r| r.events.iter().filter(|e| e.modality == "medication").count())
            .collect();
        for (d, p) in doses.iter().zip(&truth.participants) {
            assert_eq!(*d, if p.treated { 12 } else { 0 });
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let (a, ta) = generate(&small(3)).unwrap();
        let (b, tb) = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_assemble_and_doses_follow_visit_one() {
        let cfg = small(5);
        let (records, truth) = generate(&cfg).unwrap();
        let vocab = cfg.vocabulary(&records).unwrap();
        for (r, t) in records.iter().zip(&truth.participants) {
            let seq = crate::corpus::assemble_sequence(r, &vocab, 1000).unwrap();
            seq.validate().unwrap();
            if t.treated {
                let ctx = seq.first_visit();
                let v1_only: Vec<usize> = (0..ctx.len()).filter(|&p| ctx.modalities[p] != vocab.modality_id("medication").unwrap()).collect();
                let rebuilt = crate::intervene::apply_intervention(&ctx.retain_positions(&(0..ctx.len()).map(|p| v1_only.contains(&p)).collect::<Vec<_>>()), &cfg.interventions[0].as_spec(), &vocab).unwrap();
                assert_eq!(rebuilt.tokens, ctx.tokens);
                assert_eq!(rebuilt.stamps[..rebuilt.len()], ctx.stamps[..ctx.len()]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(6);
        cfg.interventions[0].effect = -1.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = small(6);
        cfg.continuous[0].noise_sd = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = small(6);
        cfg.interventions[0].target_modality = "smoker".into();
        assert!(cfg.validate().is_err());
    }
}
