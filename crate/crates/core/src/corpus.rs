//! Participant records, sequence assembly, temporal features and training
//! augmentations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write as _};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Measurement, Vocabulary};

/// Sizes of the seven temporal embedding tables.
pub const TEMPORAL_VOCAB_SIZES: [usize; 7] = [8, 25, 61, 13, 147, 32, 2];
pub const DEFAULT_YEAR_BASE: i32 = 1900;
/// Training-time sequence cap.
pub const MAX_SEQ_LEN: usize = 25_000;
/// One month as used by dosing and horizons: 365.25 / 12 days.
pub const MONTH_MINUTES: f64 = 365.25 / 12.0 * 24.0 * 60.0;

pub type TimeVec = [usize; 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    #[default]
    Unknown,
}

impl Sex {
    pub fn index(self) -> usize {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
            Sex::Unknown => 2,
        }
    }
}

pub(crate) mod iso_minute {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub const FORMAT: &str = "%Y-%m-%dT%H:%M";

    pub fn parse(text: &str) -> Result<NaiveDateTime, chrono::ParseError> {
        NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S").or_else(|_| NaiveDateTime::parse_from_str(text, FORMAT))
    }

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format(FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).map_err(serde::de::Error::custom)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(ts: &[NaiveDateTime], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(ts.len()))?;
            for t in ts {
                seq.serialize_element(&t.format(FORMAT).to_string())?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<NaiveDateTime>, D::Error> {
            let texts = Vec::<String>::deserialize(d)?;
            texts.iter().map(|t| parse(t).map_err(serde::de::Error::custom)).collect()
        }
    }
}

pub use iso_minute::parse as parse_timestamp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t", with = "iso_minute")]
    pub timestamp: NaiveDateTime,
    #[serde(rename = "m")]
    pub modality: String,
    #[serde(rename = "v")]
    pub value: Measurement,
    #[serde(default)]
    pub sleep: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: String,
    pub age: f64,
    #[serde(default)]
    pub sex: Sex,
    #[serde(with = "iso_minute::vec")]
    pub visits: Vec<NaiveDateTime>,
    pub events: Vec<Event>,
}

/// Four synchronized per-position streams. `tokens` and `values` have length
/// `T`; `modalities`, `times` and `stamps` carry one extra trailing slot that
/// holds the query for the position after the last token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub participant: String,
    pub tokens: Vec<usize>,
    pub values: Vec<f64>,
    pub modalities: Vec<usize>,
    pub times: Vec<TimeVec>,
    /// Minutes since the Unix epoch, one per modality/time slot.
    pub stamps: Vec<i64>,
    pub visit_boundary: usize,
    pub visit_stamps: Vec<i64>,
    pub age: f64,
    pub sex: Sex,
    pub year_base: i32,
}

pub fn to_minutes(t: &NaiveDateTime) -> i64 {
    t.and_utc().timestamp().div_euclid(60)
}

pub fn from_minutes(m: i64) -> NaiveDateTime {
    DateTime::from_timestamp(m * 60, 0)
        .expect("minute stamp within chrono range")
        .naive_utc()
}

/// `[day_of_week (Mon=0), hour, minute, month, year - year_base, day_of_month, sleep]`.
pub fn time_features(t: &NaiveDateTime, sleep: bool, year_base: i32) -> Result<TimeVec> {
    let end = year_base + TEMPORAL_VOCAB_SIZES[4] as i32;
    let year = t.year();
    if year < year_base || year >= end {
        return Err(Error::YearOutOfRange {
            year,
            base: year_base,
            end,
        });
    }
    Ok([
        t.weekday().num_days_from_monday() as usize,
        t.hour() as usize,
        t.minute() as usize,
        t.month() as usize,
        (year - year_base) as usize,
        t.day() as usize,
        sleep as usize,
    ])
}

pub fn time_features_at(minutes: i64, sleep: bool, year_base: i32) -> Result<TimeVec> {
    time_features(&from_minutes(minutes), sleep, year_base)
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the stream-length and ordering invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.tokens.len();
        let ok = self.values.len() == t
            && self.modalities.len() == t + 1
            && self.times.len() == t + 1
            && self.stamps.len() == t + 1
            && self.visit_boundary <= t;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "participant `{}`: unsynchronized streams (tokens {t}, values {}, modalities {}, times {}, boundary {})",
                self.participant,
                self.values.len(),
                self.modalities.len(),
                self.times.len(),
                self.visit_boundary
            )));
        }
        let sorted = (1..t).all(|i| (self.stamps[i - 1], self.modalities[i - 1]) <= (self.stamps[i], self.modalities[i]));
        if !sorted {
            return Err(Error::InvalidArgument(format!(
                "participant `{}`: positions not sorted by (time, modality)",
                self.participant
            )));
        }
        Ok(())
    }

    /// Keeps positions where `keep` is true; the trailing query slot is
    /// preserved and the visit boundary is recomputed.
    pub fn retain_positions(&self, keep: &[bool]) -> TokenSequence {
        let t = self.tokens.len();
        debug_assert_eq!(keep.len(), t);
        let mut out = TokenSequence {
            tokens: Vec::new(),
            values: Vec::new(),
            modalities: Vec::new(),
            times: Vec::new(),
            stamps: Vec::new(),
            visit_boundary: 0,
            ..self.clone()
        };
        for i in (0..t).filter(|&i| keep[i]) {
            out.tokens.push(self.tokens[i]);
            out.values.push(self.values[i]);
            out.modalities.push(self.modalities[i]);
            out.times.push(self.times[i]);
            out.stamps.push(self.stamps[i]);
        }
        out.visit_boundary = keep[..self.visit_boundary].iter().filter(|&&k| k).count();
        out.modalities.push(self.modalities[t]);
        out.times.push(self.times[t]);
        out.stamps.push(self.stamps[t]);
        out
    }

    /// The first-visit portion (all positions before the visit boundary).
    pub fn first_visit(&self) -> TokenSequence {
        let mut keep = vec![false; self.len()];
        keep[..self.visit_boundary].iter_mut().for_each(|k| *k = true);
        let mut out = self.retain_positions(&keep);
        out.visit_boundary = out.len();
        out
    }

    /// Minute stamp of the first visit, falling back to the first position.
    pub fn first_visit_stamp(&self) -> i64 {
        self.visit_stamps.first().copied().unwrap_or(self.stamps[0])
    }
}

/// Sorts, encodes and truncates one participant's events.
pub fn assemble_sequence(record: &ParticipantRecord, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    assemble_sequence_with_base(record, vocab, max_len, DEFAULT_YEAR_BASE)
}

pub fn assemble_sequence_with_base(
    record: &ParticipantRecord,
    vocab: &Vocabulary,
    max_len: usize,
    year_base: i32,
) -> Result<TokenSequence> {
    let fail = |i: usize, reason: String| Error::Participant {
        participant: record.id.clone(),
        reason: format!("event {i}: {reason}"),
    };
    if !record.age.is_finite() {
        return Err(Error::Participant {
            participant: record.id.clone(),
            reason: "age is not finite".into(),
        });
    }
    if record.visits.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Participant {
            participant: record.id.clone(),
            reason: "visit timestamps are not sorted".into(),
        });
    }

    struct Encoded {
        stamp: i64,
        modality: usize,
        token: usize,
        value: f64,
        time: TimeVec,
    }
    let mut encoded = Vec::with_capacity(record.events.len());
    for (i, ev) in record.events.iter().enumerate() {
        let m = vocab.modality_id(&ev.modality).map_err(|e| fail(i, e.to_string()))?;
        let token = vocab.encode_value(m, &ev.value).map_err(|e| fail(i, e.to_string()))?;
        let value = match ev.value {
            Measurement::Number(v) if vocab.modalities[m].is_continuous() => v,
            _ => 0.0,
        };
        let time = time_features(&ev.timestamp, ev.sleep, year_base).map_err(|e| fail(i, e.to_string()))?;
        encoded.push(Encoded {
            stamp: to_minutes(&ev.timestamp),
            modality: m,
            token,
            value,
            time,
        });
    }
    encoded.sort_by_key(|e| (e.stamp, e.modality));
    encoded.truncate(max_len);

    let visit_stamps: Vec<i64> = record.visits.iter().map(to_minutes).collect();
    let t = encoded.len();
    let visit_boundary = match visit_stamps.get(1) {
        Some(&v2) => encoded.partition_point(|e| e.stamp < v2),
        None => t,
    };

    let (last_stamp, last_time) = match encoded.last() {
        Some(e) => (e.stamp, e.time),
        None => {
            let stamp = visit_stamps.first().copied().unwrap_or_else(|| {
                to_minutes(&chrono::NaiveDate::from_ymd_opt(year_base, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap())
            });
            let time = time_features_at(stamp, false, year_base).map_err(|e| Error::Participant {
                participant: record.id.clone(),
                reason: e.to_string(),
            })?;
            (stamp, time)
        }
    };

    let mut seq = TokenSequence {
        participant: record.id.clone(),
        tokens: Vec::with_capacity(t),
        values: Vec::with_capacity(t),
        modalities: Vec::with_capacity(t + 1),
        times: Vec::with_capacity(t + 1),
        stamps: Vec::with_capacity(t + 1),
        visit_boundary,
        visit_stamps,
        age: record.age,
        sex: record.sex,
        year_base,
    };
    for e in encoded {
        seq.tokens.push(e.token);
        seq.values.push(e.value);
        seq.modalities.push(e.modality);
        seq.times.push(e.time);
        seq.stamps.push(e.stamp);
    }
    seq.modalities.push(vocab.pad_modality());
    seq.times.push([last_time[0], last_time[1], last_time[2], last_time[3], last_time[4], last_time[5], 0]);
    seq.stamps.push(last_stamp);
    Ok(seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_chance: f64,
    pub noise_rate: f64,
    pub token_removal_chance: f64,
    pub token_removal_rate: f64,
    pub block_removal_chance: f64,
    pub block_removal_rate: f64,
    pub block_removal_blocks: usize,
    pub modality_subset_chance: f64,
    pub modality_subset_fraction: f64,
    pub modality_exclusion_chance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_chance: 0.10,
            noise_rate: 0.15,
            token_removal_chance: 0.50,
            token_removal_rate: 0.15,
            block_removal_chance: 0.20,
            block_removal_rate: 0.01,
            block_removal_blocks: 10,
            modality_subset_chance: 0.10,
            modality_subset_fraction: 0.10,
            modality_exclusion_chance: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            noise_chance: 0.0,
            token_removal_chance: 0.0,
            block_removal_chance: 0.0,
            modality_subset_chance: 0.0,
            modality_exclusion_chance: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("noise_chance", self.noise_chance),
            ("token_removal_chance", self.token_removal_chance),
            ("token_removal_rate", self.token_removal_rate),
            ("block_removal_chance", self.block_removal_chance),
            ("block_removal_rate", self.block_removal_rate),
            ("modality_subset_chance", self.modality_subset_chance),
            ("modality_subset_fraction", self.modality_subset_fraction),
            ("modality_exclusion_chance", self.modality_exclusion_chance),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::Config(format!("noise_rate = {} must be finite and >= 0", self.noise_rate)));
        }
        Ok(())
    }
}

/// Applies the five augmentations in order, each gated by its own draw.
pub fn augment<R: Rng + ?Sized>(seq: &TokenSequence, vocab: &Vocabulary, config: &AugmentConfig, rng: &mut R) -> TokenSequence {
    let mut out = seq.clone();

    if rng.random::<f64>() < config.noise_chance {
        for i in 0..out.len() {
            let spec = &vocab.modalities[out.modalities[i]];
            if !spec.is_continuous() {
                continue;
            }
            let sd = config.noise_rate * spec.train_sd;
            if sd > 0.0 {
                let noise = Normal::new(0.0, sd).expect("finite positive sd").sample(rng);
                out.values[i] += noise;
            }
            out.tokens[i] = spec.cum_base + spec.bin_of(out.values[i]).expect("noisy value is finite");
        }
    }

    if rng.random::<f64>() < config.token_removal_chance {
        let keep: Vec<bool> = (0..out.len()).map(|_| rng.random::<f64>() >= config.token_removal_rate).collect();
        out = out.retain_positions(&keep);
    }

    if rng.random::<f64>() < config.block_removal_chance && !out.is_empty() {
        let t = out.len();
        let block = ((config.block_removal_rate * t as f64).ceil() as usize).clamp(1, t);
        let mut keep = vec![true; t];
        for _ in 0..config.block_removal_blocks {
            let start = rng.random_range(0..=t - block);
            keep[start..start + block].iter_mut().for_each(|k| *k = false);
        }
        out = out.retain_positions(&keep);
    }

    if rng.random::<f64>() < config.modality_subset_chance {
        let present = present_modalities(&out);
        if !present.is_empty() {
            let n_keep = ((config.modality_subset_fraction * present.len() as f64).round() as usize).max(1);
            let kept: BTreeSet<usize> = present.choose_multiple(rng, n_keep).copied().collect();
            let keep: Vec<bool> = out.modalities[..out.len()].iter().map(|m| kept.contains(m)).collect();
            out = out.retain_positions(&keep);
        }
    }

    if rng.random::<f64>() < config.modality_exclusion_chance {
        let mut present = present_modalities(&out);
        if !present.is_empty() {
            let max_excluded = (present.len() / 10).max(1);
            let n_excluded = rng.random_range(1..=max_excluded);
            present.shuffle(rng);
            let excluded: BTreeSet<usize> = present[..n_excluded].iter().copied().collect();
            let keep: Vec<bool> = out.modalities[..out.len()].iter().map(|m| !excluded.contains(m)).collect();
            out = out.retain_positions(&keep);
        }
    }

    out
}

fn present_modalities(seq: &TokenSequence) -> Vec<usize> {
    let set: BTreeSet<usize> = seq.modalities[..seq.len()].iter().copied().collect();
    set.into_iter().collect()
}

/// Gathers training values per modality name, in record order.
pub fn collect_values<'a>(records: impl IntoIterator<Item = &'a ParticipantRecord>) -> BTreeMap<String, Vec<Measurement>> {
    let mut out: BTreeMap<String, Vec<Measurement>> = BTreeMap::new();
    for r in records {
        for ev in &r.events {
            out.entry(ev.modality.clone()).or_default().push(ev.value.clone());
        }
    }
    out
}

pub fn parse_cohort(text: &str) -> Result<Vec<ParticipantRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| Error::json(format!("cohort line {}", i + 1), e)))
        .collect()
}

pub fn read_cohort(path: &Path) -> Result<Vec<ParticipantRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        out.push(record);
    }
    Ok(out)
}

pub fn cohort_to_jsonl(records: &[ParticipantRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json("serializing participant", e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_cohort(path: &Path, records: &[ParticipantRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(cohort_to_jsonl(records)?.as_bytes()).map_err(|e| Error::io(path, e))
}
