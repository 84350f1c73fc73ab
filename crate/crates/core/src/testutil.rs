//! Small fixtures shared by unit tests.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};

use crate::corpus::{assemble_sequence, Event, ParticipantRecord, Sex, TokenSequence};
use crate::model::{Model, ModelConfig};
use crate::vocab::{build_vocabulary, Measurement, ModalityDef, Vocabulary};

pub fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(y, mo, d).unwrap().and_hms_opt(h, mi, 0).unwrap()
}

/// Three continuous modalities (`a`, `b`, `c`) and one categorical (`d`).
pub fn toy_vocab() -> Vocabulary {
    let defs = vec![
        ModalityDef::continuous("a").with_bins(5),
        ModalityDef::continuous("b").with_bins(4),
        ModalityDef::continuous("c").with_bins(3),
        ModalityDef::categorical("d", &["no", "yes"]),
    ];
    let mut train = BTreeMap::new();
    for (name, scale) in [("a", 1.0), ("b", 10.0), ("c", 0.5)] {
        train.insert(name.to_string(), (0..60).map(|i| Measurement::Number(i as f64 * scale)).collect());
    }
    build_vocabulary(&defs, &train).unwrap()
}

/// Two-visit record with `n_per_visit` events per visit cycling over the
/// toy modalities.
pub fn toy_record(id: &str, n_per_visit: usize, shift: f64) -> ParticipantRecord {
    let v1 = at(2020, 5, 4, 8, 0);
    let v2 = at(2022, 5, 4, 8, 0);
    let mut events = Vec::new();
    for (visit, start) in [v1, v2].into_iter().enumerate() {
        for i in 0..n_per_visit {
            let m = i % 4;
            let value = match m {
                0 => Measurement::Number(10.0 + i as f64 * 7.0 + shift + visit as f64),
                1 => Measurement::Number(100.0 + i as f64 * 31.0 + shift * 10.0),
                2 => Measurement::Number(3.0 + i as f64 * 2.5 + shift * 0.5),
                _ => Measurement::Category(if (i + visit) % 2 == 0 { "no" } else { "yes" }.into()),
            };
            events.push(Event {
                timestamp: start + Duration::minutes(i as i64 * 11),
                modality: ["a", "b", "c", "d"][m].into(),
                value,
                sleep: i % 5 == 4,
            });
        }
    }
    ParticipantRecord {
        id: id.into(),
        age: 47.0 + shift,
        sex: Sex::Female,
        visits: vec![v1, v2],
        events,
    }
}

pub fn toy_sequence(vocab: &Vocabulary, n_per_visit: usize) -> TokenSequence {
    assemble_sequence(&toy_record("toy", n_per_visit, 0.0), vocab, 1000).unwrap()
}

pub fn toy_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        cont_pe_dim: 16,
        dropout: 0.0,
        max_seq_len: 256,
        init_std: 0.3,
        ..ModelConfig::new(vocab, 16, 2, 2, 4)
    }
}

/// Random toy model with non-zero gates and query MLPs so every parameter
/// carries signal.
pub fn toy_model(vocab: &Vocabulary, seed: u64) -> Model {
    use rand::{Rng, SeedableRng};
    let mut model = Model::new(toy_config(vocab), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in &mut model.params {
        if p.name.contains("gates") || p.name.contains("query_") || p.name.ends_with("bias") || p.name.contains(".b") {
            for v in &mut p.tensor.data {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    model
}
