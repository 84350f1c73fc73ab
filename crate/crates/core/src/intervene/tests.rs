use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::MONTH_MINUTES;
use crate::testutil::{toy_model, toy_sequence, toy_vocab};

fn toy_cohort(vocab: &Vocabulary, n: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|i| {
            let r = crate::testutil::toy_record(&format!("p{i}"), 6, i as f64 * 1.5);
            crate::corpus::assemble_sequence(&r, vocab, 1000).unwrap()
        })
        .collect()
}

#[test]
fn dosing_counts_and_spacing() {
    let vocab = toy_vocab();
    let daily = InterventionSpec::append("daily", "d", 1, 10, 12);
    let doses = dosing_schedule(&daily, &vocab, 0).unwrap();
    assert_eq!(doses.len(), 120);
    assert!(doses.iter().all(|&(t, _)| t == vocab.modalities[3].cum_base + 1));
    let gap = (doses[1].1 - doses[0].1) as f64;
    assert!((gap - MONTH_MINUTES / 10.0).abs() <= 1.0);
    assert_eq!(doses[119].1, months_after(0, 12.0));
    let monthly = InterventionSpec::append("monthly", "d", 0, 1, 1);
    assert_eq!(dosing_schedule(&monthly, &vocab, 0).unwrap().len(), 1);
    let grid: Vec<_> = FREQUENCIES
        .iter()
        .flat_map(|&f| DURATIONS.iter().map(move |&d| InterventionSpec::append("g", "d", 0, f, d)))
        .collect();
    assert_eq!(grid.len(), 81);
    assert!(grid.iter().all(|s| s.validate(Some(&vocab)).is_ok()));
    assert!(InterventionSpec::append("x", "d", 0, 5, 12).validate(None).is_err());
    assert!(InterventionSpec::append("x", "d", 0, 10, 5).validate(None).is_err());
    assert!(InterventionSpec::append("x", "d", 2, 10, 12).validate(Some(&vocab)).is_err());
    assert!(InterventionSpec::append("x", "a", 0, 10, 12).validate(Some(&vocab)).is_err());
}

#[test]
fn frequency_names() {
    assert_eq!(parse_frequency("daily").unwrap(), 10);
    assert_eq!(parse_frequency("Twice daily").unwrap(), 15);
    assert_eq!(parse_frequency("three_times_weekly").unwrap(), 12);
    assert_eq!(parse_frequency("6").unwrap(), 6);
    assert!(parse_frequency("hourly").is_err());
    assert!(parse_frequency("7").is_err());
}

#[test]
fn append_grows_by_dose_count_and_stays_sorted() {
    let vocab = toy_vocab();
    let seq = toy_sequence(&vocab, 8);
    let spec = InterventionSpec::append("daily", "d", 1, 10, 12);
    let out = apply_intervention(&seq, &spec, &vocab).unwrap();
    assert_eq!(out.len(), seq.len() + 120);
    assert_eq!(out.visit_boundary, seq.visit_boundary + 120);
    out.validate().unwrap();
    assert!(out.values.iter().zip(&out.modalities).filter(|(_, &m)| m == 3).count() >= 120);
    let appended: Vec<usize> = (0..out.len()).filter(|&p| out.stamps[p] > anchor_stamp(&seq) && p < out.visit_boundary).collect();
    assert_eq!(appended.len(), 120);
    assert!(appended.iter().all(|&p| out.times[p][6] == 0 && out.values[p] == 0.0));
    let v1 = seq.first_visit();
    let only = apply_intervention(&v1, &spec, &vocab).unwrap();
    assert_eq!(only.len(), v1.len() + 120);
    assert_eq!(only.visit_boundary, only.len());
}

#[test]
fn scaling_rebins_visit_one_values() {
    let vocab = toy_vocab();
    let seq = toy_sequence(&vocab, 8);
    let spec = InterventionSpec::scale("cut", &["b"], 0.7);
    let out = apply_intervention(&seq, &spec, &vocab).unwrap();
    for p in 0..seq.len() {
        if seq.modalities[p] == 1 && p < seq.visit_boundary {
            assert_eq!(out.values[p], seq.values[p] * 0.7);
            assert_eq!(out.tokens[p], vocab.encode_number(1, seq.values[p] * 0.7).unwrap());
        } else {
            assert_eq!((out.values[p], out.tokens[p]), (seq.values[p], seq.tokens[p]));
        }
    }
    assert_eq!(200.0 * 0.7, 140.0);
    let same = apply_intervention(&seq, &InterventionSpec::scale("id", &["a", "b", "c"], 1.0), &vocab).unwrap();
    assert_eq!(same, seq);
    assert!(apply_intervention(&seq, &InterventionSpec::scale("bad", &["d"], 0.5), &vocab).is_err());
    assert!(InterventionSpec::scale("bad", &["a"], 0.0).validate(None).is_err());
    assert_eq!(InterventionSpec::cpap(&["a"]).kind, InterventionKind::ContinuousScale {
        modalities: vec!["a".into()],
        factor: 0.25
    });
}

#[test]
fn spec_json_round_trip() {
    let spec = InterventionSpec::append("rosuvastatin", "medication", 6, 10, 12);
    let text = serde_json::to_string(&spec).unwrap();
    assert!(text.contains("\"type\":\"categorical_append\""));
    assert_eq!(serde_json::from_str::<InterventionSpec>(&text).unwrap(), spec);
}

#[test]
fn noop_arm_has_zero_effect() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 5);
    let cohort = toy_cohort(&vocab, 6);
    let arm = simulate_arms(&model, &vocab, &cohort, &InterventionSpec::noop(), 0, ArmOptions::default()).unwrap();
    assert_eq!(arm.delta.len(), 6);
    assert!(arm.delta.iter().all(|&d| d == 0.0));
    assert_eq!(arm.effect_percent, 0.0);
    assert_eq!((arm.ci_low, arm.ci_high), (0.0, 0.0));
    let treated = simulate_arms(&model, &vocab, &cohort, &InterventionSpec::append("d", "d", 1, 10, 12), 0, ArmOptions::default()).unwrap();
    for i in 0..6 {
        assert_eq!(treated.delta[i], treated.treatment[i] - treated.control[i]);
    }
    assert!(treated.ci_low <= treated.signed_percent && treated.signed_percent <= treated.ci_high);
    assert!(simulate_arms(&model, &vocab, &cohort, &InterventionSpec::noop(), 3, ArmOptions::default()).is_err());
    let far = ArmOptions {
        horizon_months: 25.0,
        ..ArmOptions::default()
    };
    assert!(simulate_arms(&model, &vocab, &cohort, &InterventionSpec::noop(), 0, far).is_err());
}

#[test]
fn effect_percent_examples() {
    let opts = ArmOptions::default();
    let arm = ArmResult::from_pairs("fig", vec!["a".into()], vec![175.0], vec![110.0], &opts).unwrap();
    assert!((arm.effect_percent - 37.142_857_142_857_14).abs() < 1e-12);
    assert!((arm.signed_percent + 37.142_857_142_857_14).abs() < 1e-12);
    assert!(matches!(
        ArmResult::from_pairs("zero", vec!["a".into()], vec![0.0], vec![1.0], &opts),
        Err(Error::UndefinedEffect)
    ));
}

#[test]
fn four_arm_shares_controls() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 6);
    let cohort = toy_cohort(&vocab, 5);
    let a = InterventionSpec::append("A", "d", 1, 10, 6);
    let noop = InterventionSpec::noop();
    let res = four_arm(&model, &vocab, &cohort, &a, &noop, 0, ArmOptions::default()).unwrap();
    assert_eq!(res.a.control, res.b.control);
    assert_eq!(res.ab.control, res.control.predictions);
    assert_eq!(res.ab.treatment, res.a.treatment);
    assert_eq!((res.ab.ci_low, res.ab.ci_high), (res.a.ci_low, res.a.ci_high));
    assert!(res.b.delta.iter().all(|&d| d == 0.0));
    let both = four_arm(&model, &vocab, &cohort, &noop, &noop, 0, ArmOptions::default()).unwrap();
    assert_eq!(both.a.treatment, both.control.predictions);
    assert_eq!(both.ab.treatment, both.control.predictions);
    let s1 = InterventionSpec::scale("s1", &["a", "b"], 0.9);
    let s2 = InterventionSpec::scale("s2", &["b"], 0.8);
    assert!(four_arm(&model, &vocab, &cohort, &s1, &s2, 0, ArmOptions::default()).is_err());
}

#[test]
fn eligibility_rules() {
    let rule = EligibilityRule::default_for("LDL", "ldl").unwrap();
    assert_eq!((rule.comparator, rule.threshold), (Comparator::AtLeast, 130.0));
    assert!(rule.admits(160.0, 150.0));
    assert!(!rule.admits(160.0, 120.0));
    assert!(!rule.admits(100.0, 200.0));
    let hdl = EligibilityRule::default_for("hdl", "hdl").unwrap();
    assert!(hdl.admits(35.0, 40.0) && !hdl.admits(45.0, 30.0));
    assert!(EligibilityRule::default_for("tsh", "tsh").is_err());

    let vocab = toy_vocab();
    let model = toy_model(&vocab, 7);
    let mut cohort = toy_cohort(&vocab, 4);
    let keep: Vec<bool> = cohort[0].modalities[..cohort[0].len()].iter().map(|&m| m != 0).collect();
    let mut no_a = cohort[0].retain_positions(&keep);
    no_a.participant = "no-a".into();
    cohort.push(no_a);
    let all = EligibilityRule {
        modality: "a".into(),
        comparator: Comparator::AtLeast,
        threshold: f64::MIN,
    };
    let res = filter_eligible(&model, &vocab, &cohort, &all, 12.0).unwrap();
    assert_eq!(res.kept, vec![0, 1, 2, 3]);
    assert_eq!(res.missing, vec!["no-a".to_string()]);
    let none = EligibilityRule {
        threshold: f64::MAX,
        ..all.clone()
    };
    let res = filter_eligible(&model, &vocab, &cohort, &none, 12.0).unwrap();
    assert!(res.kept.is_empty());
    assert_eq!(res.failed_baseline, 4);
    let inf = EligibilityRule {
        threshold: f64::NAN,
        ..all
    };
    assert!(filter_eligible(&model, &vocab, &cohort, &inf, 12.0).is_err());
}

#[test]
fn noop_trajectory_is_flat() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 8);
    let cohort = toy_cohort(&vocab, 3);
    let flat = trajectory(&model, &vocab, &cohort, &InterventionSpec::noop(), 1, 12).unwrap();
    assert_eq!(flat.len(), 12);
    assert!(flat.iter().all(|p| p.mean_delta == 0.0 && p.sem == 0.0 && p.n == 3));
    assert_eq!(flat.iter().map(|p| p.month).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
    let dosed = trajectory(&model, &vocab, &cohort, &InterventionSpec::append("d", "d", 1, 3, 12), 1, 4).unwrap();
    assert!(dosed.iter().all(|p| p.mean_delta.is_finite()));
}

fn trial_json(extra: &str) -> String {
    format!(
        r#"{{"name":"t","table1":[{{"modality":"age","mean":55,"sd":8,"low":30,"high":80}},
        {{"modality":"b","mean":300,"sd":60,"low":100,"high":500}}{extra}],
        "arms":[{{"label":"drug","type":"categorical_append","modality":"d","category":1,"frequency":10,"duration":12}}],
        "outcome":"b","horizon_months":12,"published":{{"point":-7.5,"ci_low":-8.5,"ci_high":-6.5}}}}"#
    )
}

#[test]
fn trial_spec_defaults_and_sampling() {
    let spec = TrialSpec::from_json(&trial_json("")).unwrap();
    assert_eq!(spec.n, 200);
    let vocab = toy_vocab();
    let cohort = trial_cohort(&spec, &vocab, 3).unwrap();
    assert_eq!(cohort.len(), 200);
    assert!(cohort.iter().all(|s| s.len() == 1 && s.visit_boundary == 1 && (30.0..=80.0).contains(&s.age)));
    assert_eq!(cohort, trial_cohort(&spec, &vocab, 3).unwrap());
    let fixed = TrialSpec::from_json(&trial_json(r#",{"modality":"a","mean":50,"sd":0,"low":0,"high":100}"#)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recs = sample_trial_population(&fixed, &mut rng).unwrap();
    assert!(recs.iter().all(|r| r.events[1].value == crate::vocab::Measurement::Number(50.0)));
    let infeasible = TrialSpec::from_json(&trial_json(r#",{"modality":"a","mean":0,"sd":1,"low":5,"high":9}"#)).unwrap();
    let err = sample_trial_population(&infeasible, &mut rng).unwrap_err();
    assert!(err.to_string().contains("infeasible truncation"));
    assert!(TrialSpec::from_json(&trial_json(r#",{"modality":"a","mean":0,"sd":1,"low":5,"high":1}"#)).is_err());
    let no_age = trial_json("").replace("\"age\"", "\"c\"");
    assert!(TrialSpec::from_json(&no_age).is_err());
}

#[test]
fn truncated_mass_values() {
    assert!((truncated_normal_mass(0.0, 1.0, -1.96, 1.96) - 0.950_004_209_703_559_4).abs() < 1e-12);
    assert_eq!(truncated_normal_mass(50.0, 0.0, 0.0, 100.0), 1.0);
    assert!(truncated_normal_mass(0.0, 1.0, 5.0, 9.0) < MIN_TRUNCATION_MASS);
}

#[test]
fn trial_run_two_and_four_arm() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 9);
    let mut spec = TrialSpec::from_json(&trial_json("")).unwrap();
    spec.n = 12;
    let res = run_trial(&model, &vocab, &spec, 4, 200).unwrap();
    assert_eq!(res.arms.len(), 1);
    assert_eq!(res.predicted, res.arms[0].signed_percent);
    spec.arms.push(InterventionSpec::noop());
    let four = run_trial(&model, &vocab, &spec, 4, 200).unwrap();
    assert_eq!(four.arms.len(), 3);
    assert_eq!(four.arms[2].treatment, four.arms[0].treatment);
    assert_eq!(four.predicted, res.predicted);
}

fn row(predicted: f64, point: f64, lo: f64, hi: f64) -> ConcordanceRow {
    ConcordanceRow {
        label: "r".into(),
        predicted,
        published: Published {
            point,
            ci_low: lo,
            ci_high: hi,
        },
    }
}

#[test]
fn concordance_examples() {
    let amlodipine = row(-7.9, -7.5, -8.5, -6.5);
    assert!(amlodipine.direction_hit() && amlodipine.ci_hit());
    let ramipril = row(-10.1, -2.4, -3.3, -1.5);
    assert!(ramipril.direction_hit() && !ramipril.ci_hit());
    let zero = row(0.0, -2.4, -3.3, 1.5);
    assert!(!zero.direction_hit() && zero.ci_hit());
    let wrong = row(3.0, -2.4, -3.3, -1.5);
    assert!(!wrong.direction_hit());
    let rep = concordance(&[amlodipine, ramipril, zero, wrong]);
    assert_eq!((rep.n, rep.direction_hits, rep.ci_hits), (4, 2, 2));
    assert!(rep.to_csv("x", &[]).lines().nth(1).unwrap().starts_with("trial,predicted"));
}

#[test]
fn catalog_indices() {
    let cat = Catalog::builtin();
    for (label, idx) in [("rosuvastatin", 6), ("metformin", 84), ("empagliflozin", 114), ("semaglutide", 93), ("running", 1), ("basketball", 12)] {
        assert_eq!(cat.get(label).unwrap().category, idx);
    }
    let s = cat.spec("enalapril", None, 12).unwrap();
    assert!(matches!(s.kind, InterventionKind::CategoricalAppend { frequency: 15, category: 32, .. }));
    assert!(cat.spec("walking", None, 12).is_err());
    assert!(matches!(
        cat.spec("walking", Some(THREE_TIMES_WEEKLY), 12).unwrap().kind,
        InterventionKind::CategoricalAppend { frequency: 12, .. }
    ));
    assert!(cat.get("aspirin").is_err());
}
