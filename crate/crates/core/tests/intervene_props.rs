use proptest::prelude::*;
use trajlm::corpus::assemble_sequence;
use trajlm::intervene::{apply_intervention, anchor_stamp, truncated_normal_mass, InterventionSpec, DURATIONS, FREQUENCIES};
use trajlm::synthcohort::{generate, visit1_correlation, GeneratorConfig};
use trajlm::testutil::{toy_record, toy_vocab};

mod common;

fn spec_strategy() -> impl Strategy<Value = InterventionSpec> {
    prop_oneof![
        (0usize..9, 0usize..9, 0usize..2).prop_map(|(f, d, c)| InterventionSpec::append("dose", "d", c, FREQUENCIES[f], DURATIONS[d])),
        (0.05f64..4.0, prop::sample::subsequence(vec!["a", "b", "c"], 0..=3))
            .prop_map(|(factor, ms)| InterventionSpec::scale("scale", &ms, factor)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn edits_preserve_sequence_invariants(spec in spec_strategy(), n in 0usize..20, shift in 0f64..30.0, v1_only in any::<bool>()) {
        let vocab = toy_vocab();
        let mut seq = assemble_sequence(&toy_record("i", n.max(1), shift), &vocab, 1000).unwrap();
        if v1_only {
            seq = seq.first_visit();
        }
        let out = apply_intervention(&seq, &spec, &vocab).unwrap();
        prop_assert!(out.validate().is_ok());
        prop_assert!(out.visit_boundary <= out.len());
        for p in 0..out.len() {
            let m = out.modalities[p];
            let spec_m = &vocab.modalities[m];
            prop_assert!(spec_m.token_range().contains(&out.tokens[p]));
            if spec_m.is_continuous() {
                prop_assert_eq!(out.tokens[p], vocab.encode_number(m, out.values[p]).unwrap());
            }
        }
        prop_assert!(out.stamps[..out.visit_boundary].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(out.stamps[out.visit_boundary..out.len()].windows(2).all(|w| w[0] <= w[1]));
        if let trajlm::InterventionKind::CategoricalAppend { frequency, duration, .. } = spec.kind {
            let added = (frequency * duration) as usize;
            prop_assert_eq!(out.len(), seq.len() + added);
            let anchor = anchor_stamp(&seq);
            let doses = (0..out.len()).filter(|&p| out.stamps[p] > anchor && out.modalities[p] == 3 && out.values[p] == 0.0).count();
            prop_assert!(doses >= added);
        } else {
            prop_assert_eq!(out.len(), seq.len());
            prop_assert_eq!(&out.modalities, &seq.modalities);
        }
    }
}

#[test]
fn truncated_sample_means_match_quadrature() {
    for (i, v) in common::truncation_fixtures().iter().enumerate() {
        let (sample, oracle, se) = common::truncated_sample_check(v, 20_000, 100 + i as u64);
        assert!((sample - oracle).abs() < 2.0 * se, "{}: {sample} vs {oracle} (se {se})", v.modality);
    }
}

#[test]
fn truncated_mass_matches_quadrature() {
    for v in common::truncation_fixtures() {
        let n = 200_000;
        let h = (v.high - v.low) / n as f64;
        let pdf = |x: f64| (-0.5 * ((x - v.mean) / v.sd).powi(2)).exp() / (v.sd * (2.0 * std::f64::consts::PI).sqrt());
        let simpson: f64 = (0..=n)
            .map(|i| pdf(v.low + i as f64 * h) * if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 })
            .sum::<f64>()
            * h
            / 3.0;
        assert!((truncated_normal_mass(v.mean, v.sd, v.low, v.high) - simpson).abs() < 1e-10, "{}", v.modality);
    }
}

#[test]
fn planted_correlations_match_analytic_values() {
    let cfg = GeneratorConfig::default();
    let (records, _) = generate(&cfg).unwrap();
    for (a, b) in [("x", "y"), ("x", "target"), ("y", "control"), ("target", "m06"), ("m07", "m08"), ("x", "drift")] {
        let analytic = cfg.analytic_correlation(a, b).unwrap();
        let empirical = visit1_correlation(&records, a, b).unwrap();
        assert!((analytic - empirical).abs() <= 0.05, "{a}/{b}: analytic {analytic} empirical {empirical}");
    }
}
