use super::stats::*;
use super::*;
use crate::testutil::{toy_model, toy_sequence, toy_vocab};

#[test]
fn decode_expected_examples() {
    let vocab = toy_vocab();
    let spec = &vocab.modalities[0];
    let mut row = vec![0.0; vocab.total_tokens];
    let mean: f64 = spec.midpoints.iter().sum::<f64>() / spec.midpoints.len() as f64;
    assert!((decode_expected(&row, &vocab, 0).unwrap() - mean).abs() < 1e-12);
    row[spec.cum_base] = 1e4;
    assert_eq!(decode_expected(&row, &vocab, 0).unwrap(), spec.midpoints[0]);
    let shifted: Vec<f64> = row.iter().enumerate().map(|(i, v)| if spec.token_range().contains(&i) { v + 7.5 } else { *v }).collect();
    assert_eq!(decode_expected(&shifted, &vocab, 0).unwrap(), spec.midpoints[0]);
    assert!(decode_expected(&row, &vocab, 3).unwrap_err().to_string().contains("top-K"));
}

#[test]
fn decode_two_bin_hand_softmax() {
    // Two bins with midpoints {0, 3} and logits [ln 2, ln 1].
    let p = softmax(&[2f64.ln(), 0.0]);
    let e = p[0] * 0.0 + p[1] * 3.0;
    assert!((e - 1.0).abs() < 1e-15);
}

#[test]
fn topk_examples() {
    let vocab = toy_vocab();
    let d = 3;
    let base = vocab.modalities[d].cum_base;
    let uniform = vec![0.0; vocab.total_tokens];
    let rows: Vec<&[f64]> = vec![&uniform; 4];
    let truths = [0, 1, 1, 0];
    assert_eq!(topk_accuracy(&rows, &truths, &vocab, d, 1).unwrap(), 0.5);
    assert_eq!(topk_accuracy(&rows, &truths, &vocab, d, 2).unwrap(), 1.0);
    assert!(topk_accuracy(&rows, &truths, &vocab, d, 3).is_err());
    let mut sharp = vec![0.0; vocab.total_tokens];
    sharp[base + 1] = 5.0;
    assert_eq!(topk_accuracy(&[&sharp], &[1], &vocab, d, 1).unwrap(), 1.0);
    assert!(topk_accuracy(&[&sharp], &[1], &vocab, 0, 1).is_err());
}

#[test]
fn pearson_basics() {
    let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let res = pearson_with_ci(&x, &x).unwrap();
    assert_eq!(res.r, 1.0);
    assert_eq!(res.p, 0.0);
    assert_eq!(pearson(&x, &neg).unwrap(), -1.0);
    assert!(pearson(&x, &vec![1.0; 20]).is_err());
    assert!(pearson_with_ci(&x[..3], &x[..3]).is_err());
}

#[test]
fn fisher_ci_matches_high_precision_value() {
    let (lo, hi) = fisher_ci(0.5, 103);
    assert!((lo - 0.339_304_335_577_895_6).abs() < 1e-12);
    assert!((hi - 0.632_340_311_944_997_8).abs() < 1e-12);
}

#[test]
fn fisher_z_examples() {
    let (z, p) = fisher_z_compare(0.6, 0.4, 103).unwrap();
    assert!((z - 1.905_640_403_519_514_6).abs() < 1e-12);
    assert!((p - 0.056_696_876_321_379_04).abs() < 1e-12);
    let (z0, p0) = fisher_z_compare(0.3, 0.3, 50).unwrap();
    assert_eq!((z0, p0), (0.0, 1.0));
    let (zs, _) = fisher_z_compare(0.4, 0.6, 103).unwrap();
    assert_eq!(zs, -z);
    assert!(fisher_z_compare(1.0, 0.2, 10).is_err());
}

#[test]
fn incomplete_beta_known_values() {
    assert!((reg_inc_beta(1.0, 1.0, 0.3) - 0.3).abs() < 1e-15);
    assert!((reg_inc_beta(2.0, 3.0, 0.4) - 0.5248).abs() < 1e-14);
    assert!((reg_inc_beta(0.5, 0.5, 0.5) - 0.5).abs() < 1e-14);
    assert!((student_t_two_sided(0.0, 7.0) - 1.0).abs() < 1e-15);
}

#[test]
fn bh_examples() {
    assert_eq!(bh_fdr(&[0.01, 0.02, 0.04], 0.05), vec![true; 3]);
    assert_eq!(bh_fdr(&[1.0; 4], 0.05), vec![false; 4]);
    assert_eq!(bh_fdr(&[0.04], 0.05), vec![true]);
    assert_eq!(bh_fdr(&[0.04, 0.9, 0.03, 0.2], 0.05), vec![false; 4]);
    assert_eq!(bh_fdr(&[0.001, 0.9, 0.02, 0.2], 0.05), vec![true, false, true, false]);
}

#[test]
fn ols_recovers_exact_linear_map() {
    let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i * i % 7) as f64, (i % 2) as f64, 3.0]).collect();
    let y: Vec<f64> = x.iter().map(|f| 2.0 + 1.5 * f[0] - 0.5 * f[1] + 4.0 * f[2]).collect();
    let c = ols(&x, &y).unwrap();
    for (got, want) in c.iter().zip([2.0, 1.5, -0.5, 4.0, 0.0]) {
        assert!((got - want).abs() < 1e-9, "{c:?}");
    }
}

#[test]
fn baselines_on_handmade_pairs() {
    let mk = |i: usize, v1: f64, truth: f64| LongitudinalPair {
        participant: format!("p{i}"),
        modality: 0,
        v1_value: v1,
        v1_token: v1 as usize,
        truth,
        age: 40.0 + (i * 7 % 11) as f64,
        sex_index: i % 2,
        bmi_token: i % 3,
        model: None,
    };
    let train: Vec<_> = (0..12).map(|i| mk(i, i as f64, i as f64)).collect();
    let test = vec![mk(20, 7.0, 7.0)];
    let locf = baseline_predict(BaselineKind::Locf, &train, &test).unwrap();
    assert_eq!(locf.predictions, vec![Some(7.0)]);
    let lin = baseline_predict(BaselineKind::Linear, &train, &test).unwrap();
    assert!((lin.predictions[0].unwrap() - 7.0).abs() < 1e-9);
    let coef = ols(&train.iter().map(|p| p.features()).collect::<Vec<_>>(), &train.iter().map(|p| p.truth).collect::<Vec<_>>()).unwrap();
    for (got, want) in coef[1..].iter().zip([1.0, 0.0, 0.0, 0.0]) {
        assert!((got - want).abs() < 1e-9);
    }
    let few = baseline_predict(BaselineKind::Linear, &train[..4], &test).unwrap();
    assert_eq!(few.predictions, vec![None]);
    assert_eq!(few.skipped, vec![0]);
}

#[test]
fn within_visit_excludes_tiny_modalities() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 1);
    let seq = toy_sequence(&vocab, 1).first_visit();
    let pred = eval_within_visit(&model, &vocab, &[seq]).unwrap();
    assert!(pred.report(&vocab).rows.is_empty());
    let seqs: Vec<_> = (0..3).map(|_| toy_sequence(&vocab, 9)).collect();
    let report = eval_within_visit(&model, &vocab, &seqs).unwrap().report(&vocab);
    assert!(report.rows.iter().all(|r| r.n >= 2));
    let csv = report.to_csv("test");
    assert!(csv.lines().nth(1).unwrap() == "modality,n,r,p,ci_low,ci_high,top1,top5");
}

#[test]
fn longitudinal_targets_are_order_invariant() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 2);
    let seq = toy_sequence(&vocab, 8);
    let targets: Vec<(usize, TimeVec)> = visit2_targets(&seq).iter().map(|t| (t.0, t.1)).collect();
    assert!(targets.len() >= 3);
    let rows = predict_visit2(&model, &vocab, &seq, &targets).unwrap();
    let mut rev = targets.clone();
    rev.reverse();
    let rev_rows = predict_visit2(&model, &vocab, &seq, &rev).unwrap();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row, &rev_rows[targets.len() - 1 - i]);
    }
    let single = predict_visit2(&model, &vocab, &seq, &targets[1..2]).unwrap();
    assert_eq!(single[0], rows[1]);
    let ev = eval_longitudinal(&model, &vocab, &[seq], None).unwrap();
    assert!(ev.pairs.iter().all(|p| p.model.is_some()));
    assert_eq!(ev.pair_predictions().continuous.values().map(Vec::len).sum::<usize>(), ev.pairs.len());
}

#[test]
fn crossmodal_sweep_shapes() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 3);
    let ctx = ProbeContext {
        time: [0, 9, 0, 6, 120, 15, 0],
        age: 50.0,
        sex: crate::corpus::Sex::Unknown,
    };
    let curve = crossmodal_sweep(&model, &vocab, 0, 1, &ctx).unwrap();
    assert_eq!(curve.len(), vocab.modalities[0].num_tokens());
    let mids = &vocab.modalities[1].midpoints;
    assert!(curve.iter().all(|&(_, e)| e >= mids[0] && e <= mids[mids.len() - 1]));
    assert!(crossmodal_sweep(&model, &vocab, 0, 3, &ctx).is_err());
    assert_eq!(crossmodal_sweep(&model, &vocab, 3, 0, &ctx).unwrap().len(), 2);
}

#[test]
fn bioage_properties() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let ages: Vec<f64> = (0..200).map(|_| rng.random_range(20.0..80.0)).collect();
    let emb: Vec<Vec<f64>> = ages.iter().map(|&a| vec![a, rng.random::<f64>(), rng.random::<f64>()]).collect();
    let res = bioage(&emb, &ages, 1e-6, 5, 1).unwrap();
    for (p, a) in res.predicted.iter().zip(&ages) {
        assert!((p - a).abs() < 1e-3);
    }
    assert!(res.acceleration.iter().all(|r| r.abs() < 1e-3));
    let noisy: Vec<Vec<f64>> = ages.iter().map(|&a| vec![a + rng.random_range(-20.0..20.0), rng.random::<f64>()]).collect();
    let res = bioage(&noisy, &ages, BIOAGE_ALPHA, BIOAGE_FOLDS, 1).unwrap();
    assert!(pearson(&res.acceleration, &ages).unwrap().abs() < 1e-8);
    let random: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
    let res = bioage(&random, &ages, BIOAGE_ALPHA, BIOAGE_FOLDS, 1).unwrap();
    assert!(res.r2.abs() < 0.1, "{}", res.r2);
    assert!(bioage(&random[..5], &ages[..5], 1.0, 5, 1).is_err());
    assert!(bioage(&random, &vec![40.0; 200], 1.0, 5, 1).is_err());
}

#[test]
fn svg_outputs_are_well_formed() {
    let s = plot::scatter(&[(0.0, 1.0), (1.0, 2.0)], "a < b", "x", "y");
    assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>") && s.contains("a &lt; b"));
    let l = plot::line_with_band(&[(1.0, 0.0, 0.1), (2.0, 0.5, 0.2)], "t", "month", "delta");
    assert!(l.contains("<polyline"));
    let f = plot::forest(
        &[plot::ForestRow {
            label: "trial".into(),
            predicted: (-7.9, -8.4, -7.4),
            published: (-7.5, -8.5, -6.5),
        }],
        "forest",
    );
    assert!(f.contains("trial"));
}
