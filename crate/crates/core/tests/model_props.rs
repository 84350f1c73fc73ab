use proptest::prelude::*;
use trajlm::corpus::assemble_sequence;
use trajlm::evalharness::decode_expected;
use trajlm::testutil::{toy_model, toy_record, toy_vocab};
use trajlm::{MaskKind, ModelInput};

mod common;

#[test]
fn causal_mask_is_faithful_on_random_models() {
    assert_eq!(common::causal_violations(25, 11), 0);
}

#[test]
fn parallel_targets_are_independent_on_random_models() {
    assert_eq!(common::parallel_violations(25, 12), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logits_and_expectations_stay_bounded(seed in any::<u64>(), n in 1usize..10, scale in 1f64..6.0) {
        let vocab = toy_vocab();
        let mut model = toy_model(&vocab, seed);
        for p in &mut model.params {
            p.tensor.data.iter_mut().for_each(|v| *v *= scale);
        }
        let seq = assemble_sequence(&toy_record("b", n, 2.0), &vocab, 1000).unwrap();
        let input = ModelInput::from_sequence(&seq, &vocab);
        let logits = model.logits(&input, MaskKind::Causal).unwrap();
        prop_assert!(logits.data.iter().all(|z| z.is_finite() && z.abs() <= 50.0));
        for r in 0..input.len() {
            for m in (0..vocab.n_modalities()).filter(|&m| vocab.modalities[m].is_continuous()) {
                let mids = &vocab.modalities[m].midpoints;
                let e = decode_expected(logits.row(r), &vocab, m).unwrap();
                prop_assert!(mids[0] <= e && e <= mids[mids.len() - 1]);
            }
        }
    }

    #[test]
    fn expectation_ignores_constant_shift(seed in any::<u64>(), shift in -20f64..20.0) {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, seed);
        let seq = assemble_sequence(&toy_record("s", 4, 0.0), &vocab, 1000).unwrap();
        let logits = model.logits(&ModelInput::from_sequence(&seq, &vocab), MaskKind::Causal).unwrap();
        let row = logits.row(0).to_vec();
        let r = vocab.modalities[0].token_range();
        let mut shifted = row.clone();
        shifted[r].iter_mut().for_each(|z| *z += shift);
        let a = decode_expected(&row, &vocab, 0).unwrap();
        let b = decode_expected(&shifted, &vocab, 0).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
