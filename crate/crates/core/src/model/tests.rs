use super::*;
use crate::numerics::{grad_check, DEFAULT_EPS, MIN_SAMPLES};
use crate::testutil::{toy_model, toy_sequence, toy_vocab};

#[test]
fn zero_gates_match_model_without_extras() {
    let vocab = toy_vocab();
    let mut with = Model::new(crate::testutil::toy_config(&vocab), 3).unwrap();
    for p in &mut with.params {
        if p.name.contains("query_") {
            p.tensor.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin() * 0.2);
        }
    }
    let mut cfg = with.config.clone();
    cfg.n_value_extras = 0;
    let kept: Vec<Param> = with
        .params
        .iter()
        .filter(|p| !p.name.contains("v_extra"))
        .map(|p| {
            let mut p = p.clone();
            if p.name.contains("gates") {
                p.tensor = Tensor::zeros(&[cfg.n_heads, 0]);
            }
            p
        })
        .collect();
    let without = Model::from_params(cfg, kept).unwrap();
    let seq = toy_sequence(&vocab, 6);
    let input = ModelInput::from_sequence(&seq, &vocab);
    let a = with.logits(&input, MaskKind::Causal).unwrap();
    let b = without.logits(&input, MaskKind::Causal).unwrap();
    assert_eq!(a, b);
}

#[test]
fn logits_respect_clamp() {
    let vocab = toy_vocab();
    let mut model = toy_model(&vocab, 1);
    let seq = toy_sequence(&vocab, 8);
    let input = ModelInput::from_sequence(&seq, &vocab);
    let logits = model.logits(&input, MaskKind::Causal).unwrap();
    assert_eq!(logits.shape, vec![seq.len(), vocab.total_tokens]);
    assert!(logits.data.iter().all(|z| z.abs() < 50.0));
    // Far past saturation tanh rounds to exactly 1, so the bound is only
    // non-strict there.
    for p in &mut model.params {
        p.tensor.data.iter_mut().for_each(|v| *v *= 4.0);
    }
    let logits = model.logits(&input, MaskKind::Causal).unwrap();
    assert!(logits.data.iter().all(|z| z.abs() <= 50.0));
}

#[test]
fn minute_change_moves_rows_by_time_embedding_delta_only() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 2);
    let seq = toy_sequence(&vocab, 3);
    let mut input = ModelInput::from_sequence(&seq, &vocab);
    input.tokens[1] = input.tokens[0];
    input.value_z[1] = input.value_z[0];
    input.modalities[1] = input.modalities[0];
    input.positions[1] = input.positions[0];
    input.times[1] = input.times[0];
    input.times[1][2] = input.times[0][2] + 1;
    let tape = Tape::new();
    let vars = model.register(&tape, false);
    let h = model.embed_inputs(&tape, &vars, &input).unwrap().value();
    let minute = &model.params[model.layout.time[2]].tensor;
    let (m0, m1) = (input.times[0][2], input.times[1][2]);
    for j in 0..model.config.d_model {
        let want = minute.row(m1)[j] - minute.row(m0)[j];
        assert!((h.row(1)[j] - h.row(0)[j] - want).abs() < 1e-12);
    }
}

#[test]
fn categorical_zero_value_component_is_constant() {
    let vocab = toy_vocab();
    let seq = toy_sequence(&vocab, 8);
    let input = ModelInput::from_sequence(&seq, &vocab);
    let cats: Vec<usize> = (0..input.len()).filter(|&i| !vocab.modalities[input.modalities[i]].is_continuous()).collect();
    assert!(cats.iter().all(|&i| input.value_z[i] == 0.0));
    assert!(!cats.is_empty());
}

#[test]
fn causal_prefix_is_bitwise_stable() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 4);
    let seq = toy_sequence(&vocab, 7);
    let input = ModelInput::from_sequence(&seq, &vocab);
    let base = model.logits(&input, MaskKind::Causal).unwrap();
    let p = 5;
    let mut changed = input.clone();
    for i in p + 1..changed.len() {
        changed.tokens[i] = (changed.tokens[i] + 3) % vocab.total_tokens;
        changed.value_z[i] += 1.5;
        changed.query_modalities[i] = 0;
    }
    let other = model.logits(&changed, MaskKind::Causal).unwrap();
    for r in 0..=p {
        assert_eq!(base.row(r), other.row(r));
    }
}

#[test]
fn parallel_targets_are_independent() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 5);
    let seq = toy_sequence(&vocab, 6);
    let ctx = ModelInput::from_sequence(&seq.first_visit(), &vocab);
    let t2 = seq.times[seq.visit_boundary];
    let targets = vec![(0, t2), (1, t2), (3, t2)];
    let full = parallel_input(&ctx, &targets).unwrap();
    let full_logits = model.logits(&full.input, full.mask).unwrap();
    let reordered = parallel_input(&ctx, &[(3, t2), (1, t2)]).unwrap();
    let re_logits = model.logits(&reordered.input, reordered.mask).unwrap();
    assert_eq!(full_logits.row(full.probe_rows[1]), re_logits.row(reordered.probe_rows[1]));
    assert_eq!(full_logits.row(full.probe_rows[2]), re_logits.row(reordered.probe_rows[0]));

    let mut perturbed = full.clone();
    let f0 = full.probe_rows[0] - 1;
    perturbed.input.tokens[f0] = 0;
    perturbed.input.value_z[f0] = -3.0;
    let p_logits = model.logits(&perturbed.input, perturbed.mask).unwrap();
    assert_ne!(full_logits.row(full.probe_rows[0]), p_logits.row(full.probe_rows[0]));
    assert_eq!(full_logits.row(full.probe_rows[1]), p_logits.row(full.probe_rows[1]));
}

#[test]
fn embedding_of_single_token_is_its_hidden_state() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 6);
    let seq = toy_sequence(&vocab, 1).first_visit();
    let input = ModelInput::from_sequence(&seq, &vocab);
    assert_eq!(input.len(), 1);
    let emb = model.extract_embedding(&input).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape, false);
    let m = Rc::new(build_mask(MaskKind::Causal, 1).unwrap());
    let hidden = model.forward(&tape, &vars, &input, m, None).unwrap().hidden.value();
    assert_eq!(emb, hidden.row(0));
}

#[test]
fn appended_pads_leave_embedding_unchanged() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 7);
    let seq = toy_sequence(&vocab, 5);
    let input = ModelInput::from_sequence(&seq, &vocab);
    let base = model.extract_embedding(&input).unwrap();
    let mut padded = input.clone();
    for _ in 0..3 {
        padded.tokens.push(vocab.pad_token);
        padded.value_z.push(0.0);
        padded.modalities.push(vocab.pad_modality());
        padded.times.push(*input.times.last().unwrap());
        padded.positions.push(padded.positions.len());
        padded.query_modalities.push(vocab.pad_modality());
        padded.query_times.push(*input.times.last().unwrap());
    }
    assert_eq!(model.extract_embedding(&padded).unwrap(), base);
    let mut all_pad = padded.clone();
    all_pad.tokens.iter_mut().for_each(|t| *t = vocab.pad_token);
    assert!(model.extract_embedding(&all_pad).is_err());
}

#[test]
fn duplicated_content_embedding_is_finite_and_repeatable() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 8);
    let seq = toy_sequence(&vocab, 4).first_visit();
    let input = ModelInput::from_sequence(&seq, &vocab);
    let mut twice = input.clone();
    twice.tokens.extend_from_slice(&input.tokens);
    twice.value_z.extend_from_slice(&input.value_z);
    twice.modalities.extend_from_slice(&input.modalities);
    twice.times.extend_from_slice(&input.times);
    twice.positions.extend(input.len()..2 * input.len());
    twice.query_modalities.extend_from_slice(&input.query_modalities);
    twice.query_times.extend_from_slice(&input.query_times);
    let a = model.extract_embedding(&twice).unwrap();
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, model.extract_embedding(&twice).unwrap());
}

#[test]
fn stream_length_mismatch_is_rejected() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 9);
    let seq = toy_sequence(&vocab, 4);
    let mut input = ModelInput::from_sequence(&seq, &vocab);
    input.query_times.pop();
    assert!(matches!(model.logits(&input, MaskKind::Causal), Err(Error::ShapeMismatch { .. })));
    let mut input = ModelInput::from_sequence(&seq, &vocab);
    input.tokens[0] = vocab.total_tokens + 5;
    assert!(matches!(model.logits(&input, MaskKind::Causal), Err(Error::IndexOutOfRange { .. })));
}

#[test]
fn logits_gradient_matches_finite_differences() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 10);
    let seq = toy_sequence(&vocab, 3);
    let input = ModelInput::from_sequence(&seq, &vocab);
    let tensors: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let n = input.len();
    let weights = Tensor::from_fn(&[n, vocab.total_tokens], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    let report = grad_check(
        &tensors,
        |tape, vars| {
            let m = Rc::new(build_mask(MaskKind::Causal, n)?);
            let out = model.forward(tape, vars, &input, m, None)?;
            Ok(out.logits.mul(tape.constant(weights.clone()))?.sum())
        },
        DEFAULT_EPS,
        MIN_SAMPLES,
        11,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_roundtrip_and_validation() {
    let vocab = toy_vocab();
    let model = toy_model(&vocab, 12);
    let mut ckpt = Checkpoint::new(model, vocab.clone(), 12).unwrap();
    ckpt.meta.insert("step".into(), "3".into());
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.meta["step"], "3");
    for (a, b) in back.model.params.iter().zip(&ckpt.model.params) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
}

#[test]
fn mismatched_vocabulary_is_rejected_on_load() {
    let vocab = toy_vocab();
    let ckpt = Checkpoint::new(toy_model(&vocab, 13), vocab.clone(), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    assert!(Checkpoint::load_with_vocab(&path, &vocab).is_ok());
    let mut other = vocab.clone();
    other.modalities[0].midpoints[0] += 1.0;
    let err = Checkpoint::load_with_vocab(&path, &other).unwrap_err();
    assert!(err.to_string().contains("vocabulary hash mismatch"), "{err}");
}

#[test]
fn published_configuration_parameter_count() {
    // 667 modalities and 13,056 measurement tokens; the count is reported, not
    // asserted against the published total (head geometry is ambiguous).
    let mut cfg = ModelConfig::paper_xl(&toy_vocab());
    cfg.vocab_size = 13_056;
    cfg.n_modalities = 667;
    let n = Model::count_for(&cfg);
    assert!(n > 10_000_000, "{n}");
}
