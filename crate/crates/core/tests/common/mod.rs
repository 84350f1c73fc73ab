//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajlm::corpus::assemble_sequence;
use trajlm::intervene::TrialVariable;
use trajlm::model::parallel_input;
use trajlm::testutil::{toy_model, toy_record, toy_vocab};
use trajlm::{MaskKind, ModelInput, Vocabulary};

/// `(r, n, p)`: two-sided correlation t-test p-values evaluated with 50-digit
/// arithmetic.
pub const T_P_FIXTURES: [(f64, usize, f64); 20] = [
    (0.4337, 12, 0.15896289935030390255),
    (0.0907, 2000, 4.8640307590199632521e-5),
    (-0.619, 10000, 0.0),
    (0.0573, 30, 0.76360025650049872885),
    (-0.6341, 5, 0.25059505228490257563),
    (0.355, 5, 0.55768192722857157691),
    (-0.2699, 10000, 1.8298902669925778251e-166),
    (0.3123, 2000, 1.7051022309448495439e-46),
    (0.1746, 500, 8.6877985410062007262e-5),
    (-0.721, 10000, 0.0),
    (-0.2902, 2000, 4.1476302364686541528e-40),
    (0.3057, 30, 0.10041612394843144738),
    (-0.0476, 5, 0.93941669197337598508),
    (0.796, 500, 1.1799997745993534156e-110),
    (0.502, 12, 0.096305596799096412365),
    (0.515, 103, 2.6103341405994929373e-8),
    (0.5445, 12, 0.06718562635454106849),
    (-0.1018, 2000, 5.0754902189023489554e-6),
    (-0.409, 8, 0.314355528907106625),
    (0.6877, 12, 0.013447282820941151099),
];

/// Fixture p-values of 0.0 stand for values below the f64 range
/// (about 1.5e-1051 and 1.9e-1595); anything under 1e-300 matches them.
pub fn p_value_matches(got: f64, expected: f64) -> bool {
    if expected == 0.0 {
        got < 1e-300
    } else {
        ((got - expected) / expected).abs() < 1e-9
    }
}

/// Fisher-Z 95% interval for r = 0.5, n = 103, evaluated with 50-digit
/// arithmetic.
pub const FISHER_FIXTURE: (f64, usize, f64, f64) = (0.5, 103, 0.3393043355778956, 0.6323403119449978);

/// Benjamini-Hochberg by definition: hypothesis `j` is rejected when some
/// `i` has at least `i` p-values at or below `i q / m` and `p_j` is one of
/// them.
pub fn bh_brute(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    (0..m)
        .map(|j| {
            (1..=m).any(|i| {
                let t = i as f64 * q / m as f64;
                p.iter().filter(|&&x| x <= t).count() >= i && p[j] <= t
            })
        })
        .collect()
}

/// Counts mismatches between `bh_fdr` and the definition over every vector
/// of length 1..=`max_m` drawn from `grid`.
pub fn bh_exhaustive_mismatches(grid: &[f64], q: f64, max_m: usize) -> (usize, usize) {
    let mut cases = 0;
    let mut bad = 0;
    for m in 1..=max_m {
        let total = grid.len().pow(m as u32);
        let mut p = vec![0.0; m];
        for code in 0..total {
            let mut c = code;
            for slot in p.iter_mut() {
                *slot = grid[c % grid.len()];
                c /= grid.len();
            }
            cases += 1;
            if trajlm::evalharness::bh_fdr(&p, q) != bh_brute(&p, q) {
                bad += 1;
            }
        }
    }
    (cases, bad)
}

/// P-value grid with exact threshold hits for every `m <= 8` at q = 0.05.
pub const BH_GRID: [f64; 6] = [0.001, 0.00625, 0.0125, 0.025, 0.05, 0.6];

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean and standard deviation of a truncated normal by Simpson quadrature.
pub fn truncated_moments(v: &TrialVariable) -> (f64, f64) {
    let n = 200_000;
    let f = |x: f64| normal_pdf(x, v.mean, v.sd);
    let z = simpson(f, v.low, v.high, n);
    let m1 = simpson(|x| x * f(x), v.low, v.high, n) / z;
    let m2 = simpson(|x| (x - m1) * (x - m1) * f(x), v.low, v.high, n) / z;
    (m1, m2.sqrt())
}

fn var(modality: &str, mean: f64, sd: f64, low: f64, high: f64) -> TrialVariable {
    TrialVariable {
        modality: modality.into(),
        mean,
        sd,
        low,
        high,
    }
}

/// Symmetric, one-sided, tail-only, skewed and wide truncations.
pub fn truncation_fixtures() -> Vec<TrialVariable> {
    vec![
        var("sym", 0.0, 1.0, -1.96, 1.96),
        var("ldl", 130.0, 30.0, 100.0, 300.0),
        var("hba1c", 5.7, 0.5, 6.5, 9.0),
        var("bmi", 31.0, 6.0, 25.0, 33.0),
        var("age", 55.0, 10.0, 18.0, 90.0),
    ]
}

/// `(sample mean, oracle mean, standard error)` for `n` draws.
pub fn truncated_sample_check(v: &TrialVariable, n: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sum: f64 = (0..n)
        .map(|_| trajlm::intervene::truncated_normal_sample(v, &mut rng).unwrap())
        .sum();
    let (mean, sd) = truncated_moments(v);
    (sum / n as f64, mean, sd / (n as f64).sqrt())
}

/// Random-model causal-faithfulness trials: perturbing every input after a
/// random position must leave logits up to that position bitwise unchanged.
/// Returns the number of violating trials.
pub fn causal_violations(trials: usize, seed: u64) -> usize {
    let vocab = toy_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let model = toy_model(&vocab, rng.random());
        let rec = toy_record("c", rng.random_range(2..9), rng.random_range(0.0..20.0));
        let seq = assemble_sequence(&rec, &vocab, 1000).unwrap();
        let input = ModelInput::from_sequence(&seq, &vocab);
        let p = rng.random_range(0..input.len() - 1);
        let mut changed = input.clone();
        for i in p + 1..changed.len() {
            changed.tokens[i] = rng.random_range(0..vocab.total_tokens);
            changed.value_z[i] = rng.random_range(-3.0..3.0);
            changed.modalities[i] = rng.random_range(0..vocab.n_modalities());
            changed.times[i][0] = rng.random_range(0..7);
            changed.query_modalities[i] = rng.random_range(0..vocab.n_modalities());
        }
        let a = model.logits(&input, MaskKind::Causal).unwrap();
        let b = model.logits(&changed, MaskKind::Causal).unwrap();
        if (0..=p).any(|r| a.row(r) != b.row(r)) {
            bad += 1;
        }
    }
    bad
}

/// Random-model parallel-probe trials: each target's prediction must be
/// bitwise identical whether it is probed alone, among shuffled others, or
/// next to altered filler content. Returns the number of violating trials.
pub fn parallel_violations(trials: usize, seed: u64) -> usize {
    use rand::seq::SliceRandom;
    let vocab = toy_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let model = toy_model(&vocab, rng.random());
        let rec = toy_record("p", rng.random_range(2..8), rng.random_range(0.0..20.0));
        let seq = assemble_sequence(&rec, &vocab, 1000).unwrap();
        let ctx = ModelInput::from_sequence(&seq.first_visit(), &vocab);
        let t2 = seq.times[seq.visit_boundary];
        let k = rng.random_range(1..6);
        let targets: Vec<(usize, _)> = (0..k).map(|_| (rng.random_range(0..vocab.n_modalities()), t2)).collect();
        let full = parallel_input(&ctx, &targets).unwrap();
        let full_logits = model.logits(&full.input, full.mask).unwrap();

        let mut violated = false;
        for (i, &target) in targets.iter().enumerate() {
            let alone = parallel_input(&ctx, &[target]).unwrap();
            let alone_logits = model.logits(&alone.input, alone.mask).unwrap();
            violated |= alone_logits.row(alone.probe_rows[0]) != full_logits.row(full.probe_rows[i]);
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<_> = order.iter().map(|&i| targets[i]).collect();
        let sh = parallel_input(&ctx, &shuffled).unwrap();
        let sh_logits = model.logits(&sh.input, sh.mask).unwrap();
        for (j, &i) in order.iter().enumerate() {
            violated |= sh_logits.row(sh.probe_rows[j]) != full_logits.row(full.probe_rows[i]);
        }
        if k > 1 {
            let victim = rng.random_range(0..k);
            let mut altered = full.clone();
            for row in [full.probe_rows[victim] - 1, full.probe_rows[victim]] {
                altered.input.tokens[row] = rng.random_range(0..vocab.total_tokens);
                altered.input.value_z[row] = rng.random_range(-3.0..3.0);
            }
            altered.input.query_modalities[full.probe_rows[victim]] = rng.random_range(0..vocab.n_modalities());
            let alt_logits = model.logits(&altered.input, altered.mask).unwrap();
            for i in (0..k).filter(|&i| i != victim) {
                violated |= alt_logits.row(full.probe_rows[i]) != full_logits.row(full.probe_rows[i]);
            }
        }
        bad += usize::from(violated);
    }
    bad
}

/// Every measurement token decodes to a `(modality, bin)` that re-encodes to
/// the same id. Returns the number of failures.
pub fn roundtrip_failures(vocab: &Vocabulary) -> usize {
    (0..vocab.total_tokens)
        .filter(|&tok| {
            let d = vocab.decode_token(tok).unwrap();
            let spec = &vocab.modalities[d.modality];
            let back = match &d.value {
                trajlm::vocab::TokenValue::Midpoint(x) => vocab.encode_number(d.modality, *x).ok(),
                trajlm::vocab::TokenValue::Category(c) => vocab.encode_category(d.modality, c).ok(),
            };
            back != Some(tok) || spec.cum_base + d.bin != tok
        })
        .count()
}
