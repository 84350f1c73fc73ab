//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde_json::json;
use sha2::{Digest, Sha256};
use trajlm::corpus::{self, assemble_sequence, read_cohort, write_cohort};
use trajlm::evalharness::plot::{self, ForestRow};
use trajlm::evalharness::{
    baseline_predict, crossmodal_sweep, eval_longitudinal, eval_within_visit, fisher_z_compare, longitudinal_pairs, BaselineKind,
};
use trajlm::intervene::{concordance, filter_eligible, run_trial, simulate_arms, trajectory, EligibilityRule};
use trajlm::objective::{metrics_csv, train};
use trajlm::synthcohort::generate;
use trajlm::vocab::build_vocabulary;
use trajlm::{
    ArmOptions, Checkpoint, GeneratorConfig, InterventionSpec, Measurement, MetricReport, ModalityDef, ModalityKind, Predictions, ProbeContext,
    Sex, TokenSequence, TrainConfig, TrialSpec, Vocabulary,
};

use crate::io::{self, Provenance};
use crate::outln;
use crate::{
    BuildVocabArgs, Cli, Command, EvalLongitudinalArgs, EvalNtpArgs, InspectArgs, ProbeArgs, SimulateArgs, SynthArgs, TokenizeArgs,
    TrainArgs, TrialRunArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let plot = cli.plot;
    match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Tokenize(a) => tokenize(a),
        Command::Train(a) => train_cmd(a, plot),
        Command::EvalNtp(a) => eval_ntp(a, plot),
        Command::EvalLongitudinal(a) => eval_longitudinal_cmd(a, plot),
        Command::ProbeCrossmodal(a) => probe(a, plot),
        Command::Simulate(a) => simulate(a, plot),
        Command::TrialRun(a) => trial_run(a, plot),
        Command::Synth(a) => synth(a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One definition per observed modality, in name order: all-numeric
/// modalities are continuous, all-text ones categorical.
fn infer_defs(values: &BTreeMap<String, Vec<Measurement>>) -> Result<Vec<ModalityDef>> {
    values
        .iter()
        .map(|(name, vals)| {
            let numbers = vals.iter().filter(|v| matches!(v, Measurement::Number(_))).count();
            if numbers == vals.len() {
                Ok(ModalityDef::continuous(name.clone()))
            } else if numbers == 0 {
                Ok(ModalityDef::categorical(name.clone(), &[]))
            } else {
                bail!("modality `{name}` mixes numeric and categorical values; declare it with --defs")
            }
        })
        .collect()
}

fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let records = read_cohort(&a.cohort)?;
    let values = corpus::collect_values(&records);
    let mut defs = match &a.defs {
        Some(p) => io::read_json::<Vec<ModalityDef>>(p)?,
        None => infer_defs(&values)?,
    };
    if let Some(k) = a.bins {
        for d in defs.iter_mut().filter(|d| d.kind == ModalityKind::Continuous && d.bins.is_none()) {
            d.bins = Some(k);
        }
    }
    let vocab = build_vocabulary(&defs, &values)?;
    for w in &vocab.warnings {
        eprintln!("warning: {w}");
    }
    vocab.save(&a.out)?;
    eprintln!(
        "{} modalities, {} tokens from {} participants; vocab_hash={}",
        vocab.n_modalities(),
        vocab.total_tokens,
        records.len(),
        vocab.hash()
    );
    Ok(())
}

fn sequences(records: &[trajlm::ParticipantRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    Ok(records.iter().map(|r| assemble_sequence(r, vocab, max_len)).collect::<trajlm::Result<_>>()?)
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let records = read_cohort(&a.cohort)?;
    let seqs = sequences(&records, &vocab, a.max_len)?;
    let entries: Vec<_> = seqs
        .iter()
        .map(|s| {
            json!({
                "participant": s.participant,
                "tokens": s.tokens,
                "modalities": &s.modalities[..s.len()],
                "values": s.values,
                "stamps": &s.stamps[..s.len()],
                "visit_boundary": s.visit_boundary,
            })
        })
        .collect();
    let mut doc = Provenance::new(0).with("vocab_hash", vocab.hash()).map();
    doc.insert("sequences".into(), json!(entries));
    io::write_text(&a.out, &serde_json::to_string(&doc)?)?;
    let total: usize = seqs.iter().map(TokenSequence::len).sum();
    eprintln!("{} sequences, {total} tokens", seqs.len());
    Ok(())
}

fn train_cmd(a: TrainArgs, plot_out: bool) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let records = read_cohort(&a.cohort)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let (cfg, ignored) = TrainConfig::parse(&io::read_text(p)?).with_context(|| format!("in {}", p.display()))?;
            for k in ignored {
                eprintln!("note: `{k}` is accepted but has no effect");
            }
            cfg
        }
        None => TrainConfig::desk(),
    };
    cfg.seed = io::resolve_seed(cfg.seed)?;
    let outcome = train(&records, &vocab, &cfg)?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("warning: loss became non-finite at step {step}; the checkpoint holds the best finite state");
    }
    outcome.best.save(&a.out)?;
    let prov = Provenance::for_checkpoint(&outcome.best, cfg.seed);
    if let Some(m) = &a.metrics {
        io::write_text(m, &metrics_csv(&outcome.metrics, &prov.line()))?;
    }
    if plot_out {
        let points: Vec<(f64, f64, f64)> = outcome.metrics.iter().map(|m| (m.step as f64, m.loss.total, 0.0)).collect();
        io::write_text(&io::sibling(&a.out, "svg"), &plot::line_with_band(&points, "Training loss", "step", "loss"))?;
    }
    eprintln!(
        "trained {} participants ({} validation); best validation loss {:.5} at step {}; {}",
        outcome.train_ids.len(),
        outcome.val_ids.len(),
        outcome.best_val_loss,
        outcome.best_step,
        prov.line()
    );
    Ok(())
}

fn eval_ntp(a: EvalNtpArgs, plot_out: bool) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.model.ckpt, a.model.vocab.as_ref())?;
    let records = read_cohort(&a.cohort)?;
    let seqs = sequences(&records, &ckpt.vocab, ckpt.model.config.max_seq_len)?;
    let pred = eval_within_visit(&ckpt.model, &ckpt.vocab, &seqs)?;
    let report = pred.report(&ckpt.vocab);
    io::write_text(&a.report, &report.to_csv(&Provenance::for_checkpoint(&ckpt, ckpt.seed).line()))?;
    if plot_out {
        io::write_text(&io::sibling(&a.report, "svg"), &standardized_scatter(&pred, &ckpt.vocab, "Next-token prediction"))?;
    }
    print_median("model", &report);
    Ok(())
}

/// Predictions against truths, both divided by the modality's training sd.
fn standardized_scatter(pred: &Predictions, vocab: &Vocabulary, title: &str) -> String {
    let points: Vec<(f64, f64)> = pred
        .continuous
        .iter()
        .flat_map(|(&m, pairs)| {
            let sd = vocab.modalities[m].train_sd;
            pairs.iter().map(move |&(p, t)| (t / sd, p / sd))
        })
        .collect();
    plot::scatter(&points, title, "observed (sd units)", "predicted (sd units)")
}

fn print_median(label: &str, report: &MetricReport) {
    match report.median_r() {
        Some(r) => outln!("{label}: median r {r:.4} over {} modalities", report.rows.len()),
        None => outln!("{label}: no modality has a defined correlation"),
    }
}

fn eval_longitudinal_cmd(a: EvalLongitudinalArgs, plot_out: bool) -> Result<()> {
    let kinds: Vec<BaselineKind> = a.baselines.iter().map(|b| b.parse()).collect::<trajlm::Result<_>>()?;
    let ckpt = io::load_checkpoint(&a.model.ckpt, a.model.vocab.as_ref())?;
    let vocab = &ckpt.vocab;
    let bmi = a.bmi_modality.as_deref().map(|m| vocab.modality_id(m)).transpose()?;
    let max_len = ckpt.model.config.max_seq_len;
    let seqs = sequences(&read_cohort(&a.cohort)?, vocab, max_len)?;
    let eval = eval_longitudinal(&ckpt.model, vocab, &seqs, bmi)?;
    let fit_pairs = match &a.baseline_cohort {
        Some(p) => longitudinal_pairs(&sequences(&read_cohort(p)?, vocab, max_len)?, vocab, bmi),
        None => eval.pairs.clone(),
    };

    let mut model_pred = eval.pair_predictions();
    model_pred.ranks = eval.predictions.ranks.clone();
    let model_report = model_pred.report(vocab);
    let mut reports = vec![("model".to_string(), model_report.clone())];
    for kind in kinds {
        let bp = baseline_predict(kind, &fit_pairs, &eval.pairs)?;
        for &m in &bp.skipped {
            eprintln!("warning: {kind:?} baseline skipped `{}` (no training pairs)", vocab.modalities[m].name);
        }
        reports.push((format!("{kind:?}").to_ascii_lowercase(), bp.to_predictions(&eval.pairs).report(vocab)));
    }

    let prov = Provenance::for_checkpoint(&ckpt, ckpt.seed);
    let mut csv = format!("# {}\npredictor,modality,n,r,p,ci_low,ci_high,top1,top5,z_vs_model,p_vs_model\n", prov.line());
    for (name, report) in &reports {
        let body = report.to_csv("");
        for (row, line) in report.rows.iter().zip(body.lines().skip(2)) {
            let cmp = match (name.as_str(), row.pearson, model_report.r_of(&row.modality)) {
                ("model", _, _) | (_, None, _) | (_, _, None) => None,
                (_, Some(b), Some(m)) => fisher_z_compare(m, b.r, row.n).ok(),
            };
            let (z, p) = cmp.map(|(z, p)| (format!("{z:.6}"), format!("{p:.6e}"))).unwrap_or_default();
            csv.push_str(&format!("{name},{line},{z},{p}\n"));
        }
    }
    io::write_text(&a.report, &csv)?;

    for (name, report) in &reports {
        print_median(name, report);
    }
    for (name, report) in reports.iter().skip(1) {
        let compared: Vec<(f64, f64)> = model_report
            .rows
            .iter()
            .filter_map(|row| Some((row.pearson?.r, report.r_of(&row.modality)?)))
            .collect();
        let wins = compared.iter().filter(|(m, b)| m > b).count();
        outln!("model r exceeds {name} in {wins} of {} modalities", compared.len());
        if plot_out && name == "locf" {
            let svg = plot::scatter(&compared.iter().map(|&(m, b)| (b, m)).collect::<Vec<_>>(), "Visit-2 correlation", "LOCF r", "model r");
            io::write_text(&io::sibling(&a.report, "svg"), &svg)?;
        }
    }
    Ok(())
}

fn parse_sex(text: &str) -> Result<Sex> {
    match text.to_ascii_lowercase().as_str() {
        "female" | "f" => Ok(Sex::Female),
        "male" | "m" => Ok(Sex::Male),
        "unknown" | "u" => Ok(Sex::Unknown),
        other => bail!("unknown sex `{other}` (expected female, male or unknown)"),
    }
}

fn probe(a: ProbeArgs, plot_out: bool) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.model.ckpt, a.model.vocab.as_ref())?;
    let vocab = &ckpt.vocab;
    let t = corpus::parse_timestamp(&a.time).with_context(|| format!("--time `{}` is not YYYY-MM-DDTHH:MM", a.time))?;
    let ctx = ProbeContext {
        time: corpus::time_features_at(corpus::to_minutes(&t), false, corpus::DEFAULT_YEAR_BASE)?,
        age: a.age,
        sex: parse_sex(&a.sex)?,
    };
    let (m_in, m_out) = (vocab.modality_id(&a.input)?, vocab.modality_id(&a.output)?);
    let curve = crossmodal_sweep(&ckpt.model, vocab, m_in, m_out, &ctx)?;
    let mut csv = format!("# {}\n{},expected_{}\n", Provenance::for_checkpoint(&ckpt, ckpt.seed).line(), a.input, a.output);
    for (x, y) in &curve {
        csv.push_str(&format!("{x:.10},{y:.10}\n"));
    }
    io::write_text(&a.out, &csv)?;
    if plot_out {
        let points: Vec<(f64, f64, f64)> = curve.iter().map(|&(x, y)| (x, y, 0.0)).collect();
        let svg = plot::line_with_band(&points, &format!("{} given {}", a.output, a.input), &a.input, &a.output);
        io::write_text(&io::sibling(&a.out, "svg"), &svg)?;
    }
    eprintln!("{} probe points", curve.len());
    Ok(())
}

fn simulate(a: SimulateArgs, plot_out: bool) -> Result<()> {
    let spec: InterventionSpec = io::read_json(&a.spec)?;
    let ckpt = io::load_checkpoint(&a.model.ckpt, a.model.vocab.as_ref())?;
    let (model, vocab) = (&ckpt.model, &ckpt.vocab);
    spec.validate(Some(vocab))?;
    let outcome = vocab.modality_id(&a.outcome)?;
    let mut cohort = sequences(&read_cohort(&a.cohort)?, vocab, model.config.max_seq_len)?;
    if let Some(label) = &a.eligibility {
        let rule = EligibilityRule::default_for(label, a.outcome.clone())?;
        let e = filter_eligible(model, vocab, &cohort, &rule, a.horizon)?;
        eprintln!(
            "eligibility: kept {}, missing baseline {}, failed baseline {}, failed prediction {}",
            e.kept.len(),
            e.missing.len(),
            e.failed_baseline,
            e.failed_prediction
        );
        cohort = e.select(&cohort);
    }
    let seed = io::resolve_seed(a.seed)?;
    let options = ArmOptions {
        horizon_months: a.horizon,
        resamples: a.resamples,
        seed,
    };
    let arm = simulate_arms(model, vocab, &cohort, &spec, outcome, options)?;
    let prov = Provenance::for_checkpoint(&ckpt, seed).with("spec_hash", sha_hex(serde_json::to_string(&spec)?.as_bytes()));
    let mut csv = format!(
        "# {}\n# label={} outcome={} n={} horizon_months={} mean_control={:.6} mean_treatment={:.6} mean_delta={:.6} signed_percent={:.4} ci_low={:.4} ci_high={:.4}\nparticipant,control,treatment,delta\n",
        prov.line(),
        arm.label,
        a.outcome,
        arm.ids.len(),
        a.horizon,
        arm.mean_control,
        arm.mean_treatment,
        arm.mean_delta,
        arm.signed_percent,
        arm.ci_low,
        arm.ci_high
    );
    for i in 0..arm.ids.len() {
        csv.push_str(&format!("{},{:.10},{:.10},{:.10}\n", arm.ids[i], arm.control[i], arm.treatment[i], arm.delta[i]));
    }
    io::write_text(&a.out, &csv)?;

    let mut trajectory_points = None;
    if let Some(months) = a.trajectory {
        let points = trajectory(model, vocab, &cohort, &spec, outcome, months)?;
        let mut t = format!("# {}\nmonth,mean_delta,sem,n\n", prov.line());
        for p in &points {
            t.push_str(&format!("{},{:.10},{:.10},{}\n", p.month, p.mean_delta, p.sem, p.n));
        }
        io::write_text(&io::sibling(&a.out, "trajectory.csv"), &t)?;
        trajectory_points = Some(points);
    }
    if plot_out {
        let svg = match &trajectory_points {
            Some(points) => plot::line_with_band(
                &points.iter().map(|p| (p.month as f64, p.mean_delta, p.sem)).collect::<Vec<_>>(),
                &format!("{}: {} change from control", arm.label, a.outcome),
                "month",
                "treatment - control",
            ),
            None => plot::scatter(
                &arm.control.iter().copied().zip(arm.treatment.iter().copied()).collect::<Vec<_>>(),
                &arm.label,
                "control prediction",
                "treatment prediction",
            ),
        };
        io::write_text(&io::sibling(&a.out, "svg"), &svg)?;
    }
    outln!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "label": arm.label,
            "outcome": a.outcome,
            "n": arm.ids.len(),
            "mean_control": arm.mean_control,
            "mean_treatment": arm.mean_treatment,
            "mean_delta": arm.mean_delta,
            "signed_percent": arm.signed_percent,
            "effect_percent": arm.effect_percent,
            "ci_low": arm.ci_low,
            "ci_high": arm.ci_high,
        }))?
    );
    Ok(())
}

fn trial_specs(dir: &PathBuf) -> Result<Vec<TrialSpec>> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => anyhow::anyhow!("missing file: {}", dir.display()),
        _ => anyhow::anyhow!("cannot read {}: {e}", dir.display()),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no trial specs (*.json) in {}", dir.display());
    }
    Ok(paths.iter().map(|p| TrialSpec::load(p)).collect::<trajlm::Result<_>>()?)
}

fn trial_run(a: TrialRunArgs, plot_out: bool) -> Result<()> {
    let specs = trial_specs(&a.trials)?;
    let ckpt = io::load_checkpoint(&a.model.ckpt, a.model.vocab.as_ref())?;
    let seed = io::resolve_seed(a.seed)?;
    let mut rows = Vec::new();
    let mut intervals = Vec::new();
    for spec in &specs {
        let r = run_trial(&ckpt.model, &ckpt.vocab, spec, seed, a.resamples)?;
        eprintln!(
            "{}: predicted {:.2}% [{:.2}, {:.2}], published {:.2}% [{:.2}, {:.2}]",
            r.name, r.predicted, r.ci_low, r.ci_high, r.published.point, r.published.ci_low, r.published.ci_high
        );
        intervals.push((r.ci_low, r.ci_high));
        rows.push(r.concordance_row());
    }
    let report = concordance(&rows);
    io::write_text(&a.out, &report.to_csv(&Provenance::for_checkpoint(&ckpt, seed).line(), &intervals))?;
    if plot_out {
        let forest: Vec<ForestRow> = rows
            .iter()
            .zip(&intervals)
            .map(|(r, &(lo, hi))| ForestRow {
                label: r.label.clone(),
                predicted: (r.predicted, lo, hi),
                published: (r.published.point, r.published.ci_low, r.published.ci_high),
            })
            .collect();
        io::write_text(&io::sibling(&a.out, "svg"), &plot::forest(&forest, "Predicted vs published effects"))?;
    }
    outln!(
        "direction agreement {}/{}; predicted point inside published CI {}/{}",
        report.direction_hits, report.n, report.ci_hits, report.n
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = a.participants {
        cfg.n_participants = n;
    }
    cfg.seed = io::resolve_seed(a.seed)?;
    let (records, truth) = generate(&cfg)?;
    write_cohort(&a.out, &records)?;
    let prov = Provenance::new(cfg.seed).with("config_hash", sha_hex(serde_json::to_string(&cfg)?.as_bytes()));
    let mut doc = serde_json::to_value(&truth)?;
    doc["provenance"] = serde_json::Value::Object(prov.map());
    let truth_path = a.truth.unwrap_or_else(|| io::sibling(&a.out, "truth.json"));
    io::write_text(&truth_path, &serde_json::to_string_pretty(&doc)?)?;
    let defs_path = io::sibling(&a.out, "defs.json");
    io::write_text(&defs_path, &serde_json::to_string_pretty(&cfg.modality_defs())?)?;
    eprintln!(
        "{} participants -> {}; ground truth -> {}; modality definitions -> {}",
        records.len(),
        a.out.display(),
        truth_path.display(),
        defs_path.display()
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let c = &ckpt.model.config;
    outln!("checkpoint  {}", a.ckpt.display());
    outln!("config_hash {}", ckpt.config_hash());
    outln!("vocab_hash  {}", ckpt.vocab.hash());
    outln!("seed        {}", ckpt.seed);
    for (k, v) in &ckpt.meta {
        outln!("meta        {k} = {v}");
    }
    outln!(
        "model       d_model={} layers={} heads={} d_head={} d_ff={} value_extras={} max_seq_len={}",
        c.d_model, c.n_layers, c.n_heads, c.d_head, c.d_ff, c.n_value_extras, c.max_seq_len
    );
    outln!("vocabulary  {} modalities, {} tokens", ckpt.vocab.n_modalities(), ckpt.vocab.total_tokens);
    outln!("");
    outln!("{:<40} {:<16} {:>10}", "parameter", "shape", "count");
    for p in &ckpt.model.params {
        let shape = p.tensor.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        outln!("{:<40} {:<16} {:>10}", p.name, shape, p.tensor.data.len());
    }
    outln!("total parameters: {}", ckpt.model.parameter_count());
    Ok(())
}
