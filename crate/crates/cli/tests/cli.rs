use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_CONFIG: &str = "\
n_embd = 16
n_layers = 1
n_heads = 2
head_dim = 8
continuous_pe_base_dim = 8
max_seq_length = 512
dropout = 0.0
epochs = 1
max_steps = 4
batch_size = 4
warmup_steps = 1
";

const DOSE_SPEC: &str =
    r#"{"label": "med", "type": "categorical_append", "modality": "medication", "category": 1, "frequency": 1, "duration": 12}"#;

const TRIAL_SPEC: &str = r#"{
  "name": "med-target",
  "n": 40,
  "table1": [
    {"modality": "age", "mean": 50, "sd": 10, "low": 30, "high": 70},
    {"modality": "target", "mean": 150, "sd": 20, "low": 100, "high": 200},
    {"modality": "x", "mean": 10, "sd": 1, "low": 7, "high": 13}
  ],
  "arms": [{"label": "med", "type": "categorical_append", "modality": "medication", "category": 1, "frequency": 1, "duration": 12}],
  "outcome": "target",
  "horizon_months": 12,
  "published": {"point": -20, "ci_low": -25, "ci_high": -15}
}"#;

fn trajlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajlm"))
        .args(args)
        .env_remove("TRAJLM_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = trajlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = trajlm(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Synthetic cohort, vocabulary and a tiny trained checkpoint.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let d = dir.path();
        ok(&["synth", "--seed", "3", "--participants", "40", "--out", &p(d, "c.jsonl")]);
        ok(&["build-vocab", "--cohort", &p(d, "c.jsonl"), "--defs", &p(d, "c.defs.json"), "--out", &p(d, "v.json")]);
        std::fs::write(d.join("tiny.cfg"), TINY_CONFIG).unwrap();
        ok(&[
            "train",
            "--cohort",
            &p(d, "c.jsonl"),
            "--vocab",
            &p(d, "v.json"),
            "--config",
            &p(d, "tiny.cfg"),
            "--out",
            &p(d, "m.ckpt"),
            "--metrics",
            &p(d, "metrics.csv"),
        ]);
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        p(self.dir.path(), name)
    }
}

fn provenance_line(path: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap().to_string();
    assert!(first.starts_with("# seed="), "{path}: {first}");
    assert!(first.contains("config_hash=") && first.contains("version="), "{path}: {first}");
    first
}

#[test]
fn synth_is_deterministic_and_honours_the_seed_override() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "7", "--participants", "25", "--out", &p(d, "a.jsonl")]);
    ok(&["synth", "--seed", "7", "--participants", "25", "--out", &p(d, "b.jsonl")]);
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert!(std::fs::read_to_string(d.join("a.truth.json")).unwrap().contains("\"provenance\""));

    let out = Command::new(env!("CARGO_BIN_EXE_trajlm"))
        .args(["synth", "--seed", "1", "--participants", "25", "--out", &p(d, "env.jsonl")])
        .env("TRAJLM_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(a, std::fs::read(d.join("env.jsonl")).unwrap());
}

#[test]
fn pipeline_produces_reports_with_provenance() {
    let f = Fixture::new();
    provenance_line(&f.path("metrics.csv"));

    let manifest = ok(&["inspect-checkpoint", "--ckpt", &f.path("m.ckpt")]);
    assert!(manifest.contains("tok_embedding"));
    let total: usize = manifest
        .lines()
        .find_map(|l| l.strip_prefix("total parameters: "))
        .unwrap()
        .parse()
        .unwrap();
    let summed: usize = manifest
        .lines()
        .skip_while(|l| !l.starts_with("parameter "))
        .skip(1)
        .take_while(|l| !l.starts_with("total"))
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, summed);

    let stdout = ok(&["eval-ntp", "--ckpt", &f.path("m.ckpt"), "--cohort", &f.path("c.jsonl"), "--report", &f.path("ntp.csv")]);
    assert!(stdout.contains("median r"));
    provenance_line(&f.path("ntp.csv"));

    ok(&[
        "--plot",
        "eval-longitudinal",
        "--ckpt",
        &f.path("m.ckpt"),
        "--vocab",
        &f.path("v.json"),
        "--cohort",
        &f.path("c.jsonl"),
        "--baselines",
        "locf,linear",
        "--report",
        &f.path("long.csv"),
    ]);
    provenance_line(&f.path("long.csv"));
    let long = std::fs::read_to_string(f.path("long.csv")).unwrap();
    for predictor in ["model,", "locf,", "linear,"] {
        assert!(long.lines().any(|l| l.starts_with(predictor)), "missing {predictor} rows");
    }
    assert!(Path::new(&f.path("long.svg")).exists());

    ok(&["probe-crossmodal", "--ckpt", &f.path("m.ckpt"), "--input", "x", "--output", "y", "--out", &f.path("probe.csv")]);
    let probe = std::fs::read_to_string(f.path("probe.csv")).unwrap();
    assert!(probe.lines().nth(1).unwrap() == "x,expected_y");

    std::fs::write(f.path("dose.json"), DOSE_SPEC).unwrap();
    let summary = ok(&[
        "--workers",
        "2",
        "simulate",
        "--ckpt",
        &f.path("m.ckpt"),
        "--cohort",
        &f.path("c.jsonl"),
        "--spec",
        &f.path("dose.json"),
        "--outcome",
        "target",
        "--resamples",
        "50",
        "--trajectory",
        "2",
        "--out",
        &f.path("sim.csv"),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["n"], 40);
    provenance_line(&f.path("sim.csv"));
    assert_eq!(std::fs::read_to_string(f.path("sim.trajectory.csv")).unwrap().lines().count(), 4);

    let trials = f.dir.path().join("trials");
    std::fs::create_dir(&trials).unwrap();
    std::fs::write(trials.join("one.json"), TRIAL_SPEC).unwrap();
    let stdout = ok(&[
        "--plot",
        "trial-run",
        "--ckpt",
        &f.path("m.ckpt"),
        "--trials",
        trials.to_str().unwrap(),
        "--resamples",
        "50",
        "--out",
        &f.path("forest.csv"),
    ]);
    assert!(stdout.contains("/1"));
    provenance_line(&f.path("forest.csv"));
    assert!(std::fs::read_to_string(f.path("forest.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let f = Fixture::new();
    let again = f.path("again.ckpt");
    ok(&[
        "train",
        "--cohort",
        &f.path("c.jsonl"),
        "--vocab",
        &f.path("v.json"),
        "--config",
        &f.path("tiny.cfg"),
        "--out",
        &again,
    ]);
    assert_eq!(std::fs::read(f.path("m.ckpt")).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn errors_are_distinct_and_exit_nonzero() {
    let f = Fixture::new();
    let missing = fails(&["eval-ntp", "--ckpt", &f.path("m.ckpt"), "--cohort", &f.path("absent.jsonl"), "--report", &f.path("r.csv")]);
    assert!(missing.contains("missing file"), "{missing}");

    std::fs::write(f.path("bad.json"), "{not json").unwrap();
    let malformed = fails(&[
        "simulate",
        "--ckpt",
        &f.path("m.ckpt"),
        "--cohort",
        &f.path("c.jsonl"),
        "--spec",
        &f.path("bad.json"),
        "--outcome",
        "target",
        "--out",
        &f.path("s.csv"),
    ]);
    assert!(malformed.contains("malformed JSON"), "{malformed}");

    std::fs::write(f.path("bad.jsonl"), "{\"id\": 3\n").unwrap();
    let bad_cohort = fails(&["build-vocab", "--cohort", &f.path("bad.jsonl"), "--out", &f.path("v2.json")]);
    assert!(bad_cohort.contains("malformed JSON"), "{bad_cohort}");

    ok(&["synth", "--seed", "9", "--participants", "30", "--out", &f.path("o.jsonl")]);
    ok(&["build-vocab", "--cohort", &f.path("o.jsonl"), "--bins", "4", "--out", &f.path("other.json")]);
    let mismatch = fails(&[
        "eval-ntp",
        "--ckpt",
        &f.path("m.ckpt"),
        "--vocab",
        &f.path("other.json"),
        "--cohort",
        &f.path("c.jsonl"),
        "--report",
        &f.path("r.csv"),
    ]);
    assert!(mismatch.contains("vocabulary mismatch"), "{mismatch}");
    assert!(!PathBuf::from(f.path("r.csv")).exists());

    let texts = [&missing, &malformed, &mismatch];
    for (i, a) in texts.iter().enumerate() {
        for b in &texts[i + 1..] {
            assert_ne!(a.lines().next(), b.lines().next());
        }
    }
}

#[test]
fn untrained_checkpoint_still_produces_a_report() {
    let f = Fixture::new();
    std::fs::write(f.path("zero.cfg"), TINY_CONFIG.replace("max_steps = 4", "max_steps = 1")).unwrap();
    ok(&[
        "train",
        "--cohort",
        &f.path("c.jsonl"),
        "--vocab",
        &f.path("v.json"),
        "--config",
        &f.path("zero.cfg"),
        "--out",
        &f.path("z.ckpt"),
    ]);
    ok(&["eval-ntp", "--ckpt", &f.path("z.ckpt"), "--cohort", &f.path("c.jsonl"), "--report", &f.path("z.csv")]);
    let report = std::fs::read_to_string(f.path("z.csv")).unwrap();
    assert!(report.lines().count() > 3);
}
