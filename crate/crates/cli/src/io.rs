//! File helpers, provenance and error wording.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};
use trajlm::{Checkpoint, Error, Vocabulary};

/// `println!` that exits quietly when stdout is a closed pipe.
#[macro_export]
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

pub const SEED_ENV: &str = "TRAJLM_SEED";

/// `TRAJLM_SEED` when set, otherwise `fallback`.
pub fn resolve_seed(fallback: u64) -> anyhow::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{v}`")),
        Err(_) => Ok(fallback),
    }
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| anyhow!("malformed JSON in {}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    if e.kind() == ErrorKind::NotFound {
        anyhow!("missing file: {}", path.display())
    } else {
        anyhow!("cannot read {}: {e}", path.display())
    }
}

/// User-facing message: missing files, malformed JSON and vocabulary
/// mismatches each get their own wording.
pub fn describe(err: &anyhow::Error) -> String {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { path, source }) if source.kind() == ErrorKind::NotFound => {
            format!("missing file: {}", path.display())
        }
        Some(Error::Json { context, source }) => format!("malformed JSON ({context}): {source}"),
        Some(Error::Checkpoint(msg)) if msg.contains("vocabulary hash mismatch") => format!("vocabulary mismatch: {msg}"),
        _ => format!("{err:#}"),
    }
}

/// Loads a checkpoint, checking it against `vocab` when one is given.
pub fn load_checkpoint(ckpt: &Path, vocab: Option<&PathBuf>) -> anyhow::Result<Checkpoint> {
    match vocab {
        Some(v) => {
            let vocab = Vocabulary::load(v)?;
            Ok(Checkpoint::load_with_vocab(ckpt, &vocab)?)
        }
        None => Ok(Checkpoint::load(ckpt)?),
    }
}

/// Seed, configuration hashes and library version for output headers.
pub struct Provenance {
    fields: Vec<(&'static str, String)>,
}

impl Provenance {
    pub fn new(seed: u64) -> Self {
        Self {
            fields: vec![("seed", seed.to_string()), ("version", trajlm::VERSION.to_string())],
        }
    }

    pub fn for_checkpoint(ckpt: &Checkpoint, seed: u64) -> Self {
        let mut p = Self::new(seed)
            .with("config_hash", ckpt.config_hash())
            .with("vocab_hash", ckpt.vocab.hash());
        if let Some(h) = ckpt.meta.get("train_config_hash") {
            p = p.with("train_config_hash", h.clone());
        }
        p
    }

    pub fn with(mut self, key: &'static str, value: impl Into<String>) -> Self {
        self.fields.push((key, value.into()));
        self
    }

    /// `key=value` pairs separated by spaces.
    pub fn line(&self) -> String {
        self.fields.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    pub fn map(&self) -> Map<String, Value> {
        self.fields.iter().map(|(k, v)| (k.to_string(), json!(v))).collect()
    }
}

/// `path` with its extension replaced by `ext`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}
