//! Discretization of every modality into one global token space.
//!
//! Continuous modalities are cut into equal-frequency quantile bins fit on
//! training values; categorical modalities enumerate their categories. Each
//! modality owns the contiguous token range `[cum_base, cum_base + K)` and a
//! single padding token sits at `total_tokens`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Upper clamp of the bin-count rule.
pub const MAX_BINS: usize = 129;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Continuous,
    Categorical,
}

impl ModalityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::Continuous => "continuous",
            ModalityKind::Categorical => "categorical",
        }
    }
}

/// A raw measurement: a real value or a category label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Measurement {
    Number(f64),
    Category(String),
}

/// User-facing description of a modality before fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityDef {
    pub name: String,
    pub kind: ModalityKind,
    /// Declared category order (categorical only). Observed categories not
    /// listed here are appended in order of first appearance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Bin-count override (continuous only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

impl ModalityDef {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Continuous,
            categories: Vec::new(),
            bins: None,
        }
    }

    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            bins: None,
        }
    }

    pub fn with_bins(mut self, bins: usize) -> Self {
        self.bins = Some(bins);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    #[serde(skip)]
    pub id: usize,
    pub name: String,
    pub kind: ModalityKind,
    /// `K + 1` boundaries; the outer two are the observed training min/max and
    /// only stand in for the open-ended first and last bins.
    #[serde(serialize_with = "serialize_edges")]
    pub edges: Vec<f64>,
    pub midpoints: Vec<f64>,
    pub categories: Vec<String>,
    pub train_sd: f64,
    pub quantile_ranges: Vec<[f64; 2]>,
    pub cum_base: usize,
}

fn serialize_edges<S: Serializer>(edges: &[f64], serializer: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::{Error as _, SerializeSeq};
    let mut seq = serializer.serialize_seq(Some(edges.len()))?;
    for &e in edges {
        let text = format!("{e:.16e}");
        let raw = serde_json::value::RawValue::from_string(text).map_err(S::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

impl ModalitySpec {
    /// Number of tokens owned by this modality.
    pub fn num_tokens(&self) -> usize {
        match self.kind {
            ModalityKind::Continuous => self.midpoints.len(),
            ModalityKind::Categorical => self.categories.len(),
        }
    }

    pub fn token_range(&self) -> std::ops::Range<usize> {
        self.cum_base..self.cum_base + self.num_tokens()
    }

    pub fn is_continuous(&self) -> bool {
        self.kind == ModalityKind::Continuous
    }

    /// Local bin of a continuous value; out-of-range values clip to the
    /// boundary bins.
    pub fn bin_of(&self, value: f64) -> Result<usize> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                modality: self.name.clone(),
            });
        }
        let k = self.midpoints.len();
        if k <= 1 {
            return Ok(0);
        }
        let interior = &self.edges[1..k];
        Ok(interior.partition_point(|&e| e <= value))
    }

    pub fn category_index(&self, category: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::UnknownCategory {
                modality: self.name.clone(),
                category: category.to_string(),
            })
    }

    fn require(&self, kind: ModalityKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::WrongKind {
                modality: self.name.clone(),
                expected: kind.as_str(),
                actual: self.kind.as_str(),
            })
        }
    }
}

/// Decoded content of a measurement token.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenValue {
    Midpoint(f64),
    Category(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedToken {
    pub modality: usize,
    pub bin: usize,
    pub value: TokenValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub modalities: Vec<ModalitySpec>,
    pub total_tokens: usize,
    pub pad_token: usize,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

/// Sqrt-rule bin count: `clamp(round(sqrt(n) / 4), 2, 129)`, or the override.
/// A zero standard deviation means a single distinct value and yields 1.
pub fn choose_bin_count(n_samples: usize, sd: f64, override_bins: Option<usize>) -> Result<usize> {
    if n_samples < 2 {
        return Err(Error::InsufficientData(format!(
            "bin count needs at least 2 samples, got {n_samples}"
        )));
    }
    if let Some(k) = override_bins {
        return Ok(k.max(1));
    }
    if sd == 0.0 {
        return Ok(1);
    }
    let k = ((n_samples as f64).sqrt() / 4.0).round() as usize;
    Ok(k.clamp(2, MAX_BINS))
}

/// Result of fitting equal-frequency bins to one modality's training values.
#[derive(Clone, Debug, PartialEq)]
pub struct BinFit {
    pub edges: Vec<f64>,
    pub midpoints: Vec<f64>,
    pub quantile_ranges: Vec<[f64; 2]>,
    pub train_sd: f64,
    pub warning: Option<String>,
}

/// Linear interpolation between order statistics with inclusive endpoints.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

pub fn fit_bins(values: &[f64], k: usize) -> Result<BinFit> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no training values".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("training value {bad}")));
    }
    let k = k.max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let min = sorted[0];
    let max = sorted[n - 1];

    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();

    if min == max {
        return Ok(BinFit {
            edges: vec![min, max],
            midpoints: vec![min],
            quantile_ranges: vec![[0.0, 1.0]],
            train_sd: 1.0,
            warning: Some(format!("all {n} training values equal {min}; single degenerate bin")),
        });
    }

    let mut edges = vec![min];
    for i in 1..k {
        let q = quantile_sorted(&sorted, i as f64 / k as f64);
        if q > *edges.last().unwrap() && q < max {
            edges.push(q);
        }
    }
    edges.push(max);
    let effective = edges.len() - 1;
    let warning = (effective < k).then(|| {
        format!("duplicate quantile edges collapsed: {k} bins requested, {effective} kept")
    });

    let midpoints = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();

    let mut bounds = vec![0.0];
    for &e in &edges[1..effective] {
        let below = sorted.partition_point(|&v| v < e);
        bounds.push(below as f64 / n as f64);
    }
    bounds.push(1.0);
    let quantile_ranges = bounds.windows(2).map(|w| [w[0], w[1]]).collect();

    Ok(BinFit {
        edges,
        midpoints,
        quantile_ranges,
        train_sd: sd,
        warning,
    })
}

/// Builds the global vocabulary. Modality order follows `defs`; boundaries are
/// fit only on `training` values.
pub fn build_vocabulary(
    defs: &[ModalityDef],
    training: &BTreeMap<String, Vec<Measurement>>,
) -> Result<Vocabulary> {
    if defs.is_empty() {
        return Err(Error::Config("vocabulary needs at least one modality".into()));
    }
    for (i, d) in defs.iter().enumerate() {
        if defs[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::Config(format!("duplicate modality name `{}`", d.name)));
        }
    }

    let fitted: Vec<(ModalitySpec, Option<String>)> = defs
        .par_iter()
        .map(|def| fit_modality(def, training.get(&def.name).map(Vec::as_slice).unwrap_or(&[])))
        .collect::<Result<_>>()?;

    let mut modalities = Vec::with_capacity(fitted.len());
    let mut warnings = Vec::new();
    let mut base = 0;
    for (id, (mut spec, warning)) in fitted.into_iter().enumerate() {
        spec.id = id;
        spec.cum_base = base;
        base += spec.num_tokens();
        if let Some(w) = warning {
            warnings.push(format!("{}: {w}", spec.name));
        }
        modalities.push(spec);
    }
    Ok(Vocabulary {
        modalities,
        total_tokens: base,
        pad_token: base,
        warnings,
    })
}

fn fit_modality(def: &ModalityDef, values: &[Measurement]) -> Result<(ModalitySpec, Option<String>)> {
    match def.kind {
        ModalityKind::Continuous => {
            let nums: Vec<f64> = values
                .iter()
                .filter_map(|m| match m {
                    Measurement::Number(v) => Some(*v),
                    Measurement::Category(_) => None,
                })
                .collect();
            if nums.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "no training values for continuous modality `{}`",
                    def.name
                )));
            }
            let fit = if nums.len() < 2 {
                fit_bins(&nums, 1)?
            } else {
                let mean = nums.iter().sum::<f64>() / nums.len() as f64;
                let sd = (nums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nums.len() as f64).sqrt();
                let mut k = choose_bin_count(nums.len(), sd, def.bins)?;
                let mut sorted = nums.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                sorted.dedup();
                k = k.min(sorted.len());
                fit_bins(&nums, k)?
            };
            let spec = ModalitySpec {
                id: 0,
                name: def.name.clone(),
                kind: ModalityKind::Continuous,
                edges: fit.edges,
                midpoints: fit.midpoints,
                categories: Vec::new(),
                train_sd: fit.train_sd,
                quantile_ranges: fit.quantile_ranges,
                cum_base: 0,
            };
            Ok((spec, fit.warning))
        }
        ModalityKind::Categorical => {
            let mut categories = def.categories.clone();
            for m in values {
                let label = match m {
                    Measurement::Category(c) => c.clone(),
                    Measurement::Number(v) => format_number_category(*v),
                };
                if !categories.contains(&label) {
                    categories.push(label);
                }
            }
            if categories.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "categorical modality `{}` has no categories",
                    def.name
                )));
            }
            let spec = ModalitySpec {
                id: 0,
                name: def.name.clone(),
                kind: ModalityKind::Categorical,
                edges: Vec::new(),
                midpoints: Vec::new(),
                categories,
                train_sd: 1.0,
                quantile_ranges: Vec::new(),
                cum_base: 0,
            };
            Ok((spec, None))
        }
    }
}

/// Integral numbers recorded for a categorical modality are read as labels.
fn format_number_category(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl Vocabulary {
    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Modality index used for padding and unfilled query slots.
    pub fn pad_modality(&self) -> usize {
        self.modalities.len()
    }

    /// Rows of the token embedding table (measurement tokens plus pad).
    pub fn vocab_size_with_pad(&self) -> usize {
        self.total_tokens + 1
    }

    pub fn modality(&self, id: usize) -> Result<&ModalitySpec> {
        self.modalities.get(id).ok_or(Error::ModalityOutOfRange(id))
    }

    pub fn modality_id(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn encode_value(&self, modality: usize, value: &Measurement) -> Result<usize> {
        let spec = self.modality(modality)?;
        match (spec.kind, value) {
            (ModalityKind::Continuous, Measurement::Number(v)) => Ok(spec.cum_base + spec.bin_of(*v)?),
            (ModalityKind::Categorical, Measurement::Category(c)) => Ok(spec.cum_base + spec.category_index(c)?),
            (ModalityKind::Categorical, Measurement::Number(v)) => {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        modality: spec.name.clone(),
                    });
                }
                Ok(spec.cum_base + spec.category_index(&format_number_category(*v))?)
            }
            (ModalityKind::Continuous, Measurement::Category(c)) => Err(Error::UnknownCategory {
                modality: spec.name.clone(),
                category: c.clone(),
            }),
        }
    }

    pub fn encode_number(&self, modality: usize, value: f64) -> Result<usize> {
        let spec = self.modality(modality)?;
        spec.require(ModalityKind::Continuous)?;
        Ok(spec.cum_base + spec.bin_of(value)?)
    }

    pub fn encode_category(&self, modality: usize, category: &str) -> Result<usize> {
        let spec = self.modality(modality)?;
        spec.require(ModalityKind::Categorical)?;
        Ok(spec.cum_base + spec.category_index(category)?)
    }

    /// Owning modality of a token, found by binary search over `cum_base`.
    pub fn modality_of_token(&self, token: usize) -> Result<usize> {
        if token >= self.total_tokens {
            return Err(Error::NonMeasurementToken(token));
        }
        let idx = self.modalities.partition_point(|m| m.cum_base <= token);
        // Skip back over empty ranges so the owner really contains the token.
        let mut m = idx - 1;
        while self.modalities[m].num_tokens() == 0 {
            m -= 1;
        }
        Ok(m)
    }

    pub fn decode_token(&self, token: usize) -> Result<DecodedToken> {
        let m = self.modality_of_token(token)?;
        let spec = &self.modalities[m];
        let bin = token - spec.cum_base;
        let value = match spec.kind {
            ModalityKind::Continuous => TokenValue::Midpoint(spec.midpoints[bin]),
            ModalityKind::Categorical => TokenValue::Category(spec.categories[bin].clone()),
        };
        Ok(DecodedToken { modality: m, bin, value })
    }

    /// Maps external-cohort values into this vocabulary by rank: each value's
    /// midrank empirical CDF within `external` selects the training bin whose
    /// quantile range contains it.
    pub fn quantile_match(&self, modality: usize, external: &[f64]) -> Result<Vec<usize>> {
        let spec = self.modality(modality)?;
        spec.require(ModalityKind::Continuous)?;
        if external.is_empty() {
            return Err(Error::InsufficientData("quantile matching needs external values".into()));
        }
        if external.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                modality: spec.name.clone(),
            });
        }
        let mut sorted = external.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len() as f64;
        let k = spec.quantile_ranges.len();
        Ok(external
            .iter()
            .map(|&x| {
                let below = sorted.partition_point(|&v| v < x);
                let not_above = sorted.partition_point(|&v| v <= x);
                let q = (below as f64 + 0.5 * (not_above - below) as f64) / n;
                let bin = spec.quantile_ranges.partition_point(|r| r[1] <= q).min(k - 1);
                spec.cum_base + bin
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing vocabulary", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut vocab: Vocabulary = serde_json::from_str(text).map_err(|e| Error::json("parsing vocabulary", e))?;
        for (i, m) in vocab.modalities.iter_mut().enumerate() {
            m.id = i;
        }
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        let mut base = 0;
        for m in &self.modalities {
            if m.cum_base != base {
                return Err(Error::Config(format!(
                    "modality `{}` has cum_base {} but expected {base}",
                    m.name, m.cum_base
                )));
            }
            if m.is_continuous() && (m.edges.len() != m.midpoints.len() + 1 || m.quantile_ranges.len() != m.midpoints.len()) {
                return Err(Error::Config(format!("modality `{}` has inconsistent bin arrays", m.name)));
            }
            base += m.num_tokens();
        }
        if base != self.total_tokens || self.pad_token != self.total_tokens {
            return Err(Error::Config("token totals do not match modality ranges".into()));
        }
        Ok(())
    }
}
