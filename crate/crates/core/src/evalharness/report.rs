use serde::{Deserialize, Serialize};

use super::stats::{median, pearson_with_ci, PearsonResult};
use super::Predictions;
use crate::error::{Error, Result};
use crate::vocab::{ModalityKind, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub modality: String,
    pub kind: ModalityKind,
    pub n: usize,
    /// Present for continuous modalities with `n >= 4` and non-constant
    /// predictions and truths.
    pub pearson: Option<PearsonResult>,
    pub top1: Option<f64>,
    /// Present for categorical modalities with at least five categories.
    pub top5: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ModalityMetrics>,
}

impl MetricReport {
    pub fn from_predictions(pred: &Predictions, vocab: &Vocabulary) -> Self {
        let mut rows = Vec::new();
        for (&m, pairs) in &pred.continuous {
            if pairs.len() < 2 {
                continue;
            }
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            rows.push(ModalityMetrics {
                modality: vocab.modalities[m].name.clone(),
                kind: ModalityKind::Continuous,
                n: pairs.len(),
                pearson: pearson_with_ci(&x, &y).ok(),
                top1: None,
                top5: None,
            });
        }
        for (&m, ranks) in &pred.ranks {
            if ranks.is_empty() {
                continue;
            }
            let n = ranks.len() as f64;
            let acc = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n;
            rows.push(ModalityMetrics {
                modality: vocab.modalities[m].name.clone(),
                kind: ModalityKind::Categorical,
                n: ranks.len(),
                pearson: None,
                top1: Some(acc(1)),
                top5: (vocab.modalities[m].num_tokens() >= 5).then(|| acc(5)),
            });
        }
        rows.sort_by(|a, b| a.modality.cmp(&b.modality));
        Self { rows }
    }

    pub fn get(&self, modality: &str) -> Option<&ModalityMetrics> {
        self.rows.iter().find(|r| r.modality == modality)
    }

    pub fn r_of(&self, modality: &str) -> Option<f64> {
        self.get(modality).and_then(|r| r.pearson).map(|p| p.r)
    }

    /// Median Pearson r over continuous modalities with a defined r.
    pub fn median_r(&self) -> Option<f64> {
        median(&self.rows.iter().filter_map(|r| r.pearson.map(|p| p.r)).collect::<Vec<_>>())
    }

    /// Unweighted mean Pearson r over the named modalities that have one.
    pub fn mean_r(&self, modalities: &[&str]) -> Option<f64> {
        let rs: Vec<f64> = modalities.iter().filter_map(|m| self.r_of(m)).collect();
        (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
    }

    /// CSV with header `modality,n,r,p,ci_low,ci_high,top1,top5`, preceded by
    /// one `#` provenance line.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = format!("# {provenance}\nmodality,n,r,p,ci_low,ci_high,top1,top5\n");
        let f = |v: Option<f64>| v.map(|v| format!("{v:.10}")).unwrap_or_default();
        for r in &self.rows {
            let p = r.pearson;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.modality,
                r.n,
                f(p.map(|p| p.r)),
                p.map(|p| format!("{:.6e}", p.p)).unwrap_or_default(),
                f(p.map(|p| p.ci_low)),
                f(p.map(|p| p.ci_high)),
                f(r.top1),
                f(r.top5)
            ));
        }
        out
    }

    /// JSON summary with provenance fields merged at the top level.
    pub fn to_json(&self, provenance: &serde_json::Map<String, serde_json::Value>) -> Result<String> {
        let mut doc = provenance.clone();
        doc.insert("median_r".into(), serde_json::json!(self.median_r()));
        doc.insert(
            "modalities".into(),
            serde_json::to_value(&self.rows).map_err(|e| Error::json("serializing metric report", e))?,
        );
        serde_json::to_string_pretty(&doc).map_err(|e| Error::json("serializing metric report", e))
    }
}
