use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{MAX_SEQ_LEN, TEMPORAL_VOCAB_SIZES};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_value_extras: usize,
    pub dropout: f64,
    pub logit_clamp: f64,
    pub cont_pe_dim: usize,
    /// Measurement tokens; the embedding table has one extra pad row.
    pub vocab_size: usize,
    pub n_modalities: usize,
    pub temporal_vocab_sizes: [usize; 7],
    pub max_seq_len: usize,
    pub age_center: f64,
    pub age_scale: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab: &Vocabulary, d_model: usize, n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_head,
            d_ff: 4 * d_model,
            n_value_extras: 2,
            dropout: 0.2,
            logit_clamp: 50.0,
            cont_pe_dim: 512,
            vocab_size: vocab.total_tokens,
            n_modalities: vocab.n_modalities(),
            temporal_vocab_sizes: TEMPORAL_VOCAB_SIZES,
            max_seq_len: MAX_SEQ_LEN,
            age_center: 50.0,
            age_scale: 15.0,
            init_std: 0.02,
        }
    }

    /// Published large configuration: 14 layers of width 768, 2 heads of 64.
    pub fn paper_xl(vocab: &Vocabulary) -> Self {
        Self::new(vocab, 768, 14, 2, 64)
    }

    /// Single-CPU configuration used by the acceptance runs.
    pub fn desk(vocab: &Vocabulary) -> Self {
        Self {
            cont_pe_dim: 64,
            dropout: 0.0,
            max_seq_len: 512,
            ..Self::new(vocab, 64, 2, 2, 32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("cont_pe_dim", self.cont_pe_dim),
            ("vocab_size", self.vocab_size),
            ("n_modalities", self.n_modalities),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_ff != 4 * self.d_model {
            return Err(Error::Config(format!(
                "d_ff = {} but must equal 4 * d_model = {}",
                self.d_ff,
                4 * self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.logit_clamp > 0.0 && self.age_scale > 0.0 && self.init_std > 0.0) {
            return Err(Error::Config("logit_clamp, age_scale and init_std must be positive".into()));
        }
        if self.temporal_vocab_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("temporal vocabulary sizes must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn matches_vocab(&self, vocab: &Vocabulary) -> bool {
        self.vocab_size == vocab.total_tokens && self.n_modalities == vocab.n_modalities()
    }
}
