//! Decoder-only transformer with additive multimodal embeddings, gated value
//! extras, post-stack query injection and a tanh-clamped output head.

mod checkpoint;
mod config;
mod mask;

use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use mask::{build_mask, parallel_probe_row, MaskKind};

use crate::corpus::{Sex, TimeVec, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{sinusoid_into, AttentionMask, Tape, Tensor, Var};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    extras: Vec<usize>,
    gates: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok: usize,
    cont: usize,
    modality: usize,
    time: [usize; 7],
    age: usize,
    sex: usize,
    layers: Vec<LayerIdx>,
    query_mod: MlpIdx,
    query_time: MlpIdx,
    out_w: usize,
    out_b: usize,
}

fn param_specs(c: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let d = c.d_model;
    let width = c.n_heads * c.d_head;
    let tok = add("tok_embedding".into(), vec![c.vocab_size + 1, d], Init::Normal);
    let cont = add("cont_proj".into(), vec![c.cont_pe_dim, d], Init::Normal);
    let modality = add("mod_embedding".into(), vec![c.n_modalities + 1, d], Init::Normal);
    let mut time = [0; 7];
    for (i, size) in c.temporal_vocab_sizes.iter().enumerate() {
        time[i] = add(format!("time_embedding.{i}"), vec![*size, d], Init::Normal);
    }
    let age = add("age_proj".into(), vec![c.cont_pe_dim, d], Init::Normal);
    let sex = add("sex_embedding".into(), vec![3, d], Init::Normal);
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let p = format!("layers.{l}");
        let ln1_g = add(format!("{p}.ln1.gain"), vec![d], Init::Ones);
        let ln1_b = add(format!("{p}.ln1.bias"), vec![d], Init::Zeros);
        let wq = add(format!("{p}.attn.w_q"), vec![d, width], Init::Normal);
        let wk = add(format!("{p}.attn.w_k"), vec![d, width], Init::Normal);
        let wv = add(format!("{p}.attn.w_v"), vec![d, width], Init::Normal);
        let extras = (0..c.n_value_extras)
            .map(|e| add(format!("{p}.attn.v_extra.{e}"), vec![d, width], Init::Normal))
            .collect();
        let gates = add(format!("{p}.attn.gates"), vec![c.n_heads, c.n_value_extras], Init::Zeros);
        let wo = add(format!("{p}.attn.w_o"), vec![width, d], Init::Normal);
        let ln2_g = add(format!("{p}.ln2.gain"), vec![d], Init::Ones);
        let ln2_b = add(format!("{p}.ln2.bias"), vec![d], Init::Zeros);
        let w1 = add(format!("{p}.ffn.w1"), vec![d, c.d_ff], Init::Normal);
        let b1 = add(format!("{p}.ffn.b1"), vec![c.d_ff], Init::Zeros);
        let w2 = add(format!("{p}.ffn.w2"), vec![c.d_ff, d], Init::Normal);
        let b2 = add(format!("{p}.ffn.b2"), vec![d], Init::Zeros);
        layers.push(LayerIdx {
            ln1_g,
            ln1_b,
            wq,
            wk,
            wv,
            extras,
            gates,
            wo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let mut mlp = |prefix: &str| MlpIdx {
        w1: add(format!("{prefix}.w1"), vec![d, d], Init::Normal),
        b1: add(format!("{prefix}.b1"), vec![d], Init::Zeros),
        w2: add(format!("{prefix}.w2"), vec![d, d], Init::Zeros),
        b2: add(format!("{prefix}.b2"), vec![d], Init::Zeros),
    };
    let query_mod = mlp("query_mod");
    let query_time = mlp("query_time");
    let out_w = add("out.weight".into(), vec![c.vocab_size, d], Init::Normal);
    let out_b = add("out.bias".into(), vec![c.vocab_size], Init::Zeros);
    let layout = Layout {
        tok,
        cont,
        modality,
        time,
        age,
        sex,
        layers,
        query_mod,
        query_time,
        out_w,
        out_b,
    };
    (specs, layout)
}

/// One forward-pass input. All per-position streams have the same length;
/// `query_*` give the modality and time being predicted at each position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    /// Continuous values divided by their modality's training sd; 0 for
    /// categorical and pad positions.
    pub value_z: Vec<f64>,
    pub modalities: Vec<usize>,
    pub times: Vec<TimeVec>,
    pub positions: Vec<usize>,
    pub query_modalities: Vec<usize>,
    pub query_times: Vec<TimeVec>,
    pub age: f64,
    pub sex: Sex,
}

impl ModelInput {
    /// Input whose queries are the next position's modality and time.
    pub fn from_sequence(seq: &TokenSequence, vocab: &Vocabulary) -> Self {
        let t = seq.len();
        let value_z = (0..t)
            .map(|i| {
                let spec = &vocab.modalities[seq.modalities[i]];
                if spec.is_continuous() {
                    seq.values[i] / spec.train_sd
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            tokens: seq.tokens.clone(),
            value_z,
            modalities: seq.modalities[..t].to_vec(),
            times: seq.times[..t].to_vec(),
            positions: (0..t).collect(),
            query_modalities: seq.modalities[1..].to_vec(),
            query_times: seq.times[1..].to_vec(),
            age: seq.age,
            sex: seq.sex,
        }
    }

    /// Same as [`from_sequence`](Self::from_sequence) but the last position
    /// queries `modality` at `time`.
    pub fn with_final_query(seq: &TokenSequence, vocab: &Vocabulary, modality: usize, time: TimeVec) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::InsufficientData(format!(
                "participant `{}` has no context tokens",
                seq.participant
            )));
        }
        let mut input = Self::from_sequence(seq, vocab);
        let last = input.len() - 1;
        input.query_modalities[last] = modality;
        input.query_times[last] = time;
        Ok(input)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self, c: &ModelConfig) -> Result<()> {
        let n = self.tokens.len();
        let lens = [
            self.value_z.len(),
            self.modalities.len(),
            self.times.len(),
            self.positions.len(),
            self.query_modalities.len(),
            self.query_times.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::ShapeMismatch {
                op: "model input streams",
                left: vec![n],
                right: lens.to_vec(),
            });
        }
        if n == 0 {
            return Err(Error::InsufficientData("empty model input".into()));
        }
        if n > c.max_seq_len {
            return Err(Error::InvalidArgument(format!("sequence length {n} exceeds max_seq_len {}", c.max_seq_len)));
        }
        if let Some(v) = self.value_z.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("input value {v}")));
        }
        if !self.age.is_finite() {
            return Err(Error::NonFiniteValue("age".into()));
        }
        Ok(())
    }
}

/// Layout of a parallel visit-2 probe built by [`parallel_input`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelInput {
    pub input: ModelInput,
    pub mask: MaskKind,
    /// Row holding each target's prediction.
    pub probe_rows: Vec<usize>,
}

/// Builds the `[V.., F_1, P_1, ..]` input: each filler/probe pair repeats the
/// last context position (same position id) and the probe queries its target.
pub fn parallel_input(context: &ModelInput, targets: &[(usize, TimeVec)]) -> Result<ParallelInput> {
    let n = context.len();
    if n == 0 {
        return Err(Error::InsufficientData("parallel probe needs at least one context token".into()));
    }
    let mut input = context.clone();
    let last = n - 1;
    let mut probe_rows = Vec::with_capacity(targets.len());
    for (i, &(modality, time)) in targets.iter().enumerate() {
        for is_probe in [false, true] {
            input.tokens.push(context.tokens[last]);
            input.value_z.push(context.value_z[last]);
            input.modalities.push(context.modalities[last]);
            input.times.push(context.times[last]);
            input.positions.push(context.positions[last]);
            if is_probe {
                input.query_modalities.push(modality);
                input.query_times.push(time);
            } else {
                input.query_modalities.push(context.query_modalities[last]);
                input.query_times.push(context.query_times[last]);
            }
        }
        probe_rows.push(parallel_probe_row(n, i));
    }
    Ok(ParallelInput {
        input,
        mask: MaskKind::ParallelV2 {
            n_ctx: n,
            n_targets: targets.len(),
        },
        probe_rows,
    })
}

pub struct ForwardOutput<'t> {
    /// Final-layer hidden states before query injection, `[T, d_model]`.
    pub hidden: Var<'t>,
    /// Clamped logits over measurement tokens, `[T, vocab_size]`.
    pub logits: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let tensor = match init {
                    Init::Normal => Tensor::from_fn(&shape, |_| normal.sample(&mut rng)),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::from_fn(&shape, |_| 1.0),
                };
                Param { name, tensor }
            })
            .collect();
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this config, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || *shape != p.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name, p.tensor.shape
                )));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameter count implied by a configuration, without allocating.
    pub fn count_for(config: &ModelConfig) -> usize {
        param_specs(config).0.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Places every parameter on the tape, trainable or constant.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.tensor.clone()) } else { tape.constant(p.tensor.clone()) })
            .collect()
    }

    /// Full forward pass. `dropout_rng` enables dropout at the configured rate.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        input: &ModelInput,
        mask: Rc<AttentionMask>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput<'t>> {
        let c = &self.config;
        let l = &self.layout;
        input.validate(c)?;
        let n = input.len();
        if mask.n != n {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                left: vec![mask.n, mask.n],
                right: vec![n, n],
            });
        }
        let mut h = self.embed_inputs(tape, vars, input)?;

        for layer in &l.layers {
            let x = h.layer_norm(vars[layer.ln1_g], vars[layer.ln1_b])?;
            let q = x.matmul(vars[layer.wq])?;
            let k = x.matmul(vars[layer.wk])?;
            let v = x.matmul(vars[layer.wv])?;
            let extras = layer.extras.iter().map(|&e| x.matmul(vars[e])).collect::<Result<Vec<_>>>()?;
            let v = if extras.is_empty() { v } else { v.gated_values(&extras, vars[layer.gates], c.n_heads, c.d_head)? };
            let a = q.attention(k, v, c.n_heads, c.d_head, mask.clone())?.matmul(vars[layer.wo])?;
            h = h.add(dropout(tape, a, c.dropout, &mut dropout_rng)?)?;

            let x = h.layer_norm(vars[layer.ln2_g], vars[layer.ln2_b])?;
            let f = x.matmul(vars[layer.w1])?.add_row(vars[layer.b1])?.gelu();
            let f = f.matmul(vars[layer.w2])?.add_row(vars[layer.b2])?;
            h = h.add(dropout(tape, f, c.dropout, &mut dropout_rng)?)?;
        }
        let hidden = h;

        let qm = vars[l.modality].gather(&input.query_modalities, "query modality")?;
        let qt = self.time_embedding(vars, &input.query_times)?;
        let injected = hidden.add(mlp(vars, l.query_mod, qm)?)?.add(mlp(vars, l.query_time, qt)?)?;
        let logits = injected.matmul_nt(vars[l.out_w])?.add_row(vars[l.out_b])?.tanh_clamp(c.logit_clamp);
        Ok(ForwardOutput { hidden, logits })
    }

    /// Sum of token, value, modality, time, position and age/sex embeddings,
    /// `[T, d_model]`.
    pub fn embed_inputs<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], input: &ModelInput) -> Result<Var<'t>> {
        let c = &self.config;
        let l = &self.layout;
        input.validate(c)?;
        let n = input.len();
        let d = c.d_model;
        let mut h = vars[l.tok].gather(&input.tokens, "token embedding")?;

        let mut enc = vec![0.0; n * c.cont_pe_dim];
        for (i, z) in input.value_z.iter().enumerate() {
            sinusoid_into(*z, &mut enc[i * c.cont_pe_dim..(i + 1) * c.cont_pe_dim]);
        }
        let enc = tape.constant(Tensor::new(vec![n, c.cont_pe_dim], enc)?);
        h = h.add(enc.matmul(vars[l.cont])?)?;

        h = h.add(vars[l.modality].gather(&input.modalities, "modality embedding")?)?;
        h = h.add(self.time_embedding(vars, &input.times)?)?;

        let mut pe = vec![0.0; n * d];
        for (i, &p) in input.positions.iter().enumerate() {
            sinusoid_into(p as f64, &mut pe[i * d..(i + 1) * d]);
        }
        h = h.add(tape.constant(Tensor::new(vec![n, d], pe)?))?;

        let age_z = (input.age - c.age_center) / c.age_scale;
        let mut age_enc = vec![0.0; c.cont_pe_dim];
        sinusoid_into(age_z, &mut age_enc);
        let age_row = tape.constant(Tensor::new(vec![1, c.cont_pe_dim], age_enc)?).matmul(vars[l.age])?;
        let sex_row = vars[l.sex].gather(&[input.sex.index()], "sex embedding")?;
        h = h.add_row(age_row.add(sex_row)?)?;
        Ok(h)
    }

    fn time_embedding<'t>(&self, vars: &[Var<'t>], times: &[TimeVec]) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for (dim, &table) in self.layout.time.iter().enumerate() {
            let idx: Vec<usize> = times.iter().map(|t| t[dim]).collect();
            let e = vars[table].gather(&idx, TIME_TABLE_NAMES[dim])?;
            acc = Some(match acc {
                Some(a) => a.add(e)?,
                None => e,
            });
        }
        Ok(acc.expect("seven temporal tables"))
    }

    /// Inference-mode logits `[T, vocab_size]`.
    pub fn logits(&self, input: &ModelInput, mask: MaskKind) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let m = Rc::new(build_mask(mask, input.len())?);
        let out = self.forward(&tape, &vars, input, m, None)?;
        Ok((*out.logits.value()).clone())
    }

    /// Mean of final hidden states over non-pad positions under the causal mask.
    pub fn extract_embedding(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let pad = self.config.vocab_size;
        let keep: Vec<usize> = (0..input.len()).filter(|&i| input.tokens[i] != pad).collect();
        if keep.is_empty() {
            return Err(Error::InsufficientData("embedding needs at least one non-pad position".into()));
        }
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let m = Rc::new(build_mask(MaskKind::Causal, input.len())?);
        let hidden = self.forward(&tape, &vars, input, m, None)?.hidden.value();
        let d = self.config.d_model;
        let mut out = vec![0.0; d];
        for &i in &keep {
            out.iter_mut().zip(hidden.row(i)).for_each(|(o, h)| *o += h);
        }
        out.iter_mut().for_each(|o| *o /= keep.len() as f64);
        Ok(out)
    }
}

const TIME_TABLE_NAMES: [&str; 7] = [
    "day-of-week embedding",
    "hour embedding",
    "minute embedding",
    "month embedding",
    "year embedding",
    "day-of-month embedding",
    "sleep embedding",
];

fn mlp<'t>(vars: &[Var<'t>], idx: MlpIdx, x: Var<'t>) -> Result<Var<'t>> {
    let h = x.matmul(vars[idx.w1])?.add_row(vars[idx.b1])?.gelu();
    h.matmul(vars[idx.w2])?.add_row(vars[idx.b2])
}

fn dropout<'t>(tape: &'t Tape, x: Var<'t>, rate: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var<'t>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let shape = x.shape();
            let keep = 1.0 / (1.0 - rate);
            let m = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
            x.mul(tape.constant(m))
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests;
