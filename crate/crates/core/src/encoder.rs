//! Byte-level tokenizer, instruction templating, and a small Llama-style
//! transformer encoder with switchable causal/bidirectional attention.
//!
//! The block structure is pre-RMSNorm multi-head attention with rotary
//! positions, a SwiGLU feed-forward, and residual connections. Only the
//! attention mask differs between the two modes; rotary positions are applied
//! the same way in both.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{sample_normal, seeded_rng, subsystem_seed};
use crate::tensor::{Tape, Tensor, TensorId};

/// First id after the 256 byte values.
pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
/// Byte vocabulary plus BOS/EOS.
pub const MIN_VOCAB: usize = 258;

/// RMSNorm stabilizer.
pub const RMS_EPS: f64 = 1e-5;

/// Initialization scale for weight matrices and the embedding table.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

/// Architecture description. `vocab_size` covers the byte vocabulary plus
/// BOS/EOS; `max_seq_len` bounds tokenized inputs (the desk default of 512
/// mirrors the reference configuration's query length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub attention_mode: AttentionMode,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary positions",
                self.d_model / self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be >= 1".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config(format!(
                "rope_base must be positive, got {}",
                self.rope_base
            )));
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must cover 256 bytes plus BOS/EOS (>= {MIN_VOCAB}), got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A text plus an optional task instruction, rendered through the fixed
/// template before tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructedInput {
    pub task_instruction: Option<String>,
    pub body: String,
}

impl InstructedInput {
    pub fn instructed(instruction: impl Into<String>, body: impl Into<String>) -> Self {
        InstructedInput {
            task_instruction: Some(instruction.into()),
            body: body.into(),
        }
    }

    pub fn bare(body: impl Into<String>) -> Self {
        InstructedInput {
            task_instruction: None,
            body: body.into(),
        }
    }
}

/// Render the instruction template byte-exactly. Documents (no instruction)
/// pass through unchanged.
pub fn render_input(input: &InstructedInput) -> String {
    match &input.task_instruction {
        Some(instr) => format!("Instruct: {instr}\nQuery: {}", input.body),
        None => input.body.clone(),
    }
}

/// UTF-8 bytes to ids 0..=255, wrapped in BOS/EOS, truncated so the whole
/// sequence never exceeds `max_seq_len` (body bytes are dropped first, the
/// specials survive when there is room for them).
pub fn tokenize(text: &str, config: &EncoderConfig) -> Vec<u32> {
    let body_budget = config.max_seq_len.saturating_sub(2);
    let bytes = text.as_bytes();
    let take = bytes.len().min(body_budget);
    let mut ids = Vec::with_capacity(take + 2);
    ids.push(BOS_ID);
    ids.extend(bytes[..take].iter().map(|&b| b as u32));
    if config.max_seq_len >= 2 {
        ids.push(EOS_ID);
    }
    ids.truncate(config.max_seq_len);
    ids
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Encoder with its named parameters. Frozen models are safe to share across
/// threads for concurrent embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    params: Vec<Param>,
}

impl Model {
    /// Seeded initialization: weights and embeddings from N(0, 0.02²),
    /// norm gains at 1. The same config (including seed) always produces
    /// bit-identical parameters.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(subsystem_seed(config.seed, "encoder-init"));
        let d = config.d_model;
        let f = config.d_ff;
        let v = config.vocab_size;
        let mut params = Vec::new();
        fn weight(
            name: String,
            shape: Vec<usize>,
            rng: &mut rand_chacha::ChaCha8Rng,
        ) -> Param {
            let n: usize = shape.iter().product();
            Param {
                name,
                shape,
                data: sample_normal(rng, n, INIT_STD),
            }
        }
        fn gain(name: String, d: usize) -> Param {
            Param {
                name,
                shape: alloc::vec![d],
                data: alloc::vec![1.0; d],
            }
        }
        params.push(weight("embed.weight".into(), alloc::vec![v, d], &mut rng));
        for layer in 0..config.n_layers {
            params.push(gain(format!("layers.{layer}.attn_norm.gain"), d));
            params.push(weight(format!("layers.{layer}.attn.wq"), alloc::vec![d, d], &mut rng));
            params.push(weight(format!("layers.{layer}.attn.wk"), alloc::vec![d, d], &mut rng));
            params.push(weight(format!("layers.{layer}.attn.wv"), alloc::vec![d, d], &mut rng));
            params.push(weight(format!("layers.{layer}.attn.wo"), alloc::vec![d, d], &mut rng));
            params.push(gain(format!("layers.{layer}.ffn_norm.gain"), d));
            params.push(weight(format!("layers.{layer}.ffn.w_gate"), alloc::vec![d, f], &mut rng));
            params.push(weight(format!("layers.{layer}.ffn.w_up"), alloc::vec![d, f], &mut rng));
            params.push(weight(format!("layers.{layer}.ffn.w_down"), alloc::vec![f, d], &mut rng));
        }
        params.push(gain("final_norm.gain".into(), d));
        Ok(Model { config, params })
    }

    /// Rebuild a model from a config and parameter list (checkpoint load).
    pub fn from_params(config: EncoderConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = Model::init(config.clone())?;
        if expected.params.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                expected.params.len(),
                params.len()
            )));
        }
        for (e, p) in expected.params.iter().zip(&params) {
            if e.name != p.name {
                return Err(Error::Validation(format!(
                    "parameter name mismatch: expected {}, got {}",
                    e.name, p.name
                )));
            }
            if e.shape != p.shape {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name, p.shape, e.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Register all parameters as tape leaves. With `trainable` the leaves
    /// require gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<GraphParams> {
        let mut all = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = Tensor::new(p.data.clone(), p.shape.clone())?;
            let t = if trainable { t.with_grad() } else { t };
            all.push(tape.leaf(t)?);
        }
        Ok(GraphParams {
            config: self.config.clone(),
            all,
        })
    }

    /// Convenience inference path: render, tokenize, encode, mean-pool.
    pub fn embed_text(&self, input: &InstructedInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let graph = self.register(&mut tape, false)?;
        let id = graph.embed_input(&mut tape, input)?;
        Ok(tape.data(id).to_vec())
    }
}

/// Anything that maps an instructed input to an embedding vector; mining
/// teachers are expressed against this.
pub trait TextEmbedder {
    fn embed(&self, input: &InstructedInput) -> Result<Vec<f64>>;
}

impl TextEmbedder for Model {
    fn embed(&self, input: &InstructedInput) -> Result<Vec<f64>> {
        self.embed_text(input)
    }
}

/// Parameter ids registered on a tape, aligned with [`Model::params`] order.
pub struct GraphParams {
    config: EncoderConfig,
    all: Vec<TensorId>,
}

// Per-layer parameter offsets within the flat id list.
const LAYER_STRIDE: usize = 9;
const OFF_ATTN_NORM: usize = 0;
const OFF_WQ: usize = 1;
const OFF_WK: usize = 2;
const OFF_WV: usize = 3;
const OFF_WO: usize = 4;
const OFF_FFN_NORM: usize = 5;
const OFF_W_GATE: usize = 6;
const OFF_W_UP: usize = 7;
const OFF_W_DOWN: usize = 8;

impl GraphParams {
    pub fn ids(&self) -> &[TensorId] {
        &self.all
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn layer(&self, i: usize, off: usize) -> TensorId {
        self.all[1 + i * LAYER_STRIDE + off]
    }

    /// Final-layer hidden states `[L×d_model]` for a token sequence.
    pub fn encode(&self, tape: &mut Tape, tokens: &[u32]) -> Result<TensorId> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("encode of an empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let dh = self.config.head_dim();
        let scale = 1.0 / math::sqrt(dh as f64);

        let mut h = tape.gather_rows(self.all[0], &ids)?;
        for l in 0..self.config.n_layers {
            let normed = tape.rms_norm(h, self.layer(l, OFF_ATTN_NORM), RMS_EPS)?;
            let q = tape.matmul(normed, self.layer(l, OFF_WQ))?;
            let k = tape.matmul(normed, self.layer(l, OFF_WK))?;
            let v = tape.matmul(normed, self.layer(l, OFF_WV))?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let qh = tape.rope_apply(qh, self.config.rope_base)?;
                let kh = tape.rope_apply(kh, self.config.rope_base)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let probs = match self.config.attention_mode {
                    AttentionMode::Causal => tape.causal_softmax_rows(scores)?,
                    AttentionMode::Bidirectional => tape.stable_softmax(scores, 1)?,
                };
                heads.push(tape.matmul(probs, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = tape.matmul(merged, self.layer(l, OFF_WO))?;
            h = tape.add(h, attn_out)?;

            let normed = tape.rms_norm(h, self.layer(l, OFF_FFN_NORM), RMS_EPS)?;
            let gate = tape.matmul(normed, self.layer(l, OFF_W_GATE))?;
            let gate = tape.silu(gate)?;
            let up = tape.matmul(normed, self.layer(l, OFF_W_UP))?;
            let mixed = tape.mul_elem(gate, up)?;
            let ffn = tape.matmul(mixed, self.layer(l, OFF_W_DOWN))?;
            h = tape.add(h, ffn)?;
        }
        tape.rms_norm(h, self.all[self.all.len() - 1], RMS_EPS)
    }

    /// Mean-pooled embedding `[d_model]` of a rendered, tokenized input.
    /// Pooling averages over every position, specials included.
    pub fn embed_input(&self, tape: &mut Tape, input: &InstructedInput) -> Result<TensorId> {
        let tokens = tokenize(&render_input(input), &self.config);
        let hidden = self.encode(tape, &tokens)?;
        tape.mean_axis(hidden, 0)
    }
}
