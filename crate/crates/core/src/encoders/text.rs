//! Pre-norm transformer text encoder with causal attention, `<eos>` pooling
//! and a linear projection into the shared embedding space.
//!
//! Sequences are processed packed: all tokens of a batch are stacked into one
//! `(Σ len) × width` matrix and attention is restricted to each sequence's
//! segment, so every dense layer runs as a single matrix product.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenSeq, Vocabulary};
use crate::autograd::{Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Matrix;

/// Initial temperature parameter `ln(1 / 0.07)`.
pub const INITIAL_LOG_TEMPERATURE: f64 = 2.659_260_036_932_778_5;
/// Upper bound on `exp(τ)`.
pub const MAX_TEMPERATURE_SCALE: f64 = 100.0;

const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl TextEncoderConfig {
    /// 64-wide, 2 layers, 4 heads, 32-dimensional output, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            layers: 2,
            heads: 4,
            embed_dim: 32,
            max_len: 128,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.embed_dim == 0 || self.vocab_size == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim, vocab_size and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub qkv_weight: Matrix,
    pub qkv_bias: Matrix,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub fc_weight: Matrix,
    pub fc_bias: Matrix,
    pub proj_weight: Matrix,
    pub proj_bias: Matrix,
}

impl TransformerBlock {
    fn init(width: usize, hidden: usize, r: &mut impl Rng) -> Self {
        Self {
            ln1_gain: Matrix::filled(1, width, 1.0),
            ln1_bias: Matrix::zeros(1, width),
            qkv_weight: uniform(r, width, 3 * width, (width as f64).powf(-0.5)),
            qkv_bias: Matrix::zeros(1, 3 * width),
            out_weight: uniform(r, width, width, (width as f64).powf(-0.5)),
            out_bias: Matrix::zeros(1, width),
            ln2_gain: Matrix::filled(1, width, 1.0),
            ln2_bias: Matrix::zeros(1, width),
            fc_weight: uniform(r, width, hidden, (width as f64).powf(-0.5)),
            fc_bias: Matrix::zeros(1, hidden),
            proj_weight: uniform(r, hidden, width, (hidden as f64).powf(-0.5)),
            proj_bias: Matrix::zeros(1, width),
        }
    }

    fn fields(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.out.weight", &self.out_weight),
            ("attn.out.bias", &self.out_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.fc.weight", &self.fc_weight),
            ("mlp.fc.bias", &self.fc_bias),
            ("mlp.proj.weight", &self.proj_weight),
            ("mlp.proj.bias", &self.proj_bias),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
        ]
    }
}

/// Uniform entries with standard deviation `std`.
pub(crate) fn uniform(r: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let a = std * 3f64.sqrt();
    let data = (0..rows * cols).map(|_| r.gen_range(-a..=a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final_gain: Matrix,
    pub ln_final_bias: Matrix,
    pub projection: Matrix,
    /// `τ`, stored as a `1 × 1` matrix; similarities are scaled by `exp(τ)`.
    pub log_temperature: Matrix,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, r: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let hidden = w * config.mlp_ratio;
        Ok(Self {
            token_embedding: uniform(r, config.vocab_size, w, 0.02),
            positional_embedding: uniform(r, config.max_len, w, 0.01),
            blocks: (0..config.layers)
                .map(|_| TransformerBlock::init(w, hidden, r))
                .collect(),
            ln_final_gain: Matrix::filled(1, w, 1.0),
            ln_final_bias: Matrix::zeros(1, w),
            projection: uniform(r, w, config.embed_dim, (w as f64).powf(-0.5)),
            log_temperature: Matrix::scalar(INITIAL_LOG_TEMPERATURE),
            config,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn tau(&self) -> f64 {
        self.log_temperature.item()
    }

    /// Token-embedding rows of `seq` (the encoder's input-space form).
    pub fn embed_tokens(&self, seq: &[usize]) -> Matrix {
        self.token_embedding.select_rows(seq)
    }

    /// Records the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TextVars {
        let params: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, m)| tape.leaf(m.clone(), trainable))
            .collect();
        TextVars {
            params,
            layers: self.config.layers,
            heads: self.config.heads,
            max_len: self.config.max_len,
        }
    }

    /// `t_i` for each token sequence (not normalised).
    pub fn encode_batch(&self, batch: &[TokenSeq]) -> Result<Matrix> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let y = vars.encode_tokens(&mut tape, chunk)?;
            out.push(tape.value(y).clone());
        }
        if out.is_empty() {
            return Ok(Matrix::zeros(0, self.embed_dim()));
        }
        Matrix::vstack(&out.iter().collect::<Vec<_>>())
    }

    /// Encodes one sequence already in input space (`L × width`); the last
    /// row is the pooling position.
    pub fn encode_embedded(&self, embedded: &Matrix) -> Result<Matrix> {
        if embedded.cols() != self.width() {
            return Err(Error::Parameter(format!(
                "input rows have width {} but the encoder expects {}",
                embedded.cols(),
                self.width()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(embedded.clone());
        let segs = vec![Segment {
            start: 0,
            len: embedded.rows(),
        }];
        let y = vars.encode_embedded(&mut tape, x, segs)?;
        Ok(tape.value(y).clone())
    }

    /// [`Self::encode_embedded`] over many sequences, packed in chunks.
    pub fn encode_embedded_batch(&self, sequences: &[Matrix]) -> Result<Matrix> {
        if let Some(bad) = sequences.iter().find(|s| s.cols() != self.width()) {
            return Err(Error::Parameter(format!(
                "input rows have width {} but the encoder expects {}",
                bad.cols(),
                self.width()
            )));
        }
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let x = tape.constant(Matrix::vstack(&chunk.iter().collect::<Vec<_>>())?);
            let y = vars.encode_embedded(&mut tape, x, segments(chunk.iter().map(Matrix::rows)))?;
            out.push(tape.value(y).clone());
        }
        if out.is_empty() {
            return Ok(Matrix::zeros(0, self.embed_dim()));
        }
        Matrix::vstack(&out.iter().collect::<Vec<_>>())
    }

    pub fn tokenize(&self, vocab: &Vocabulary, text: &str) -> TokenSeq {
        vocab.tokenize(text, self.max_len())
    }
}

impl Parameters for TextEncoder {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("text.token_embedding".to_string(), &self.token_embedding),
            ("text.positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.fields() {
                out.push((format!("text.blocks.{i}.{name}"), m));
            }
        }
        out.push(("text.ln_final.gain".into(), &self.ln_final_gain));
        out.push(("text.ln_final.bias".into(), &self.ln_final_bias));
        out.push(("text.projection".into(), &self.projection));
        out.push(("text.log_temperature".into(), &self.log_temperature));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.ln_final_gain);
        out.push(&mut self.ln_final_bias);
        out.push(&mut self.projection);
        out.push(&mut self.log_temperature);
        out
    }
}

/// Text-encoder parameters recorded on a tape, in [`Parameters`] order.
#[derive(Clone, Debug)]
pub struct TextVars {
    pub params: Vec<Var>,
    layers: usize,
    heads: usize,
    max_len: usize,
}

const BLOCK_PARAMS: usize = 12;

impl TextVars {
    pub fn token_embedding(&self) -> Var {
        self.params[0]
    }

    fn positional(&self) -> Var {
        self.params[1]
    }

    fn block(&self, layer: usize, field: usize) -> Var {
        self.params[2 + layer * BLOCK_PARAMS + field]
    }

    fn tail(&self, k: usize) -> Var {
        self.params[2 + self.layers * BLOCK_PARAMS + k]
    }

    pub fn log_temperature(&self) -> Var {
        self.tail(3)
    }

    /// Encodes token sequences: `n × embed_dim`.
    pub fn encode_tokens(&self, tape: &mut Tape, batch: &[TokenSeq]) -> Result<Var> {
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let segs = segments(batch.iter().map(Vec::len));
        let x = tape.gather(self.token_embedding(), ids);
        self.encode_embedded(tape, x, segs)
    }

    /// Encodes packed input-space rows split into `segs`: one output row per segment.
    pub fn encode_embedded(&self, tape: &mut Tape, input: Var, segs: Vec<Segment>) -> Result<Var> {
        let total: usize = segs.iter().map(|s| s.len).sum();
        if tape.value(input).rows() != total {
            return Err(Error::Shape(format!(
                "{} input rows for segments covering {total}",
                tape.value(input).rows()
            )));
        }
        let mut positions = Vec::with_capacity(total);
        let mut pooled = Vec::with_capacity(segs.len());
        for s in &segs {
            if s.len == 0 || s.len > self.max_len {
                return Err(Error::Contract(format!(
                    "sequence length {} outside 1..={}",
                    s.len, self.max_len
                )));
            }
            positions.extend(0..s.len);
            pooled.push(s.start + s.len - 1);
        }
        let segs = Arc::new(segs);
        let pos = tape.gather(self.positional(), positions);
        let mut x = tape.add(input, pos);
        for l in 0..self.layers {
            let b = |f| self.block(l, f);
            let h = tape.layer_norm(x, b(0), b(1));
            let qkv = tape.linear(h, b(2), b(3));
            let a = tape.attention(qkv, segs.clone(), self.heads);
            let o = tape.linear(a, b(4), b(5));
            x = tape.add(x, o);
            let h = tape.layer_norm(x, b(6), b(7));
            let f = tape.linear(h, b(8), b(9));
            let f = tape.quick_gelu(f);
            let m = tape.linear(f, b(10), b(11));
            x = tape.add(x, m);
        }
        let last = tape.gather(x, pooled);
        let last = tape.layer_norm(last, self.tail(0), self.tail(1));
        Ok(tape.matmul(last, self.tail(2)))
    }
}

/// Consecutive segments for the given lengths.
pub fn segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}
