//! The intent-aware encoder/decoder.
//!
//! A code encoder yields token states and max-pooled statement states, an
//! exemplar encoder encodes the retrieved comment, and every decoder block
//! fuses selective attention over the code with cross-attention over the
//! exemplar through a sigmoid gate. The intent embedding is concatenated to
//! the decoder queries and to the final state before the output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{IntentCategory, PreprocessedCode, BOS, EOS};
use crate::error::{Error, Result};
use crate::isa::{capture_traces, isa_forward, AttentionTrace, IsaConfig, IsaOutput, IsaParams};
use crate::nn::{causal_keep, embed_with_positions, EncoderShape, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerEncoder, EMBED_STD};
use crate::tensor::{sinusoidal_pe, Graph, Init, ParameterStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_intent: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub k_token: usize,
    pub k_statement: usize,
    /// Maximum generated length, counting the closing `[EOS]`.
    pub max_comment_len: usize,
    pub max_statements: usize,
    /// Maximum tokens per statement, counting its `[SEP]`.
    pub max_statement_len: usize,
    pub code_vocab_size: usize,
    pub comment_vocab_size: usize,
    pub beam_size: usize,
    /// Register statement-side value projections in selective attention.
    pub statement_values: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_intent: 128,
            heads: 8,
            blocks: 6,
            ffn_mult: 4,
            dropout: 0.2,
            k_token: 10,
            k_statement: 5,
            max_comment_len: 30,
            max_statements: 32,
            max_statement_len: 16,
            code_vocab_size: 50_000,
            comment_vocab_size: 50_000,
            beam_size: 5,
            statement_values: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.d_intent,
            self.heads,
            self.blocks,
            self.ffn_mult,
            self.max_comment_len,
            self.max_statements,
            self.code_vocab_size,
            self.comment_vocab_size,
            self.beam_size,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even and divisible by {} heads", self.d_model, self.heads)));
        }
        if self.max_statement_len < 2 {
            return Err(Error::Config("max_statement_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.isa().validate()
    }

    pub fn isa(&self) -> IsaConfig {
        IsaConfig {
            k_token: self.k_token,
            k_statement: self.k_statement,
            heads: self.heads,
            d_model: self.d_model,
            d_intent: self.d_intent,
        }
    }

    pub fn max_code_len(&self) -> usize {
        self.max_statements * self.max_statement_len
    }
}

/// Token-level and statement-level code representations inside a graph.
#[derive(Debug, Clone)]
pub struct EncodedCode {
    pub x_tok: Var,
    pub x_sta: Var,
    pub segments: Vec<(usize, usize)>,
}

/// Encoder outputs detached from any graph, reused across decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    pub x_tok: Tensor,
    pub x_sta: Tensor,
    pub segments: Vec<(usize, usize)>,
    pub z: Tensor,
    pub intent: IntentCategory,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub isa: IsaParams,
    pub cross_attn: MultiHeadAttention,
    pub gate: Linear,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

pub struct BlockOutput {
    pub state: Var,
    /// `n x 1` gate values.
    pub beta: Var,
    pub isa_out: Var,
    pub mha_out: Var,
    pub fused: Var,
    pub isa: IsaOutput,
}

/// Decoder outputs for one prefix.
pub struct DecodeOutput {
    pub logits: Var,
    pub blocks: Vec<BlockOutput>,
}

/// Snapshot of a decoding pass over a prefix.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub generated: Vec<usize>,
    pub hidden: Vec<Tensor>,
    pub betas: Vec<Vec<f64>>,
    pub trace: Option<Vec<AttentionTrace>>,
}

#[derive(Debug, Clone)]
pub struct Dome {
    pub cfg: ModelConfig,
    pub code_encoder: TransformerEncoder,
    pub exemplar_encoder: TransformerEncoder,
    pub exemplar_null: usize,
    pub intent_table: usize,
    pub comment_embed: usize,
    pub decoder: Vec<DecoderBlock>,
    pub output: Linear,
    pe: Tensor,
}

pub const CODE_ENCODER: &str = "code_encoder";
pub const EXEMPLAR_ENCODER: &str = "exemplar_encoder";

impl Dome {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let ffn_hidden = d * cfg.ffn_mult;
        let code_shape = EncoderShape {
            vocab: cfg.code_vocab_size,
            d_model: d,
            heads: cfg.heads,
            blocks: cfg.blocks,
            ffn_hidden,
            max_len: cfg.max_code_len(),
        };
        let code_encoder = TransformerEncoder::new(store, CODE_ENCODER, code_shape, rng)?;
        let exemplar_shape =
            EncoderShape { vocab: cfg.comment_vocab_size, max_len: cfg.max_comment_len.max(1), ..code_shape };
        let exemplar_encoder = TransformerEncoder::new(store, EXEMPLAR_ENCODER, exemplar_shape, rng)?;
        let exemplar_null = store.register("exemplar_null", 1, d, Init::Normal(EMBED_STD), rng)?;
        let intent_table = store.register("intent_embed", 5, cfg.d_intent, Init::Normal(EMBED_STD), rng)?;
        let comment_embed = store.register("decoder.embed", cfg.comment_vocab_size, d, Init::Normal(EMBED_STD), rng)?;
        let isa_cfg = cfg.isa();
        let decoder = (0..cfg.blocks)
            .map(|i| {
                let name = format!("decoder.block{i}");
                Ok(DecoderBlock {
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, d, cfg.heads, rng)?,
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
                    isa: IsaParams::new(store, &format!("{name}.isa"), &isa_cfg, cfg.statement_values, rng)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d + cfg.d_intent, d, cfg.heads, rng)?,
                    gate: Linear::new(store, &format!("{name}.gate"), 2 * d, 1, false, rng)?,
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_hidden, rng)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let output = Linear::new(store, "output", d + cfg.d_intent, cfg.comment_vocab_size, true, rng)?;
        let pe = sinusoidal_pe(cfg.max_comment_len, d)?;
        Ok(Self { cfg, code_encoder, exemplar_encoder, exemplar_null, intent_table, comment_embed, decoder, output, pe })
    }

    fn dropout(&self, g: &Graph<'_>) -> f64 {
        if g.is_training() {
            self.cfg.dropout
        } else {
            0.0
        }
    }

    pub fn encode_code(&self, g: &mut Graph<'_>, code: &PreprocessedCode) -> Result<EncodedCode> {
        let max = self.cfg.max_code_len();
        if code.len() > max {
            return Err(Error::InputTooLong { len: code.len(), max });
        }
        let x_tok = self.code_encoder.forward(g, &code.token_ids, self.dropout(g))?;
        let x_sta = g.segment_max_pool(x_tok, &code.segments)?;
        Ok(EncodedCode { x_tok, x_sta, segments: code.segments.clone() })
    }

    /// Encodes exemplar ids; an empty exemplar becomes the learned null row.
    pub fn encode_exemplar(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Ok(g.param(self.exemplar_null));
        }
        let ids = &ids[..ids.len().min(self.cfg.max_comment_len)];
        self.exemplar_encoder.forward(g, ids, self.dropout(g))
    }

    /// Intent embedding repeated over `rows` positions.
    pub fn intent_rows(&self, g: &mut Graph<'_>, intent: IntentCategory, rows: usize) -> Result<Var> {
        if intent.is_noise() {
            return Err(Error::InvalidIntent(intent.to_string()));
        }
        let table = g.param(self.intent_table);
        g.gather(table, &vec![intent.index(); rows])
    }

    pub fn intent_embed(&self, g: &mut Graph<'_>, intent: IntentCategory) -> Result<Var> {
        self.intent_rows(g, intent, 1)
    }

    pub fn decoder_block(
        &self,
        g: &mut Graph<'_>,
        index: usize,
        prev: Var,
        intent_rows: Var,
        code: &EncodedCode,
        exemplar: Var,
    ) -> Result<BlockOutput> {
        let block = &self.decoder[index];
        let p = self.dropout(g);
        let n = g.shape(prev).0;
        let keep = causal_keep(n);
        let a = block.self_attn.forward(g, prev, prev, Some(&keep))?;
        let a = g.dropout(a, p)?;
        let h = g.add(prev, a)?;
        let s1 = block.norm1.forward(g, h)?;
        let q1 = g.concat_cols(&[s1, intent_rows])?;
        let isa = isa_forward(g, q1, code.x_tok, code.x_sta, &code.segments, &self.cfg.isa(), &block.isa)?;
        let isa_out = isa.output;
        let mha_out = block.cross_attn.forward(g, q1, exemplar, None)?;
        let both = g.concat_cols(&[isa_out, mha_out])?;
        let gate = block.gate.forward(g, both)?;
        let beta = g.sigmoid(gate);
        let from_code = g.mul_col(isa_out, beta)?;
        let inv = g.one_minus(beta);
        let from_exemplar = g.mul_col(mha_out, inv)?;
        let fused = g.add(from_code, from_exemplar)?;
        let f = block.ffn.forward(g, fused)?;
        let f = g.dropout(f, p)?;
        let h2 = g.add(fused, f)?;
        let state = block.norm2.forward(g, h2)?;
        Ok(BlockOutput { state, beta, isa_out, mha_out, fused, isa })
    }

    /// `W_o^T [s ; E] + b_o` for every row of `states`.
    pub fn project_output(&self, g: &mut Graph<'_>, states: Var, intent_rows: Var) -> Result<Var> {
        let x = g.concat_cols(&[states, intent_rows])?;
        self.output.forward(g, x)
    }

    /// Runs the decoder over `inputs` (starting with `[BOS]`).
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        inputs: &[usize],
        intent: IntentCategory,
        code: &EncodedCode,
        exemplar: Var,
    ) -> Result<DecodeOutput> {
        let n = inputs.len();
        let mut s = embed_with_positions(g, self.comment_embed, &self.pe, self.cfg.d_model, inputs, self.dropout(g))?;
        let e = self.intent_rows(g, intent, n)?;
        let mut blocks = Vec::with_capacity(self.decoder.len());
        for i in 0..self.decoder.len() {
            let out = self.decoder_block(g, i, s, e, code, exemplar)?;
            s = out.state;
            blocks.push(out);
        }
        let logits = self.project_output(g, s, e)?;
        Ok(DecodeOutput { logits, blocks })
    }

    /// Mean token cross-entropy of `target` given code, intent and exemplar,
    /// with `[BOS]`-shifted inputs and an `[EOS]`-terminated target.
    pub fn teacher_forcing_loss(
        &self,
        g: &mut Graph<'_>,
        code: &PreprocessedCode,
        intent: IntentCategory,
        exemplar_ids: &[usize],
        target: &[usize],
    ) -> Result<(Var, usize)> {
        let (inputs, targets) = self.shift_target(target);
        let enc = self.encode_code(g, code)?;
        let z = self.encode_exemplar(g, exemplar_ids)?;
        let out = self.decode(g, &inputs, intent, &enc, z)?;
        let targets: Vec<Option<usize>> = targets.into_iter().map(Some).collect();
        let loss = g.cross_entropy(out.logits, &targets)?;
        Ok((loss, targets.len()))
    }

    /// `([BOS] y, y [EOS])`, with `y` cut so both fit `max_comment_len`.
    pub fn shift_target(&self, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let body = &target[..target.len().min(self.cfg.max_comment_len - 1)];
        let inputs = std::iter::once(BOS).chain(body.iter().copied()).collect();
        let targets = body.iter().copied().chain(std::iter::once(EOS)).collect();
        (inputs, targets)
    }

    /// Encodes code and exemplar once for decoding.
    pub fn encode_source(
        &self,
        store: &ParameterStore,
        code: &PreprocessedCode,
        intent: IntentCategory,
        exemplar_ids: &[usize],
    ) -> Result<EncodedSource> {
        if intent.is_noise() {
            return Err(Error::InvalidIntent(intent.to_string()));
        }
        let mut g = Graph::with_params(store);
        let enc = self.encode_code(&mut g, code)?;
        let z = self.encode_exemplar(&mut g, exemplar_ids)?;
        Ok(EncodedSource {
            x_tok: g.to_tensor(enc.x_tok),
            x_sta: g.to_tensor(enc.x_sta),
            segments: enc.segments,
            z: g.to_tensor(z),
            intent,
        })
    }

    /// Decoder pass over `[BOS] + prefix` from cached encoder outputs.
    pub fn decoder_state(
        &self,
        store: &ParameterStore,
        source: &EncodedSource,
        prefix: &[usize],
        with_trace: bool,
    ) -> Result<(Vec<f64>, DecoderState)> {
        let mut g = Graph::with_params(store);
        let code = EncodedCode { x_tok: g.input(&source.x_tok), x_sta: g.input(&source.x_sta), segments: source.segments.clone() };
        let z = g.input(&source.z);
        let inputs: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let out = self.decode(&mut g, &inputs, source.intent, &code, z)?;
        let (n, v) = g.shape(out.logits);
        let last = g.value(out.logits)[(n - 1) * v..].to_vec();
        let trace = with_trace.then(|| {
            out.blocks
                .iter()
                .enumerate()
                .flat_map(|(b, bo)| {
                    let beta = g.value(bo.beta).to_vec();
                    capture_traces(&g, &bo.isa, &source.segments, b).into_iter().map(move |mut t| {
                        t.beta = Some(beta.clone());
                        t
                    })
                })
                .collect()
        });
        let state = DecoderState {
            generated: prefix.to_vec(),
            hidden: out.blocks.iter().map(|b| g.to_tensor(b.state)).collect(),
            betas: out.blocks.iter().map(|b| g.value(b.beta).to_vec()).collect(),
            trace,
        };
        Ok((last, state))
    }

    /// Next-token log-probabilities after `[BOS] + prefix`.
    pub fn next_log_probs(&self, store: &ParameterStore, source: &EncodedSource, prefix: &[usize]) -> Result<Vec<f64>> {
        let (logits, _) = self.decoder_state(store, source, prefix, false)?;
        Ok(log_softmax(&logits))
    }

    /// Names of parameters belonging to the code encoder / exemplar encoder.
    pub fn encoder_param_names(store: &ParameterStore, prefix: &str) -> Vec<String> {
        store.names().iter().filter(|n| n.starts_with(&format!("{prefix}."))).cloned().collect()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lz).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
