//! Transformer building blocks bound to a [`ParameterStore`].
//!
//! Each layer records the ids of its parameters at construction; `forward`
//! pulls them into a [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{sinusoidal_pe, topk_keep, Graph, Init, ParameterStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), d_in, d_out, Init::Xavier, rng)?;
        let b = if bias { Some(store.register(&format!("{name}.b"), 1, d_out, Init::Zeros, rng)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gain: store.register(&format!("{name}.gain"), 1, d, Init::Ones, rng)?,
            bias: store.register(&format!("{name}.bias"), 1, d, Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// `keep` (row-major `n x m`) restricts which keys each query may see.
/// Returns the concatenated head outputs and the per-head probabilities.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    keep: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.shape(q);
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let m = g.shape(k).0;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = g.group_softmax(scores, &[(0, m)], keep)?;
        outs.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Keep-mask letting query `i` see keys `0..=i`.
pub fn causal_keep(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries come from width `d_query`; keys and values from `d_model`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        d_query: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_query, d_model, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, query: Var, memory: Var, keep: Option<&[bool]>) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let (ctx, _) = multi_head_attention(g, q, k, v, self.heads, keep)?;
        self.o.forward(g, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// `H1 = Norm(H + MHA(H)); H' = Norm(H1 + FFN(H1))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_hidden, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, dropout: f64) -> Result<Var> {
        let a = self.attn.forward(g, x, x, None)?;
        let a = g.dropout(a, dropout)?;
        let h = g.add(x, a)?;
        let h1 = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h1)?;
        let f = g.dropout(f, dropout)?;
        let h2 = g.add(h1, f)?;
        self.norm2.forward(g, h2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
}

/// Token embedding + sinusoidal positions + a stack of encoder blocks.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub embed: usize,
    pub blocks: Vec<EncoderBlock>,
    pub shape: EncoderShape,
    pe: Tensor,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, shape: EncoderShape, rng: &mut R) -> Result<Self> {
        let embed = store.register(&format!("{name}.embed"), shape.vocab, shape.d_model, Init::Normal(EMBED_STD), rng)?;
        let blocks = (0..shape.blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), shape.d_model, shape.heads, shape.ffn_hidden, rng))
            .collect::<Result<_>>()?;
        let pe = sinusoidal_pe(shape.max_len, shape.d_model)?;
        Ok(Self { embed, blocks, shape, pe })
    }

    /// Scaled token embeddings plus positions, with dropout.
    pub fn embed(&self, g: &mut Graph<'_>, table: usize, ids: &[usize], dropout: f64) -> Result<Var> {
        embed_with_positions(g, table, &self.pe, self.shape.d_model, ids, dropout)
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize], dropout: f64) -> Result<Var> {
        let mut h = self.embed(g, self.embed, ids, dropout)?;
        for block in &self.blocks {
            h = block.forward(g, h, dropout)?;
        }
        Ok(h)
    }
}

pub(crate) fn embed_with_positions(
    g: &mut Graph<'_>,
    table: usize,
    pe: &Tensor,
    d_model: usize,
    ids: &[usize],
    dropout: f64,
) -> Result<Var> {
    let max_len = pe.dims2().0;
    if ids.len() > max_len {
        return Err(Error::InputTooLong { len: ids.len(), max: max_len });
    }
    let t = g.param(table);
    let e = g.gather(t, ids)?;
    let e = g.scale(e, (d_model as f64).sqrt());
    let pos = g.constant(ids.len(), d_model, pe.data()[..ids.len() * d_model].to_vec())?;
    let x = g.add(e, pos)?;
    g.dropout(x, dropout)
}

/// Row-wise top-k keep mask over `values` (`rows x cols`), restricted to
/// each column group.
pub fn grouped_topk_keep(values: &[f64], cols: usize, groups: &[(usize, usize)], k: usize) -> Vec<bool> {
    let mut keep = vec![false; values.len()];
    for (i, row) in values.chunks(cols).enumerate() {
        for &(s, e) in groups {
            for (j, kept) in topk_keep(&row[s..e], k).into_iter().enumerate() {
                keep[i * cols + s + j] = kept;
            }
        }
    }
    keep
}
