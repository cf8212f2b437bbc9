//! Intent-guided selective attention.
//!
//! Statement scores pick the `k_statement` most relevant statements for each
//! target position; token scores pick the `k_token` most relevant tokens
//! inside every statement. The combined weight of token `t` in statement `l`
//! is `A_s[j, l] * A_t^l[j, t]`, and the output attends token values with it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{grouped_topk_keep, Linear};
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsaConfig {
    pub k_token: usize,
    pub k_statement: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_intent: usize,
}

impl IsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_token == 0 || self.k_statement == 0 || self.heads == 0 {
            return Err(Error::Config("k_token, k_statement and heads must be at least 1".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_query(&self) -> usize {
        self.d_model + self.d_intent
    }
}

/// Projection matrices of one selective-attention layer.
#[derive(Debug, Clone)]
pub struct IsaParams {
    pub query_statement: Linear,
    pub key_statement: Linear,
    pub query_token: Linear,
    pub key_token: Linear,
    pub value_token: Linear,
    /// Statement-side values; registered only when requested, never used by
    /// the token-valued output.
    pub value_statement: Option<Linear>,
    pub output: Linear,
}

impl IsaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        cfg: &IsaConfig,
        with_statement_values: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (dq, d) = (cfg.d_query(), cfg.d_model);
        Ok(Self {
            query_statement: Linear::new(store, &format!("{name}.q_s"), dq, d, false, rng)?,
            key_statement: Linear::new(store, &format!("{name}.k_s"), d, d, false, rng)?,
            query_token: Linear::new(store, &format!("{name}.q_t"), dq, d, false, rng)?,
            key_token: Linear::new(store, &format!("{name}.k_t"), d, d, false, rng)?,
            value_token: Linear::new(store, &format!("{name}.v_t"), d, d, false, rng)?,
            value_statement: if with_statement_values {
                Some(Linear::new(store, &format!("{name}.v_s"), d, d, false, rng)?)
            } else {
                None
            },
            output: Linear::new(store, &format!("{name}.o"), d, d, false, rng)?,
        })
    }
}

/// Attention maps of one head, one row per target position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub block: usize,
    pub head: usize,
    /// Last decoding step covered by the rows.
    pub step: usize,
    #[serde(rename = "A_s")]
    pub a_s: Vec<Vec<f64>>,
    /// Token attention restricted to each statement, keyed by statement index.
    #[serde(rename = "A_t")]
    pub a_t: BTreeMap<usize, Vec<Vec<f64>>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    /// Gate value per target position, when captured from a decoder block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

fn head_slice(g: &mut Graph<'_>, x: Var, cfg: &IsaConfig, h: usize) -> Result<Var> {
    if cfg.heads == 1 {
        return Ok(x);
    }
    let dh = cfg.d_head();
    g.slice_cols(x, h * dh, (h + 1) * dh)
}

fn scaled_scores(g: &mut Graph<'_>, q: Var, k: Var, cfg: &IsaConfig) -> Result<Var> {
    let s = g.matmul_nt(q, k)?;
    Ok(g.scale(s, 1.0 / (cfg.d_head() as f64).sqrt()))
}

fn check_inputs(g: &Graph<'_>, q1: Var, x: Var, cfg: &IsaConfig) -> Result<()> {
    if g.shape(q1).1 != cfg.d_query() {
        return Err(Error::Shape(format!("query width {} != {}", g.shape(q1).1, cfg.d_query())));
    }
    if g.shape(x).1 != cfg.d_model {
        return Err(Error::Shape(format!("source width {} != {}", g.shape(x).1, cfg.d_model)));
    }
    Ok(())
}

/// Per-head statement attention `A_s` (`target_len x L`).
pub fn statement_attention(g: &mut Graph<'_>, q1: Var, x_sta: Var, cfg: &IsaConfig, params: &IsaParams) -> Result<Vec<Var>> {
    check_inputs(g, q1, x_sta, cfg)?;
    let l = g.shape(x_sta).0;
    if l == 0 {
        return Err(Error::Shape("no statements".into()));
    }
    let q = params.query_statement.forward(g, q1)?;
    let k = params.key_statement.forward(g, x_sta)?;
    (0..cfg.heads)
        .map(|h| {
            let (qh, kh) = (head_slice(g, q, cfg, h)?, head_slice(g, k, cfg, h)?);
            let scores = scaled_scores(g, qh, kh, cfg)?;
            let keep = grouped_topk_keep(g.value(scores), l, &[(0, l)], cfg.k_statement);
            g.group_softmax(scores, &[(0, l)], Some(&keep))
        })
        .collect()
}

/// Per-head token attention (`target_len x T`); the columns of each
/// statement segment form that statement's `A_t^l` and sum to one per row.
pub fn token_attention(
    g: &mut Graph<'_>,
    q1: Var,
    x_tok: Var,
    segments: &[(usize, usize)],
    cfg: &IsaConfig,
    params: &IsaParams,
) -> Result<Vec<Var>> {
    check_inputs(g, q1, x_tok, cfg)?;
    let t = g.shape(x_tok).0;
    crate::tensor::check_partition(segments, t)?;
    let q = params.query_token.forward(g, q1)?;
    let k = params.key_token.forward(g, x_tok)?;
    (0..cfg.heads)
        .map(|h| {
            let (qh, kh) = (head_slice(g, q, cfg, h)?, head_slice(g, k, cfg, h)?);
            let scores = scaled_scores(g, qh, kh, cfg)?;
            let keep = grouped_topk_keep(g.value(scores), t, segments, cfg.k_token);
            g.group_softmax(scores, segments, Some(&keep))
        })
        .collect()
}

/// `A[j, t] = A_s[j, l] * A_t^l[j, t - start_l]`, statements concatenated in order.
pub fn combine_attention(a_s: &Tensor, a_t: &[Tensor], segments: &[(usize, usize)]) -> Result<Tensor> {
    let (rows, l) = a_s.dims2();
    if a_t.len() != l || segments.len() != l {
        return Err(Error::Shape(format!("{l} statements, {} token maps, {} segments", a_t.len(), segments.len())));
    }
    crate::tensor::check_partition(segments, segments.last().map_or(0, |s| s.1))?;
    let total = segments.last().map_or(0, |s| s.1);
    let mut out = vec![0.0; rows * total];
    for (li, (&(s, e), at)) in segments.iter().zip(a_t).enumerate() {
        if at.dims2() != (rows, e - s) {
            return Err(Error::Shape(format!("A_t^{li} is {:?}, expected {:?}", at.dims2(), (rows, e - s))));
        }
        for j in 0..rows {
            let w = a_s.row(j)[li];
            for (t, &v) in at.row(j).iter().enumerate() {
                out[j * total + s + t] = w * v;
            }
        }
    }
    Tensor::new(vec![rows, total], out)
}

/// Output of one selective-attention layer.
pub struct IsaOutput {
    pub output: Var,
    /// Per head: `(A_s, A_t, A)` graph nodes.
    pub maps: Vec<(Var, Var, Var)>,
}

pub fn isa_forward(
    g: &mut Graph<'_>,
    q1: Var,
    x_tok: Var,
    x_sta: Var,
    segments: &[(usize, usize)],
    cfg: &IsaConfig,
    params: &IsaParams,
) -> Result<IsaOutput> {
    if g.shape(x_sta).0 != segments.len() {
        return Err(Error::Shape(format!("{} statement rows for {} segments", g.shape(x_sta).0, segments.len())));
    }
    let a_s = statement_attention(g, q1, x_sta, cfg, params)?;
    let a_t = token_attention(g, q1, x_tok, segments, cfg, params)?;
    let v = params.value_token.forward(g, x_tok)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let expanded = g.expand_cols(a_s[h], segments)?;
        let a = g.mul(expanded, a_t[h])?;
        let vh = head_slice(g, v, cfg, h)?;
        heads.push(g.matmul(a, vh)?);
        maps.push((a_s[h], a_t[h], a));
    }
    let ctx = if cfg.heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let output = params.output.forward(g, ctx)?;
    Ok(IsaOutput { output, maps })
}

/// Reads the attention maps of `out` into serializable traces.
pub fn capture_traces(g: &Graph<'_>, out: &IsaOutput, segments: &[(usize, usize)], block: usize) -> Vec<AttentionTrace> {
    out.maps
        .iter()
        .enumerate()
        .map(|(head, &(a_s, a_t, a))| {
            let a_t_rows = g.rows_of(a_t);
            let a_t = segments
                .iter()
                .enumerate()
                .map(|(l, &(s, e))| (l, a_t_rows.iter().map(|r| r[s..e].to_vec()).collect()))
                .collect();
            let a_s = g.rows_of(a_s);
            AttentionTrace { block, head, step: a_s.len().saturating_sub(1), a_s, a_t, a: g.rows_of(a), beta: None }
        })
        .collect()
}
