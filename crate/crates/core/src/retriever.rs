//! Intent-partitioned exemplar retrieval with a small bi-encoder and a BM25 fallback.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CodeCommentRecord, IntentCategory};
use crate::error::{Error, Result};
use crate::nn::{EncoderShape, TransformerEncoder};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, ParameterStore, Var};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Groups records by intent, preserving input order inside each group.
/// Every generatable intent gets an entry, possibly empty.
pub fn partition_by_intent(corpus: &[CodeCommentRecord]) -> BTreeMap<IntentCategory, Vec<CodeCommentRecord>> {
    let mut parts: BTreeMap<_, Vec<_>> = IntentCategory::GENERATABLE.iter().map(|&i| (i, Vec::new())).collect();
    for r in corpus {
        parts.entry(r.intent).or_default().push(r.clone());
    }
    parts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Dense,
    Lexical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub d_r: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub code_vocab_size: usize,
    pub comment_vocab_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            d_r: 64,
            heads: 4,
            blocks: 2,
            ffn_mult: 2,
            max_len: 512,
            code_vocab_size: 50_000,
            comment_vocab_size: 30_000,
            epochs: 10,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Code-side and comment-side encoders sharing one parameter store.
#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub config: RetrieverConfig,
    pub store: ParameterStore,
    code: TransformerEncoder,
    comment: TransformerEncoder,
}

impl BiEncoder {
    pub fn new(config: RetrieverConfig) -> Result<Self> {
        if config.d_r == 0 || config.heads == 0 || !config.d_r.is_multiple_of(config.heads) || !config.d_r.is_multiple_of(2) {
            return Err(Error::Config(format!("d_r {} must be even and divisible by heads {}", config.d_r, config.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let shape = EncoderShape {
            vocab: config.code_vocab_size,
            d_model: config.d_r,
            heads: config.heads,
            blocks: config.blocks,
            ffn_hidden: config.d_r * config.ffn_mult,
            max_len: config.max_len,
        };
        let code = TransformerEncoder::new(&mut store, "code", shape, &mut rng)?;
        let comment =
            TransformerEncoder::new(&mut store, "comment", EncoderShape { vocab: config.comment_vocab_size, ..shape }, &mut rng)?;
        Ok(Self { config, store, code, comment })
    }

    fn pooled(&self, g: &mut Graph<'_>, encoder: &TransformerEncoder, ids: &[usize]) -> Result<Var> {
        let ids: Vec<usize> = if ids.is_empty() { vec![crate::corpus::PAD] } else { ids[..ids.len().min(self.config.max_len)].to_vec() };
        let h = encoder.forward(g, &ids, 0.0)?;
        Ok(g.mean_rows(h))
    }

    pub fn embed_code_var(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        self.pooled(g, &self.code, ids)
    }

    pub fn embed_comment_var(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        self.pooled(g, &self.comment, ids)
    }

    /// Mean of the code encoder's final hidden states.
    pub fn embed_code(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let v = self.embed_code_var(&mut g, ids)?;
        Ok(g.value(v).to_vec())
    }

    pub fn embed_comment(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let v = self.embed_comment_var(&mut g, ids)?;
        Ok(g.value(v).to_vec())
    }

    /// In-batch softmax loss: row i of the code×comment score matrix should pick column i.
    pub fn batch_loss(&self, g: &mut Graph<'_>, pairs: &[(&[usize], &[usize])]) -> Result<Var> {
        if pairs.len() < 2 {
            return Err(Error::Config("in-batch negatives need at least 2 pairs per batch".into()));
        }
        let mut codes = Vec::with_capacity(pairs.len());
        let mut comments = Vec::with_capacity(pairs.len());
        for (code, comment) in pairs {
            let c = self.embed_code_var(g, code)?;
            codes.push(g.transpose(c));
            let m = self.embed_comment_var(g, comment)?;
            comments.push(g.transpose(m));
        }
        let q = g.concat_cols(&codes)?;
        let q = g.transpose(q);
        let k = g.concat_cols(&comments)?;
        let k = g.transpose(k);
        let scores = g.matmul_nt(q, k)?;
        let targets: Vec<Option<usize>> = (0..pairs.len()).map(Some).collect();
        g.cross_entropy(scores, &targets)
    }

    /// Hash of the current weights, used to tie an index to the encoder that built it.
    pub fn version_tag(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.store.iter() {
            for b in name.bytes().chain(t.data().iter().flat_map(|x| (*x as f32).to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

/// Trains both encoders with in-batch negatives; returns the mean loss per epoch.
pub fn train_biencoder(encoder: &mut BiEncoder, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<f64>> {
    let cfg = encoder.config.clone();
    if cfg.batch_size < 2 {
        return Err(Error::Config("bi-encoder batch size must be at least 2".into()));
    }
    if pairs.len() < 2 {
        return Err(Error::Config("bi-encoder training needs at least 2 pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &encoder.store);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // a trailing singleton has no negatives; fold it into the previous batch
        let merged;
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
            let last = chunks.pop().unwrap_or_default();
            let prev = chunks.pop().unwrap_or_default();
            merged = [prev, last].concat();
            chunks.push(&merged);
        }
        let mut total = 0.0;
        for chunk in &chunks {
            let batch: Vec<(&[usize], &[usize])> = chunk.iter().map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice())).collect();
            encoder.store.zero_grads();
            let grads = {
                let mut g = Graph::with_params(&encoder.store);
                let loss = encoder.batch_loss(&mut g, &batch)?;
                total += g.scalar(loss);
                let grads = g.backward(loss)?;
                grads.param_grads(&g)
            };
            for (id, grad) in grads {
                encoder.store.accumulate_grad(id, &grad);
            }
            clip_grad_norm(&mut encoder.store, 1.0);
            adam.step(&mut encoder.store)?;
        }
        history.push(total / chunks.len() as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub vector: Vec<f64>,
    pub code_tokens: Vec<String>,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: u64,
    pub comment: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub scorer: ScorerKind,
    pub encoder_version: String,
    pub dim: usize,
    pub partitions: BTreeMap<IntentCategory, Vec<IndexEntry>>,
}

impl RetrievalIndex {
    /// Builds an index from records and their code vectors. Vectors are rounded
    /// to f32 so that a saved index scores identically after loading.
    pub fn build(
        records: &[CodeCommentRecord],
        vectors: Vec<Vec<f64>>,
        code_tokens: Vec<Vec<String>>,
        scorer: ScorerKind,
        encoder_version: String,
    ) -> Result<Self> {
        if vectors.len() != records.len() || code_tokens.len() != records.len() {
            return Err(Error::Shape(format!(
                "{} records, {} vectors, {} token lists",
                records.len(),
                vectors.len(),
                code_tokens.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        let mut partitions: BTreeMap<_, Vec<_>> = IntentCategory::GENERATABLE.iter().map(|&i| (i, Vec::new())).collect();
        for ((r, v), toks) in records.iter().zip(vectors).zip(code_tokens) {
            if r.intent.is_noise() {
                return Err(Error::InvalidIntent(format!("record {} is labelled others", r.id)));
            }
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("record {} has a bad vector", r.id)));
            }
            let vector = v.iter().map(|&x| x as f32 as f64).collect();
            partitions.entry(r.intent).or_default().push(IndexEntry {
                id: r.id,
                vector,
                code_tokens: toks,
                comment: r.comment.clone(),
            });
        }
        Ok(Self { scorer, encoder_version, dim, partitions })
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition(&self, intent: IntentCategory) -> &[IndexEntry] {
        self.partitions.get(&intent).map_or(&[], Vec::as_slice)
    }

    fn best(
        &self,
        intent: IntentCategory,
        exclude_id: Option<u64>,
        score: impl Fn(&IndexEntry) -> f64,
    ) -> Result<Exemplar> {
        let mut best: Option<(f64, &IndexEntry)> = None;
        for e in self.partition(intent) {
            if Some(e.id) == exclude_id {
                continue;
            }
            let s = score(e);
            let better = match best {
                None => true,
                Some((bs, be)) => s > bs || (s == bs && e.id < be.id),
            };
            if better {
                best = Some((s, e));
            }
        }
        best.map(|(score, e)| Exemplar { id: e.id, comment: e.comment.clone(), score })
            .ok_or_else(|| Error::NoExemplar(format!("no {intent} exemplar available")))
    }

    /// Highest dot product within the intent partition.
    pub fn retrieve(&self, query: &[f64], intent: IntentCategory, exclude_id: Option<u64>) -> Result<Exemplar> {
        if query.len() != self.dim && !self.partition(intent).is_empty() {
            return Err(Error::Shape(format!("query dim {} vs index dim {}", query.len(), self.dim)));
        }
        self.best(intent, exclude_id, |e| e.vector.iter().zip(query).map(|(a, b)| a * b).sum())
    }

    /// BM25 over code token bags within the intent partition. Each distinct
    /// query term contributes once.
    pub fn lexical_retrieve<S: AsRef<str>>(
        &self,
        query: &[S],
        intent: IntentCategory,
        exclude_id: Option<u64>,
    ) -> Result<Exemplar> {
        let docs = self.partition(intent);
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(|d| d.code_tokens.len()).sum::<usize>() as f64 / n.max(1.0);
        let mut terms: Vec<&str> = query.iter().map(AsRef::as_ref).collect();
        terms.sort_unstable();
        terms.dedup();
        let idf: HashMap<&str, f64> = terms
            .iter()
            .map(|&t| {
                let df = docs.iter().filter(|d| d.code_tokens.iter().any(|x| x == t)).count() as f64;
                (t, ((n - df + 0.5) / (df + 0.5) + 1.0).ln())
            })
            .collect();
        self.best(intent, exclude_id, |e| {
            let dl = e.code_tokens.len() as f64;
            terms
                .iter()
                .map(|&t| {
                    let f = e.code_tokens.iter().filter(|x| *x == t).count() as f64;
                    if f == 0.0 {
                        return 0.0;
                    }
                    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                    idf[t] * f * (BM25_K1 + 1.0) / (f + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
                })
                .sum()
        })
    }
}
