//! DOME training: configuration, padded batches, teacher forcing and the
//! epoch loop with per-epoch checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{build_vocab, preprocess_code, tokenize, CodeCommentRecord, IntentCategory, PreprocessedCode, Side, PAD};
use crate::error::{Error, Result};
use crate::model::{Dome, ModelConfig};
use crate::pipeline::{ModelBundle, TrainingState};
use crate::retriever::{train_biencoder, BiEncoder, RetrievalIndex, RetrieverConfig, ScorerKind};
use crate::tensor::{clip_grad_norm, set_grads, weighted_grads, Adam, AdamConfig, Graph, ParameterStore};

pub const SEED_ENV: &str = "DOME_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub scorer: ScorerKind,
    pub clip_norm: f64,
    pub model: ModelConfig,
    pub retriever: RetrieverConfig,
    /// Written after every epoch when set.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            lr: 1e-4,
            seed: 0,
            scorer: ScorerKind::Dense,
            clip_norm: 1.0,
            model: ModelConfig::default(),
            retriever: RetrieverConfig::default(),
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        self.model.validate()
    }

    /// Reads a JSON config; `DOME_SEED` overrides the seed when set.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// One training pair ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub code: PreprocessedCode,
    pub intent: IntentCategory,
    pub exemplar: Vec<usize>,
    pub target: Vec<usize>,
}

/// Examples padded with `[PAD]` to the batch maximum; masks mark real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub intents: Vec<IntentCategory>,
    pub code: Vec<Vec<usize>>,
    pub code_mask: Vec<Vec<bool>>,
    pub segments: Vec<Vec<(usize, usize)>>,
    pub exemplar: Vec<Vec<usize>>,
    pub exemplar_mask: Vec<Vec<bool>>,
    pub target: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
}

fn pad(rows: &[&[usize]], extra: usize) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0) + extra;
    rows.iter()
        .map(|r| {
            let mut ids = r.to_vec();
            let mut mask = vec![true; r.len()];
            ids.resize(width, PAD);
            mask.resize(width, false);
            (ids, mask)
        })
        .unzip()
}

fn unpad(ids: &[usize], mask: &[bool]) -> Vec<usize> {
    ids.iter().zip(mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect()
}

impl Batch {
    pub fn from_examples(examples: &[&Example], extra_padding: usize) -> Self {
        let (code, code_mask) = pad(&examples.iter().map(|e| e.code.token_ids.as_slice()).collect::<Vec<_>>(), extra_padding);
        let (exemplar, exemplar_mask) = pad(&examples.iter().map(|e| e.exemplar.as_slice()).collect::<Vec<_>>(), extra_padding);
        let (target, target_mask) = pad(&examples.iter().map(|e| e.target.as_slice()).collect::<Vec<_>>(), extra_padding);
        Self {
            ids: examples.iter().map(|e| e.id).collect(),
            intents: examples.iter().map(|e| e.intent).collect(),
            code,
            code_mask,
            segments: examples.iter().map(|e| e.code.segments.clone()).collect(),
            exemplar,
            exemplar_mask,
            target,
            target_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The unpadded examples.
    pub fn examples(&self) -> Vec<Example> {
        (0..self.len())
            .map(|i| Example {
                id: self.ids[i],
                code: PreprocessedCode { token_ids: unpad(&self.code[i], &self.code_mask[i]), segments: self.segments[i].clone() },
                intent: self.intents[i],
                exemplar: unpad(&self.exemplar[i], &self.exemplar_mask[i]),
                target: unpad(&self.target[i], &self.target_mask[i]),
            })
            .collect()
    }
}

/// Shuffles by `seed` and cuts into padded batches of `batch_size` (the last may be shorter).
pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no training examples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch::from_examples(&c.iter().map(|&i| &examples[i]).collect::<Vec<_>>(), 0))
        .collect())
}

/// Mean token cross-entropy over the batch's real target positions, and its
/// gradient for every parameter. `train_seed` enables dropout.
pub fn teacher_forcing_step(
    model: &Dome,
    store: &ParameterStore,
    batch: &Batch,
    train_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let examples = batch.examples();
    let counts: Vec<usize> = examples.iter().map(|e| model.shift_target(&e.target).1.len()).collect();
    let total: usize = counts.iter().sum();
    weighted_grads(store, &examples, train_seed, |g, i, e| {
        let (loss, _) = model.teacher_forcing_loss(g, &e.code, e.intent, &e.exemplar, &e.target)?;
        Ok((loss, counts[i] as f64 / total as f64))
    })
}

/// Loss of a batch without gradients.
pub fn batch_loss(model: &Dome, store: &ParameterStore, batch: &Batch) -> Result<f64> {
    let examples = batch.examples();
    let mut sum = 0.0;
    let mut total = 0;
    for e in &examples {
        let mut g = Graph::with_params(store);
        let (loss, n) = model.teacher_forcing_loss(&mut g, &e.code, e.intent, &e.exemplar, &e.target)?;
        sum += g.scalar(loss) * n as f64;
        total += n;
    }
    Ok(sum / total as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<f64>,
}

fn check_corpus(corpus: &[CodeCommentRecord]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    if let Some(r) = corpus.iter().find(|r| r.intent.is_noise()) {
        return Err(Error::InvalidIntent(format!("record {} is labelled others; filter the corpus first", r.id)));
    }
    Ok(())
}

/// Vocabularies, retriever, index and a freshly initialised model.
pub fn build_bundle(corpus: &[CodeCommentRecord], config: &TrainConfig) -> Result<ModelBundle> {
    check_corpus(corpus)?;
    config.validate()?;
    let mut config = config.clone();
    let code_vocab = build_vocab(corpus, Side::Code, config.model.code_vocab_size)?;
    let comment_vocab = build_vocab(corpus, Side::Comment, config.model.comment_vocab_size)?;
    config.model.code_vocab_size = code_vocab.len();
    config.model.comment_vocab_size = comment_vocab.len();
    let m = &config.model;
    let codes = corpus
        .iter()
        .map(|r| preprocess_code(&r.code, &code_vocab, m.max_statements, m.max_statement_len))
        .collect::<Result<Vec<_>>>()?;
    let code_tokens: Vec<Vec<String>> = corpus.iter().map(|r| tokenize(&r.code)).collect();
    let (retriever, vectors, version) = match config.scorer {
        ScorerKind::Dense => {
            let mut rc = config.retriever.clone();
            rc.code_vocab_size = code_vocab.len();
            rc.comment_vocab_size = comment_vocab.len();
            rc.max_len = m.max_code_len().max(m.max_comment_len);
            rc.seed = config.seed;
            config.retriever = rc.clone();
            let mut enc = BiEncoder::new(rc)?;
            if corpus.len() >= 2 && enc.config.epochs > 0 {
                let pairs: Vec<(Vec<usize>, Vec<usize>)> = corpus
                    .iter()
                    .zip(&codes)
                    .map(|(r, c)| (c.token_ids.clone(), comment_vocab.encode(&tokenize(&r.comment))))
                    .collect();
                train_biencoder(&mut enc, &pairs)?;
            }
            // frozen and stored as f32, so the reloaded encoder reproduces these vectors
            enc.store.quantize_f32();
            let vectors = codes.iter().map(|c| enc.embed_code(&c.token_ids)).collect::<Result<Vec<_>>>()?;
            let version = enc.version_tag();
            (Some(enc), vectors, version)
        }
        ScorerKind::Lexical => (None, vec![Vec::new(); corpus.len()], "lexical".to_string()),
    };
    let index = RetrievalIndex::build(corpus, vectors, code_tokens, config.scorer, version)?;
    let mut store = ParameterStore::new();
    let model = Dome::new(config.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    store.quantize_f32();
    Ok(ModelBundle { config, model, store, code_vocab, comment_vocab, retriever, index })
}

/// Training examples with self-excluded exemplars.
pub fn build_examples(bundle: &ModelBundle, corpus: &[CodeCommentRecord]) -> Result<Vec<Example>> {
    corpus
        .iter()
        .map(|r| {
            let (_, exemplar) = bundle.exemplar_for(&r.code, r.intent, Some(r.id))?;
            Ok(Example {
                id: r.id,
                code: bundle.preprocess(&r.code)?,
                intent: r.intent,
                exemplar,
                target: bundle.comment_ids(&r.comment),
            })
        })
        .collect()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(epoch as u64)
}

/// Trains from scratch.
pub fn train_dome(corpus: &[CodeCommentRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    let bundle = build_bundle(corpus, config)?;
    let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &bundle.store);
    run_epochs(bundle, TrainingState { epoch: 0, history: Vec::new(), adam }, corpus, config.epochs)
}

/// Continues a run from a training checkpoint up to `epochs` total epochs.
pub fn resume_dome(corpus: &[CodeCommentRecord], checkpoint: &Checkpoint, epochs: usize) -> Result<TrainOutcome> {
    check_corpus(corpus)?;
    let (bundle, state) = ModelBundle::from_checkpoint(checkpoint)?;
    let state = state.ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no optimizer state".into()))?;
    run_epochs(bundle, state, corpus, epochs)
}

fn run_epochs(mut bundle: ModelBundle, mut state: TrainingState, corpus: &[CodeCommentRecord], epochs: usize) -> Result<TrainOutcome> {
    let examples = build_examples(&bundle, corpus)?;
    let cfg = bundle.config.clone();
    let dropout = cfg.model.dropout > 0.0;
    while state.epoch < epochs {
        let seed = epoch_seed(cfg.seed, state.epoch);
        let batches = make_batches(&examples, cfg.batch_size, seed)?;
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let train_seed = dropout.then_some(seed ^ ((step as u64 + 1) << 32));
            let (loss, grads) = teacher_forcing_step(&bundle.model, &bundle.store, batch, train_seed)?;
            total += loss;
            set_grads(&mut bundle.store, grads);
            clip_grad_norm(&mut bundle.store, cfg.clip_norm);
            state.adam.step(&mut bundle.store)?;
        }
        // checkpoints hold f32; rounding here makes a resumed run identical to an uninterrupted one
        bundle.store.quantize_f32();
        state.adam.quantize_f32();
        state.history.push(total / batches.len() as f64);
        state.epoch += 1;
        if let Some(path) = &cfg.checkpoint {
            bundle.to_checkpoint(Some(&state))?.save(path)?;
        }
    }
    Ok(TrainOutcome { bundle, history: state.history })
}
