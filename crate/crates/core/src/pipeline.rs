//! Trained artifacts bundled for inference, their checkpoint encoding, and
//! the end-to-end `generate` path.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::coin::{ClassifierConfig, IntentClassifier};
use crate::corpus::{preprocess_code, tokenize, CodeCommentRecord, IntentCategory, PreprocessedCode, Vocabulary};
use crate::decoding::{beam_search, DomeScorer};
use crate::error::{Error, Result};
use crate::isa::AttentionTrace;
use crate::metrics::{evaluate, MetricReport};
use crate::model::Dome;
use crate::retriever::{BiEncoder, Exemplar, IndexEntry, RetrievalIndex, RetrieverConfig, ScorerKind};
use crate::tensor::{Adam, ParameterStore};
use crate::trainer::TrainConfig;

pub const DOME_KIND: &str = "dome";
pub const COIN_KIND: &str = "coin";

#[derive(Debug, Clone)]
pub struct ModelBundle {
    /// Training configuration with vocabulary sizes resolved to the built vocabularies.
    pub config: TrainConfig,
    pub model: Dome,
    pub store: ParameterStore,
    pub code_vocab: Vocabulary,
    pub comment_vocab: Vocabulary,
    /// Present when the index is dense.
    pub retriever: Option<BiEncoder>,
    pub index: RetrievalIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub comment: String,
    pub intent: IntentCategory,
    pub exemplar_id: Option<u64>,
    pub score: f64,
    #[serde(skip)]
    pub tokens: Vec<usize>,
}

/// Optimizer and progress state carried in a training checkpoint.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub epoch: usize,
    pub history: Vec<f64>,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    scorer: ScorerKind,
    encoder_version: String,
    dim: usize,
    entries: BTreeMap<IntentCategory, Vec<EntryMeta>>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    id: u64,
    code_tokens: Vec<String>,
    comment: String,
}

#[derive(Serialize, Deserialize)]
struct DomePayload {
    config: TrainConfig,
    retriever: Option<RetrieverConfig>,
    code_vocab: Vec<String>,
    comment_vocab: Vec<String>,
    index: IndexMeta,
    history: Vec<f64>,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: crate::tensor::AdamConfig,
    step: u64,
}

impl ModelBundle {
    pub fn preprocess(&self, code: &str) -> Result<PreprocessedCode> {
        let m = &self.config.model;
        preprocess_code(code, &self.code_vocab, m.max_statements, m.max_statement_len)
    }

    pub fn comment_ids(&self, comment: &str) -> Vec<usize> {
        self.comment_vocab.encode(&tokenize(comment))
    }

    /// Top-1 exemplar for `code` within `intent`, by the index's scorer.
    pub fn retrieve(&self, code: &str, intent: IntentCategory, exclude_id: Option<u64>) -> Result<Exemplar> {
        match (self.index.scorer, &self.retriever) {
            (ScorerKind::Dense, Some(enc)) => {
                let pre = self.preprocess(code)?;
                self.index.retrieve(&enc.embed_code(&pre.token_ids)?, intent, exclude_id)
            }
            (ScorerKind::Dense, None) => Err(Error::State("dense index without a retriever".into())),
            (ScorerKind::Lexical, _) => self.index.lexical_retrieve(&tokenize(code), intent, exclude_id),
        }
    }

    /// Exemplar comment ids for `code`, empty when the partition has nothing to offer.
    pub fn exemplar_for(&self, code: &str, intent: IntentCategory, exclude_id: Option<u64>) -> Result<(Option<Exemplar>, Vec<usize>)> {
        match self.retrieve(code, intent, exclude_id) {
            Ok(e) => {
                let mut ids = self.comment_ids(&e.comment);
                ids.truncate(self.config.model.max_comment_len);
                Ok((Some(e), ids))
            }
            Err(Error::NoExemplar(_)) => Ok((None, Vec::new())),
            Err(e) => Err(e),
        }
    }

    /// Beam-decodes a comment from explicit exemplar ids.
    pub fn decode_with_exemplar(
        &self,
        code: &PreprocessedCode,
        intent: IntentCategory,
        exemplar: &[usize],
        beam: usize,
    ) -> Result<(Vec<usize>, f64)> {
        let source = self.model.encode_source(&self.store, code, intent, exemplar)?;
        let scorer = DomeScorer { model: &self.model, store: &self.store, source: &source };
        let hyp = beam_search(&scorer, self.config.model.max_comment_len, beam)?;
        let score = hyp.score();
        Ok((hyp.tokens, score))
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        self.comment_vocab.decode(ids).join(" ")
    }

    /// Preprocess, retrieve, encode, beam-decode and detokenize.
    pub fn generate(&self, code: &str, intent: IntentCategory, beam: usize) -> Result<Generation> {
        if intent.is_noise() {
            return Err(Error::InvalidIntent(format!("{intent} comments are not generated")));
        }
        let pre = self.preprocess(code)?;
        let (exemplar, ids) = self.exemplar_for(code, intent, None)?;
        let (tokens, score) = self.decode_with_exemplar(&pre, intent, &ids, beam)?;
        Ok(Generation { comment: self.detokenize(&tokens), intent, exemplar_id: exemplar.map(|e| e.id), score, tokens })
    }

    /// Attention maps of every block and head while re-reading `generation`.
    pub fn attention_traces(&self, code: &str, intent: IntentCategory, generation: &Generation) -> Result<Vec<AttentionTrace>> {
        let pre = self.preprocess(code)?;
        let (_, ids) = self.exemplar_for(code, intent, None)?;
        let source = self.model.encode_source(&self.store, &pre, intent, &ids)?;
        let prefix: Vec<usize> = generation.tokens.iter().copied().filter(|&t| t != crate::corpus::EOS).collect();
        let (_, state) = self.model.decoder_state(&self.store, &source, &prefix, true)?;
        Ok(state.trace.unwrap_or_default())
    }

    /// Generates for every record and scores against its comment.
    pub fn evaluate(&self, test: &[CodeCommentRecord], beam: usize) -> Result<MetricReport> {
        if test.is_empty() {
            return Err(Error::EmptyInput("test set is empty".into()));
        }
        let rows = test
            .iter()
            .filter(|r| !r.intent.is_noise())
            .map(|r| {
                let g = self.generate(&r.code, r.intent, beam)?;
                let cand = self.comment_vocab.decode(&g.tokens);
                Ok((cand, tokenize(&r.comment), r.intent))
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate(&rows)
    }

    pub fn to_checkpoint(&self, state: Option<&TrainingState>) -> Result<Checkpoint> {
        let entries = self
            .index
            .partitions
            .iter()
            .map(|(&intent, es)| {
                let metas = es
                    .iter()
                    .map(|e| EntryMeta { id: e.id, code_tokens: e.code_tokens.clone(), comment: e.comment.clone() })
                    .collect();
                (intent, metas)
            })
            .collect();
        let payload = DomePayload {
            config: self.config.clone(),
            retriever: self.retriever.as_ref().map(|r| r.config.clone()),
            code_vocab: self.code_vocab.tokens().to_vec(),
            comment_vocab: self.comment_vocab.tokens().to_vec(),
            index: IndexMeta {
                scorer: self.index.scorer,
                encoder_version: self.index.encoder_version.clone(),
                dim: self.index.dim,
                entries,
            },
            history: state.map(|s| s.history.clone()).unwrap_or_default(),
            adam: state.map(|s| AdamMeta { config: s.adam.config, step: s.adam.step }),
        };
        let epoch = state.map_or(0, |s| s.epoch);
        let mut ckpt = Checkpoint::new(DOME_KIND, self.config.seed, epoch, serde_json::to_value(payload)?);
        ckpt.push_store("dome/", &self.store)?;
        if let Some(r) = &self.retriever {
            ckpt.push_store("retriever/", &r.store)?;
        }
        for (intent, es) in &self.index.partitions {
            let flat: Vec<f64> = es.iter().flat_map(|e| e.vector.iter().copied()).collect();
            ckpt.push(&format!("index/{intent}"), es.len(), self.index.dim, &flat)?;
        }
        if let Some(s) = state {
            for (id, name) in self.store.names().iter().enumerate() {
                let (r, c) = self.store.get(id).dims2();
                ckpt.push(&format!("adam.m/{name}"), r, c, &s.adam.m[id])?;
                ckpt.push(&format!("adam.v/{name}"), r, c, &s.adam.v[id])?;
            }
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Option<TrainingState>)> {
        if ckpt.kind != DOME_KIND {
            return Err(Error::CorruptCheckpoint(format!("expected a {DOME_KIND} checkpoint, found {}", ckpt.kind)));
        }
        let payload: DomePayload = serde_json::from_value(ckpt.payload.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("payload: {e}")))?;
        let code_vocab = Vocabulary::from_token_list(payload.code_vocab)?;
        let comment_vocab = Vocabulary::from_token_list(payload.comment_vocab)?;
        let config = payload.config;
        let mut store = ParameterStore::new();
        let model = Dome::new(config.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.restore_store("dome/", &mut store)?;
        let retriever = match payload.retriever {
            Some(rc) => {
                let mut enc = BiEncoder::new(rc)?;
                ckpt.restore_store("retriever/", &mut enc.store)?;
                Some(enc)
            }
            None => None,
        };
        let meta = payload.index;
        let mut partitions = BTreeMap::new();
        for (intent, metas) in meta.entries {
            let block = ckpt.block(&format!("index/{intent}"))?;
            if block.meta.rows != metas.len() || (block.meta.rows > 0 && block.meta.cols != meta.dim) {
                return Err(Error::CorruptCheckpoint(format!("index block for {intent} does not match its entries")));
            }
            let entries = metas
                .into_iter()
                .enumerate()
                .map(|(i, m)| IndexEntry {
                    id: m.id,
                    vector: block.data[i * meta.dim..(i + 1) * meta.dim].iter().map(|&v| v as f64).collect(),
                    code_tokens: m.code_tokens,
                    comment: m.comment,
                })
                .collect();
            partitions.insert(intent, entries);
        }
        let index = RetrievalIndex { scorer: meta.scorer, encoder_version: meta.encoder_version, dim: meta.dim, partitions };
        if let Some(r) = &retriever {
            if r.version_tag() != index.encoder_version {
                return Err(Error::CorruptCheckpoint("index was built by a different retriever".into()));
            }
        }
        let state = match payload.adam {
            Some(a) => {
                let mut adam = Adam::new(a.config, &store);
                adam.step = a.step;
                for (id, name) in store.names().iter().enumerate() {
                    adam.m[id] = ckpt.block_f64(&format!("adam.m/{name}"))?;
                    adam.v[id] = ckpt.block_f64(&format!("adam.v/{name}"))?;
                }
                Some(TrainingState { epoch: ckpt.epoch, history: payload.history, adam })
            }
            None => None,
        };
        Ok((Self { config, model, store, code_vocab, comment_vocab, retriever, index }, state))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}

pub fn classifier_to_checkpoint(clf: &IntentClassifier, history: &[f64]) -> Result<Checkpoint> {
    let payload = json!({
        "config": clf.config,
        "vocab": clf.vocab.tokens(),
        "history": history,
    });
    let mut ckpt = Checkpoint::new(COIN_KIND, clf.config.seed, history.len(), payload);
    ckpt.push_store("coin/", &clf.store)?;
    Ok(ckpt)
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<IntentClassifier> {
    if ckpt.kind != COIN_KIND {
        return Err(Error::CorruptCheckpoint(format!("expected a {COIN_KIND} checkpoint, found {}", ckpt.kind)));
    }
    let bad = |e: serde_json::Error| Error::CorruptCheckpoint(format!("payload: {e}"));
    let config: ClassifierConfig = serde_json::from_value(ckpt.payload.get("config").cloned().unwrap_or(Value::Null)).map_err(bad)?;
    let tokens: Vec<String> = serde_json::from_value(ckpt.payload.get("vocab").cloned().unwrap_or(Value::Null)).map_err(bad)?;
    let mut clf = IntentClassifier::new(config, Vocabulary::from_token_list(tokens)?)?;
    ckpt.restore_store("coin/", &mut clf.store)?;
    Ok(clf)
}
