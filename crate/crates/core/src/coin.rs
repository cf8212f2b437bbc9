//! Comment-intent classifier: a small encoder over
//! `[CLS] comment [SEP] code [SEP]`, pooled at `[CLS]`, with a two-layer MLP head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CodeCommentRecord, IntentCategory, UnlabeledRecord, Vocabulary, CLS, SEP};
use crate::error::{Error, Result};
use crate::model::softmax;
use crate::nn::{EncoderShape, Linear, TransformerEncoder};
use crate::tensor::{clip_grad_norm, set_grads, weighted_grads, Adam, AdamConfig, Graph, ParameterStore, Var};

pub const CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            mlp_hidden: 64,
            classes: CLASSES,
            max_seq_len: 128,
            dropout: 0.1,
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            vocab_size: 20_000,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != CLASSES {
            return Err(Error::Config(format!("classifier has {CLASSES} classes, got {}", self.classes)));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even and divisible by heads".into()));
        }
        if self.max_seq_len < 3 || self.batch_size == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("max_seq_len >= 3, batch_size and mlp_hidden >= 1".into()));
        }
        crate::tensor::check_dropout_rate(self.dropout)
    }
}

/// `[CLS] comment [SEP] code [SEP]`, trimming code first, then comment, to fit.
pub fn build_classifier_input<S: AsRef<str>>(comment: &[S], code: &[S], vocab: &Vocabulary, max_seq_len: usize) -> Vec<usize> {
    let budget = max_seq_len.saturating_sub(3);
    let comment = &comment[..comment.len().min(budget)];
    let code = &code[..code.len().min(budget - comment.len())];
    let mut ids = Vec::with_capacity(comment.len() + code.len() + 3);
    ids.push(CLS);
    ids.extend(vocab.encode(comment));
    ids.push(SEP);
    ids.extend(vocab.encode(code));
    ids.push(SEP);
    ids
}

/// Lowercased word-piece tokens for both sides of a record.
pub fn record_tokens(comment: &str, code: &str) -> (Vec<String>, Vec<String>) {
    (crate::corpus::tokenize(comment), crate::corpus::tokenize(code))
}

#[derive(Debug, Clone)]
pub struct IntentClassifier {
    pub config: ClassifierConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
    encoder: TransformerEncoder,
    hidden: Linear,
    out: Linear,
}

impl IntentClassifier {
    pub fn new(config: ClassifierConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let shape = EncoderShape {
            vocab: vocab.len(),
            d_model: config.d_model,
            heads: config.heads,
            blocks: config.blocks,
            ffn_hidden: 2 * config.d_model,
            max_len: config.max_seq_len,
        };
        let encoder = TransformerEncoder::new(&mut store, "encoder", shape, &mut rng)?;
        let hidden = Linear::new(&mut store, "mlp.hidden", config.d_model, config.mlp_hidden, true, &mut rng)?;
        let out = Linear::new(&mut store, "mlp.out", config.mlp_hidden, CLASSES, true, &mut rng)?;
        Ok(Self { config, vocab, store, encoder, hidden, out })
    }

    pub fn input_ids(&self, comment: &str, code: &str) -> Vec<usize> {
        let (c, k) = record_tokens(comment, code);
        build_classifier_input(&c, &k, &self.vocab, self.config.max_seq_len)
    }

    /// 1×6 class logits.
    pub fn logits(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let dropout = if g.is_training() { self.config.dropout } else { 0.0 };
        let h = self.encoder.forward(g, ids, dropout)?;
        let cls = g.gather(h, &[0])?;
        let x = self.hidden.forward(g, cls)?;
        let x = g.relu(x);
        self.out.forward(g, x)
    }

    pub fn loss(&self, g: &mut Graph<'_>, ids: &[usize], label: IntentCategory) -> Result<Var> {
        let logits = self.logits(g, ids)?;
        g.cross_entropy(logits, &[Some(label.index())])
    }

    pub fn classify(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.logits(&mut g, ids)?;
        Ok(softmax(g.value(logits)))
    }

    pub fn predict(&self, comment: &str, code: &str) -> Result<IntentCategory> {
        let probs = self.classify(&self.input_ids(comment, code))?;
        let best = probs.iter().enumerate().fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
        IntentCategory::from_index(best).ok_or_else(|| Error::State(format!("class {best} out of range")))
    }

    /// Sets the output layer to zero so every prediction is uniform.
    pub fn zero_head(&mut self) {
        for id in std::iter::once(self.out.w).chain(self.out.b) {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Minibatch Adam on cross-entropy; returns the mean loss per epoch.
pub fn train_classifier(clf: &mut IntentClassifier, data: &[CodeCommentRecord]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("classifier training set is empty".into()));
    }
    let cfg = clf.config.clone();
    let inputs: Vec<(Vec<usize>, IntentCategory)> = data.iter().map(|r| (clf.input_ids(&r.comment, &r.code), r.intent)).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &clf.store);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&(Vec<usize>, IntentCategory)> = chunk.iter().map(|&i| &inputs[i]).collect();
            let w = 1.0 / batch.len() as f64;
            let train_seed = (cfg.dropout > 0.0).then_some(cfg.seed ^ ((epoch as u64) << 40) ^ ((step as u64) << 20));
            let model = &*clf;
            let (loss, grads) =
                weighted_grads(&model.store, &batch, train_seed, |g, _, (ids, label)| Ok((model.loss(g, ids, *label)?, w)))?;
            total += loss * batch.len() as f64;
            set_grads(&mut clf.store, grads);
            clip_grad_norm(&mut clf.store, 1.0);
            adam.step(&mut clf.store)?;
        }
        history.push(total / inputs.len() as f64);
    }
    Ok(history)
}

/// Shuffled index folds; sizes differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("k = {k} folds for {n} items")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, item) in idx.into_iter().enumerate() {
        folds[i % k].push(item);
    }
    Ok(folds)
}

pub fn kfold_split<T: Clone>(data: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    Ok(kfold_indices(data.len(), k, seed)?.into_iter().map(|f| f.into_iter().map(|i| data[i].clone()).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub intent: IntentCategory,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: [[usize; CLASSES]; CLASSES],
}

impl EvaluationReport {
    pub fn from_confusion(confusion: [[usize; CLASSES]; CLASSES]) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassMetrics> = IntentCategory::ALL
            .iter()
            .enumerate()
            .map(|(c, &intent)| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                ClassMetrics { intent, precision, recall, f1, support }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / CLASSES as f64;
        Self {
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        }
    }

    pub fn from_predictions(truth: &[IntentCategory], predicted: &[IntentCategory]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut confusion = [[0; CLASSES]; CLASSES];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }
}

pub fn evaluate_classifier(clf: &IntentClassifier, test: &[CodeCommentRecord]) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::EmptyInput("classifier test set is empty".into()));
    }
    let predicted = test.iter().map(|r| clf.predict(&r.comment, &r.code)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<_> = test.iter().map(|r| r.intent).collect();
    EvaluationReport::from_predictions(&truth, &predicted)
}

/// Assigns every record its argmax intent. Existing labels are overwritten.
pub fn auto_label(clf: &IntentClassifier, records: &[UnlabeledRecord]) -> Result<Vec<CodeCommentRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(CodeCommentRecord {
                id: r.id,
                code: r.code.clone(),
                comment: r.comment.clone(),
                intent: clf.predict(&r.comment, &r.code)?,
            })
        })
        .collect()
}
