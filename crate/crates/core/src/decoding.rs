//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::model::{Dome, EncodedSource};
use crate::tensor::ParameterStore;

/// Next-token log-probabilities given the tokens generated so far.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    fn eos(&self) -> usize {
        EOS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Average log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.log_prob / self.tokens.len() as f64
    }
}

/// Highest value first, then lexicographically smallest token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token until `[EOS]` or `max_len` tokens.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0 };
    while hyp.tokens.len() < max_len {
        let lp = scorer.log_probs(&hyp.tokens)?;
        let tok = argmax(&lp);
        hyp.tokens.push(tok);
        hyp.log_prob += lp[tok];
        if tok == scorer.eos() {
            break;
        }
    }
    Ok(hyp)
}

/// Beam search ranked by average log-probability.
///
/// Each step expands every live hypothesis by every token and keeps the best
/// `beam_size` candidates by cumulative log-probability (all live hypotheses
/// share a length, so this equals ranking by the average). Candidates ending
/// in `[EOS]` retire; live ones retire at `max_len`. The finished hypothesis
/// with the best average wins; ties go to the smaller token sequence.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, max_len: usize, beam_size: usize) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * 8);
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis { tokens, log_prob: h.log_prob + l });
            }
        }
        candidates.sort_by(|a, b| rank((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
        candidates.truncate(beam_size);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos) || c.tokens.len() >= max_len {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.extend(live);
    finished
        .into_iter()
        .min_by(|a, b| rank((a.score(), &a.tokens), (b.score(), &b.tokens)))
        .ok_or_else(|| Error::Config("max_len must be at least 1".into()))
}

/// Adapts a model and its cached encoder outputs to [`StepScorer`].
pub struct DomeScorer<'a> {
    pub model: &'a Dome,
    pub store: &'a ParameterStore,
    pub source: &'a EncodedSource,
}

impl StepScorer for DomeScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.next_log_probs(self.store, self.source, prefix)
    }
}
