//! Corpus BLEU, ROUGE-L and an exact-match METEOR.
//!
//! METEOR here aligns only identical tokens (no stemming or synonyms), so
//! its values are not comparable with toolkit implementations.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::IntentCategory;
use crate::error::{Error, Result};

pub const METEOR_ALPHA: f64 = 0.1;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram counts pooled over all pairs,
/// uniform weights and the brevity penalty `min(1, e^(1 - r/c))`.
pub fn bleu<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!("{} candidates vs {} references", candidates.len(), references.len())));
    }
    if candidates.is_empty() || max_n == 0 {
        return Err(Error::Shape("BLEU needs at least one pair and max_n >= 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = (1.0 - r_len as f64 / c_len as f64).exp().min(1.0);
    Ok(bp * log_mean.exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Shape("ROUGE-L needs non-empty sequences".into()));
    }
    let a: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let b: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let lcs = lcs_len(&a, &b) as f64;
    let p = lcs / a.len() as f64;
    let r = lcs / b.len() as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Exact-match METEOR: greedy left-to-right unigram alignment, recall-weighted
/// harmonic mean `P*R / (a*R + (1-a)*P)` and fragmentation penalty
/// `g * (chunks/matches)^b`.
pub fn meteor<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Shape("METEOR needs non-empty sequences".into()));
    }
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, c) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == c.as_ref()) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let matches = alignment.len();
    if matches == 0 {
        return Ok(0.0);
    }
    let chunks = 1 + alignment.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * r + (1.0 - METEOR_ALPHA) * p);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    Ok(f_mean * (1.0 - penalty))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub overall: MetricScores,
    pub per_intent: BTreeMap<String, MetricScores>,
}

/// Corpus BLEU plus mean ROUGE-L/METEOR over `(candidate, reference)` pairs.
pub fn score_pairs<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<MetricScores> {
    let bleu = bleu(candidates, references, 4)?;
    let mut rouge = 0.0;
    let mut met = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        if !c.is_empty() && !r.is_empty() {
            rouge += rouge_l(c, r)?;
            met += meteor(c, r)?;
        }
    }
    let n = candidates.len() as f64;
    Ok(MetricScores { bleu, rouge_l: rouge / n, meteor: met / n, count: candidates.len() })
}

/// Overall scores and a breakdown by intent.
pub fn evaluate<T: AsRef<str> + Clone>(rows: &[(Vec<T>, Vec<T>, IntentCategory)]) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no pairs to evaluate".into()));
    }
    let split = |rows: &[&(Vec<T>, Vec<T>, IntentCategory)]| -> Result<MetricScores> {
        let c: Vec<Vec<T>> = rows.iter().map(|r| r.0.clone()).collect();
        let r: Vec<Vec<T>> = rows.iter().map(|r| r.1.clone()).collect();
        score_pairs(&c, &r)
    };
    let all: Vec<_> = rows.iter().collect();
    let overall = split(&all)?;
    let mut per_intent = BTreeMap::new();
    for intent in IntentCategory::ALL {
        let group: Vec<_> = rows.iter().filter(|r| r.2 == intent).collect();
        if !group.is_empty() {
            per_intent.insert(intent.name().to_string(), split(&group)?);
        }
    }
    Ok(MetricReport { overall, per_intent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let a = vec![toks("returns the sum of two ints"), toks("why we cache here")];
        assert!((bleu(&a, &a, 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&[toks("x y z w")], &[toks("a b c d")], 4).unwrap(), 0.0);
        assert!(bleu(&a, &a[..1], 4).is_err());
    }

    #[test]
    fn bleu_clipping_example() {
        let c = [toks("the the the the")];
        let r = [toks("the cat sat down")];
        assert_eq!(bleu(&c, &r, 4).unwrap(), 0.0);
        assert!((bleu(&c, &r, 1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // p1 = 1, c = 2, r = 4 -> BP = e^(1 - 2) with max_n = 1
        let v = bleu(&[toks("a b")], &[toks("a b c d")], 1).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        assert!((rouge_l(&toks("a b c d"), &toks("a c b d")).unwrap() - 0.75).abs() < 1e-12);
        assert!(rouge_l(&toks(""), &toks("a")).is_err());
    }

    #[test]
    fn meteor_examples() {
        assert!((meteor(&toks("a b c"), &toks("a b c")).unwrap() - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert_eq!(meteor(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        assert_eq!(meteor(&toks("a"), &toks("a")).unwrap(), 0.5);
        assert!(meteor(&toks("a"), &toks("")).is_err());
    }

    #[test]
    fn meteor_weights_recall_over_precision() {
        // high precision, low recall scores below low precision, high recall
        let short = meteor(&toks("a"), &toks("a b c d")).unwrap();
        let long = meteor(&toks("a x y z"), &toks("a")).unwrap();
        assert!(short < long);
    }

    #[test]
    fn report_breaks_down_by_intent() {
        let rows = vec![
            (toks("a b"), toks("a b"), IntentCategory::What),
            (toks("c"), toks("d"), IntentCategory::Why),
        ];
        let rep = evaluate(&rows).unwrap();
        assert_eq!(rep.overall.count, 2);
        assert_eq!(rep.per_intent["what"].rouge_l, 1.0);
        assert_eq!(rep.per_intent["why"].rouge_l, 0.0);
        assert!(evaluate::<String>(&[]).is_err());
    }
}
