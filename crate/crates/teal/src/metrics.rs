//! Text-output quality metrics: word error rate and sentence BLEU-4.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Levenshtein distance between two token slices (unit costs for
/// insertion, deletion, and substitution), via the classic rolling-row DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: whitespace-token edit distance divided by reference
/// length. The reference must be non-empty; the hypothesis may be anything.
pub fn wer(hypothesis: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Numeric("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Corpus-level WER over (hypothesis, reference) pairs: total edits over
/// total reference words.
pub fn corpus_wer<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, R)]) -> Result<f64> {
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    for (h, r) in pairs {
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        edits += edit_distance(&hw, &rw);
        ref_words += rw.len();
    }
    if ref_words == 0 {
        return Err(Error::Numeric("word error rate needs non-empty references".into()));
    }
    Ok(edits as f64 / ref_words as f64)
}

fn ngram_counts<'a>(words: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform 1..=4-gram weights, clipped counts, and a
/// brevity penalty against the closest reference length (ties prefer the
/// shorter reference). Orders 2..=4 use add-one smoothing on both the
/// clipped numerator and the denominator so short sentences still score.
pub fn bleu4<R: AsRef<str>>(hypothesis: &str, references: &[R]) -> Result<f64> {
    let refs: Vec<Vec<&str>> =
        references.iter().map(|r| r.as_ref().split_whitespace().collect()).collect();
    if refs.iter().all(|r| r.is_empty()) {
        return Err(Error::Numeric("sentence BLEU needs a non-empty reference".into()));
    }
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    if hyp.is_empty() {
        return Ok(0.0);
    }

    let mut log_prec_sum = 0.0f64;
    for n in 1..=4usize {
        let hyp_counts = ngram_counts(&hyp, n);
        let total: usize = hyp_counts.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &hyp_counts {
            let best = refs.iter().map(|r| *ngram_counts(r, n).get(gram).unwrap_or(&0)).max();
            clipped += count.min(best.unwrap_or(0));
        }
        let (num, den) = if n == 1 { (clipped, total) } else { (clipped + 1, total + 1) };
        if num == 0 {
            return Ok(0.0);
        }
        log_prec_sum += (num as f64 / den as f64).ln();
    }

    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("at least one reference");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_prec_sum / 4.0).exp())
}
