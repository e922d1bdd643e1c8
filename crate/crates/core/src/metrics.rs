//! BLEU and ROUGE-N over integer token sequences, and the corpus report.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::{Responder, Token, TokenSequence};
use crate::scalar::Scalar;
use crate::trust::TrustEvaluator;

type NgramCounts<'a> = HashMap<&'a [Token], usize>;

fn ngram_counts(seq: &[Token], n: usize) -> NgramCounts<'_> {
    let mut counts = HashMap::new();
    if n == 0 || seq.len() < n {
        return counts;
    }
    for g in seq.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

pub fn brevity_penalty<T: Scalar>(candidate_len: usize, reference_len: usize) -> Result<T> {
    if candidate_len == 0 || reference_len == 0 {
        return Err(FedError::invalid("brevity penalty needs positive lengths"));
    }
    if candidate_len > reference_len {
        Ok(T::one())
    } else {
        let ratio = T::from_count(reference_len) / T::from_count(candidate_len);
        Ok((T::one() - ratio).exp())
    }
}

/// Reference length closest to the candidate length, preferring the shorter on ties.
fn closest_ref_len(candidate_len: usize, references: &[TokenSequence]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(candidate_len), l))
        .expect("non-empty references")
}

/// Clipped n-gram precision as a `(matched, total)` count pair.
fn modified_precision(candidate: &[Token], references: &[TokenSequence], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    let ref_counts: Vec<NgramCounts<'_>> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let matched = cand
        .iter()
        .map(|(g, &c)| {
            let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            c.min(max_ref)
        })
        .sum();
    (matched, total)
}

/// Sentence BLEU with uniform weights over orders `1..=max_n` and no
/// smoothing: any zero precision makes the score zero.
pub fn bleu<T: Scalar>(candidate: &[Token], references: &[TokenSequence], max_n: usize) -> Result<T> {
    if candidate.is_empty() {
        return Err(FedError::invalid("BLEU candidate must be non-empty"));
    }
    if references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(FedError::invalid("BLEU needs at least one non-empty reference"));
    }
    if !(1..=4).contains(&max_n) {
        return Err(FedError::invalid(format!("BLEU order {max_n} outside 1..=4")));
    }
    // exp(sum w_n ln p_n) evaluated as prod p_n^w_n, which is exact for one order
    let weight = T::one() / T::from_count(max_n);
    let mut geo = T::one();
    for n in 1..=max_n {
        let (matched, total) = modified_precision(candidate, references, n);
        if matched == 0 || total == 0 {
            return Ok(T::zero());
        }
        let p = T::from_count(matched) / T::from_count(total);
        geo = geo * p.powf(weight);
    }
    let bp: T = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references))?;
    Ok((bp * geo).clamp_unit())
}

/// ROUGE-N recall: clipped matched reference n-grams over total reference
/// n-grams, summed over every reference.
pub fn rouge_n<T: Scalar>(candidate: &[Token], references: &[TokenSequence], n: usize) -> Result<T> {
    if n == 0 {
        return Err(FedError::invalid("ROUGE order must be at least 1"));
    }
    if references.is_empty() {
        return Err(FedError::invalid("ROUGE needs at least one reference"));
    }
    if references.iter().all(|r| r.len() < n) {
        return Err(FedError::invalid(format!("every reference is shorter than n = {n}")));
    }
    let cand = ngram_counts(candidate, n);
    let mut matched = 0usize;
    let mut total = 0usize;
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            total += c;
            matched += c.min(cand.get(g).copied().unwrap_or(0));
        }
    }
    Ok(T::from_count(matched) / T::from_count(total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricReport<T> {
    pub bleu_1: T,
    pub bleu_4: T,
    pub rouge_1: T,
    pub rouge_2: T,
    pub trust: T,
    pub n_pairs: usize,
    /// How corpus scores were formed from per-pair scores.
    pub averaging: String,
}

pub const REPORT_COLUMNS: [&str; 5] = ["BLEU-1", "BLEU-4", "ROUGE-1", "ROUGE-2", "trust"];

impl<T: Scalar> MetricReport<T> {
    pub fn values(&self) -> [T; 5] {
        [self.bleu_1, self.bleu_4, self.rouge_1, self.rouge_2, self.trust]
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport<T>]) -> Result<Self> {
        if reports.is_empty() {
            return Err(FedError::invalid("no reports to average"));
        }
        let k = T::from_count(reports.len());
        let avg = |f: fn(&MetricReport<T>) -> T| reports.iter().map(f).fold(T::zero(), |a, b| a + b) / k;
        Ok(Self {
            bleu_1: avg(|r| r.bleu_1),
            bleu_4: avg(|r| r.bleu_4),
            rouge_1: avg(|r| r.rouge_1),
            rouge_2: avg(|r| r.rouge_2),
            trust: avg(|r| r.trust),
            n_pairs: reports.iter().map(|r| r.n_pairs).sum(),
            averaging: reports[0].averaging.clone(),
        })
    }
}

/// Aligned text table, one row per `(label, report)`, scores shown as percentages.
pub fn format_table<T: Scalar>(first_column: &str, rows: &[(String, MetricReport<T>)]) -> String {
    let width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once(first_column.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", first_column);
    for c in REPORT_COLUMNS {
        let _ = write!(out, "  {:>8}", c);
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{:<width$}", label);
        for v in r.values() {
            let _ = write!(out, "  {:>8.2}", v.as_f64() * 100.0);
        }
        out.push('\n');
    }
    out
}

/// Generates one response per context and averages sentence-level BLEU-1,
/// BLEU-4, ROUGE-1, ROUGE-2 and the evaluator's trust score.
pub fn evaluate_generation<T: Scalar, R: Responder + ?Sized>(
    responder: &R,
    test: &[(TokenSequence, TokenSequence)],
    evaluator: &TrustEvaluator<T>,
) -> Result<MetricReport<T>> {
    if test.is_empty() {
        return Err(FedError::invalid("test set must be non-empty"));
    }
    let mut sums = [T::zero(); 5];
    for (context, reference) in test {
        let response = responder.respond(context)?;
        let refs = std::slice::from_ref(reference);
        let scores = if response.is_empty() {
            [T::zero(); 5]
        } else {
            [
                bleu(&response, refs, 1)?,
                bleu(&response, refs, 4)?,
                rouge_n(&response, refs, 1)?,
                rouge_n(&response, refs, 2)?,
                evaluator.score(context, &response)?,
            ]
        };
        for (s, v) in sums.iter_mut().zip(scores) {
            *s = *s + v;
        }
    }
    let n = T::from_count(test.len());
    Ok(MetricReport {
        bleu_1: sums[0] / n,
        bleu_4: sums[1] / n,
        rouge_1: sums[2] / n,
        rouge_2: sums[3] / n,
        trust: sums[4] / n,
        n_pairs: test.len(),
        averaging: "sentence".to_string(),
    })
}
