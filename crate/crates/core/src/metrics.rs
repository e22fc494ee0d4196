//! Reference-based evaluation: corpus BLEU, chrF, perplexity, and the
//! prediction dump format.
//!
//! BLEU uses 1-4 gram clipped precisions over pre-tokenized words,
//! geometric mean with halving smoothing for zero-match orders, and the
//! multiplicative brevity penalty. Orders with no n-grams at all (short
//! corpora) are skipped so identical corpora score exactly 100. chrF is
//! the character n-gram F-beta averaged over orders 1..=n with whitespace
//! excluded, aggregated corpus-wide the same way.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::processors::pretokenize;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("hypothesis/reference length mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("cannot score an empty corpus")]
    EmptyInput,
    #[error("perplexity needs a finite non-negative mean NLL, got {0}")]
    NonFinite(f64),
    #[error("malformed prediction dump {path:?} at line {line}: {detail}")]
    BadDump {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A metric score with its supporting statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub metric_name: String,
    pub score: f64,
    pub n_samples: usize,
    pub details: Vec<(String, f64)>,
}

const BLEU_MAX_ORDER: usize = 4;

/// Corpus-level BLEU on a 0-100 scale.
pub fn corpus_bleu(hypotheses: &[String], references: &[String]) -> Result<EvalResult, MetricsError> {
    check_lengths(hypotheses, references)?;

    let mut matches = [0u64; BLEU_MAX_ORDER];
    let mut totals = [0u64; BLEU_MAX_ORDER];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let h = pretokenize(hyp);
        let r = pretokenize(reference);
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t) = clipped_ngram_matches(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }

    let mut details: Vec<(String, f64)> = Vec::new();
    let score = if hyp_len == 0 {
        0.0
    } else {
        // Geometric mean over orders that have any n-grams; zero-match
        // orders get the halving smoothing 1 / (2^k * total).
        let mut log_sum = 0.0;
        let mut used_orders = 0usize;
        let mut smoothing = 1.0f64;
        for n in 1..=BLEU_MAX_ORDER {
            let total = totals[n - 1];
            if total == 0 {
                continue;
            }
            let m = matches[n - 1];
            let p = if m == 0 {
                smoothing *= 2.0;
                1.0 / (smoothing * total as f64)
            } else {
                m as f64 / total as f64
            };
            details.push((format!("p{n}"), p));
            log_sum += p.ln();
            used_orders += 1;
        }
        if used_orders == 0 {
            0.0
        } else {
            let brevity = if hyp_len < ref_len {
                (1.0 - ref_len as f64 / hyp_len as f64).exp()
            } else {
                1.0
            };
            details.push(("brevity_penalty".to_string(), brevity));
            let geo = (log_sum / used_orders as f64).exp();
            100.0 * brevity * geo
        }
    };
    details.push(("hyp_len".to_string(), hyp_len as f64));
    details.push(("ref_len".to_string(), ref_len as f64));

    Ok(EvalResult {
        metric_name: "bleu".to_string(),
        score,
        n_samples: hypotheses.len(),
        details,
    })
}

fn clipped_ngram_matches(hyp: &[String], reference: &[String], n: usize) -> (u64, u64) {
    if hyp.len() < n {
        return (0, 0);
    }
    let total = (hyp.len() - n + 1) as u64;
    let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
    for gram in hyp.windows(n) {
        *hyp_counts.entry(gram).or_insert(0) += 1;
    }
    let mut matched = 0u64;
    for (gram, count) in hyp_counts {
        if let Some(&rc) = ref_counts.get(gram) {
            matched += count.min(rc);
        }
    }
    (matched, total)
}

/// chrF: character n-gram F-beta (default n=6, beta=2) on a 0-100 scale.
pub fn chrf(
    hypotheses: &[String],
    references: &[String],
    max_order: usize,
    beta: f64,
) -> Result<EvalResult, MetricsError> {
    check_lengths(hypotheses, references)?;
    assert!(max_order >= 1, "chrf needs at least one order");

    let mut matches = vec![0u64; max_order];
    let mut hyp_totals = vec![0u64; max_order];
    let mut ref_totals = vec![0u64; max_order];
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=max_order {
            let (m, ht, rt) = char_ngram_stats(&h, &r, n);
            matches[n - 1] += m;
            hyp_totals[n - 1] += ht;
            ref_totals[n - 1] += rt;
        }
    }

    let beta_sq = beta * beta;
    let mut f_sum = 0.0;
    let mut used = 0usize;
    let mut details = Vec::new();
    for n in 1..=max_order {
        let (m, ht, rt) = (matches[n - 1], hyp_totals[n - 1], ref_totals[n - 1]);
        if ht == 0 && rt == 0 {
            continue; // order longer than anything in the corpus
        }
        let precision = if ht == 0 { 0.0 } else { m as f64 / ht as f64 };
        let recall = if rt == 0 { 0.0 } else { m as f64 / rt as f64 };
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
        };
        details.push((format!("f{n}"), f));
        f_sum += f;
        used += 1;
    }
    let score = if used == 0 { 0.0 } else { 100.0 * f_sum / used as f64 };

    Ok(EvalResult {
        metric_name: "chrf".to_string(),
        score,
        n_samples: hypotheses.len(),
        details,
    })
}

fn char_ngram_stats(hyp: &[char], reference: &[char], n: usize) -> (u64, u64, u64) {
    let hyp_total = hyp.len().saturating_sub(n - 1) as u64;
    let ref_total = reference.len().saturating_sub(n - 1) as u64;
    if hyp_total == 0 || ref_total == 0 {
        return (0, hyp_total, ref_total);
    }
    let mut ref_counts: HashMap<&[char], u64> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut hyp_counts: HashMap<&[char], u64> = HashMap::new();
    for gram in hyp.windows(n) {
        *hyp_counts.entry(gram).or_insert(0) += 1;
    }
    let mut matched = 0u64;
    for (gram, count) in hyp_counts {
        if let Some(&rc) = ref_counts.get(gram) {
            matched += count.min(rc);
        }
    }
    (matched, hyp_total, ref_total)
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<(), MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// `exp(mean token negative log-likelihood)`.
pub fn perplexity(mean_token_nll: f64) -> Result<f64, MetricsError> {
    if !mean_token_nll.is_finite() || mean_token_nll < 0.0 {
        return Err(MetricsError::NonFinite(mean_token_nll));
    }
    Ok(mean_token_nll.exp())
}

/// Writes the prediction dump: for each index `i`, an `L [i]` line with the
/// reference, a `P [i]` line with the prediction, then a blank line. The
/// tag and the text are separated by a tab so the file parses back exactly.
pub fn write_predictions(
    labels: &[String],
    predictions: &[String],
    path: impl AsRef<Path>,
) -> Result<(), MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch {
            hyps: predictions.len(),
            refs: labels.len(),
        });
    }
    let path = path.as_ref();
    let mut out = String::new();
    for (i, (label, pred)) in labels.iter().zip(predictions).enumerate() {
        let _ = writeln!(out, "L [{i}]\t{}", sanitize_line(label));
        let _ = writeln!(out, "P [{i}]\t{}", sanitize_line(pred));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sanitize_line(s: &str) -> String {
    if s.contains(['\n', '\r']) {
        s.replace("\r\n", " ").replace(['\n', '\r'], " ")
    } else {
        s.to_string()
    }
}

/// Parses a file written by [`write_predictions`] back into
/// `(labels, predictions)`.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<String>), MetricsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    let mut lines = text.lines().enumerate();
    while let Some((ln, label_line)) = lines.next() {
        if label_line.is_empty() {
            continue;
        }
        let idx = labels.len();
        let label = strip_tag(label_line, 'L', idx).ok_or_else(|| MetricsError::BadDump {
            path: path.to_path_buf(),
            line: ln + 1,
            detail: format!("expected `L [{idx}]\\t...`, got {label_line:?}"),
        })?;
        let (pln, pred_line) = lines.next().ok_or_else(|| MetricsError::BadDump {
            path: path.to_path_buf(),
            line: ln + 2,
            detail: "missing P line".to_string(),
        })?;
        let pred = strip_tag(pred_line, 'P', idx).ok_or_else(|| MetricsError::BadDump {
            path: path.to_path_buf(),
            line: pln + 1,
            detail: format!("expected `P [{idx}]\\t...`, got {pred_line:?}"),
        })?;
        labels.push(label.to_string());
        predictions.push(pred.to_string());
    }
    Ok((labels, predictions))
}

fn strip_tag(line: &str, tag: char, index: usize) -> Option<&str> {
    let prefix = format!("{tag} [{index}]\t");
    line.strip_prefix(&prefix)
}
