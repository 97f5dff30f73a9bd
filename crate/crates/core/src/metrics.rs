//! Entrainment and generation-quality metrics, per-exchange and
//! corpus-aggregated.
//!
//! Lexical entrainment is unigram precision/recall of the system response
//! against the user input; syntactic entrainment is POS n-gram precision;
//! 50MFC measures alignment of relative frequencies of the corpus's 50 most
//! frequent words between the two speaker sides; BLEU scores responses
//! against gold references.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::corpus::{Corpus, Exchange};
use crate::error::{Error, Result};
use crate::postag::{resolve_tags, Lexicon};

/// Clipped n-gram matches of `cand` against `refr`, plus the number of
/// candidate n-grams. Each candidate n-gram type counts at most as often as
/// it occurs in the reference.
pub fn clipped_ngram_matches<T: Eq + Hash>(cand: &[T], refr: &[T], n: usize) -> (usize, usize) {
    if n == 0 || cand.len() < n {
        return (0, 0);
    }
    let total = cand.len() - n + 1;
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    if refr.len() >= n {
        for window in refr.windows(n) {
            *ref_counts.entry(window).or_insert(0) += 1;
        }
    }
    let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
    for window in cand.windows(n) {
        *cand_counts.entry(window).or_insert(0) += 1;
    }
    let matches = cand_counts
        .iter()
        .map(|(window, count)| (*count).min(ref_counts.get(window).copied().unwrap_or(0)))
        .sum();
    (matches, total)
}

/// Clipped n-gram precision in [0, 1]; 0 when the candidate has fewer than
/// `n` tokens.
pub fn ngram_precision<T: Eq + Hash>(cand: &[T], refr: &[T], n: usize) -> f64 {
    let (matches, total) = clipped_ngram_matches(cand, refr, n);
    if total == 0 {
        0.0
    } else {
        matches as f64 / total as f64
    }
}

/// Unigram precision of the response against the user input, as a percentage.
/// Empty response scores 0.
pub fn lex_p1(ex: &Exchange) -> f64 {
    100.0 * ngram_precision(&ex.response.normalized_tokens(), &ex.user.normalized_tokens(), 1)
}

/// Unigram recall of the response against the user input (precision with the
/// roles swapped), as a percentage. Empty user input scores 0.
pub fn lex_r1(ex: &Exchange) -> f64 {
    100.0 * ngram_precision(&ex.user.normalized_tokens(), &ex.response.normalized_tokens(), 1)
}

/// POS n-gram precision of the response tags against the user tags, as a
/// percentage.
pub fn syn_p(ex: &Exchange, n: usize, lexicon: &Lexicon) -> Result<f64> {
    let (user_tags, response_tags) = resolve_tags(ex, lexicon)?;
    Ok(100.0 * ngram_precision(&response_tags, &user_tags, n))
}

/// Per-exchange metric row, as emitted in the TSV report.
#[derive(Debug, Clone, Serialize)]
pub struct ExchangeMetrics {
    pub lex_p1: f64,
    pub lex_r1: f64,
    pub syn_p2: f64,
    pub syn_p3: f64,
    /// Response (resp. user) side was empty; the affected scores are 0.
    pub empty_response: bool,
    pub empty_user: bool,
}

pub fn exchange_metrics(ex: &Exchange, lexicon: &Lexicon) -> Result<ExchangeMetrics> {
    Ok(ExchangeMetrics {
        lex_p1: lex_p1(ex),
        lex_r1: lex_r1(ex),
        syn_p2: syn_p(ex, 2, lexicon)?,
        syn_p3: syn_p(ex, 3, lexicon)?,
        empty_response: ex.response.tokens.is_empty(),
        empty_user: ex.user.tokens.is_empty(),
    })
}

/// Alignment of relative frequencies of the 50 most frequent corpus words
/// between the user and system sides. Ranges from -2 (disjoint) to 0
/// (identical relative frequencies).
///
/// The 50-word list is taken from the pooled user+system counts of the
/// evaluated corpus, ties broken lexicographically.
pub fn fifty_mfc(corpus: &Corpus) -> Result<f64> {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut user_total = 0usize;
    let mut system_total = 0usize;
    for ex in corpus.exchanges() {
        for tok in &ex.user.tokens {
            counts.entry(tok.normalized.clone()).or_insert((0, 0)).0 += 1;
            user_total += 1;
        }
        for tok in &ex.response.tokens {
            counts.entry(tok.normalized.clone()).or_insert((0, 0)).1 += 1;
            system_total += 1;
        }
    }
    if user_total == 0 {
        return Err(Error::Numeric("50MFC: user side has no tokens".into()));
    }
    if system_total == 0 {
        return Err(Error::Numeric("50MFC: system side has no tokens".into()));
    }

    let mut pooled: Vec<(&String, usize, usize)> = counts
        .iter()
        .map(|(word, (u, s))| (word, *u, *s))
        .collect();
    pooled.sort_by(|a, b| (b.1 + b.2).cmp(&(a.1 + a.2)).then_with(|| a.0.cmp(b.0)));
    pooled.truncate(50);

    let score = -pooled
        .iter()
        .map(|(_, u, s)| {
            (*s as f64 / system_total as f64 - *u as f64 / user_total as f64).abs()
        })
        .sum::<f64>();
    Ok(score)
}

const BLEU_EPS: f64 = 1e-9;

/// Brevity penalty of corpus BLEU: 1 when the candidate side is at least as
/// long as the reference side, exp(1 - r/c) otherwise.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Corpus-level BLEU-4 in [0, 100]: geometric mean of clipped n-gram
/// precisions for n = 1..4 with brevity penalty; zero counts are smoothed
/// to 1e-9.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "corpus_bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus_bleu: empty candidate list".into(),
        ));
    }

    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refr) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refr.len();
        for (i, slot) in matches.iter_mut().enumerate() {
            let (m, t) = clipped_ngram_matches(cand, refr, i + 1);
            *slot += m;
            totals[i] += t;
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }

    let log_mean = (0..4)
        .map(|i| {
            let p = if totals[i] == 0 {
                BLEU_EPS
            } else {
                let m = if matches[i] == 0 {
                    BLEU_EPS
                } else {
                    matches[i] as f64
                };
                m / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    Ok(100.0 * brevity_penalty(cand_len, ref_len) * log_mean.exp())
}

/// Corpus-level metric report: the full column set plus bookkeeping counts.
///
/// `bleu` strips placeholder tokens from both sides before scoring (content
/// words only); `delex_bleu` keeps placeholders as matchable tokens, which
/// is the meaningful reading on pre-delexicalized input. Both are `None`
/// when no exchange carries a reference; `mfc50` is `None` when one speaker
/// side has no tokens at all.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub lex_p1: f64,
    pub lex_r1: f64,
    pub syn_p2: f64,
    pub syn_p3: f64,
    pub mfc50: Option<f64>,
    pub bleu: Option<f64>,
    pub delex_bleu: Option<f64>,
    pub n_exchanges: usize,
    pub n_references: usize,
    pub n_empty_responses: usize,
    pub n_empty_users: usize,
}

/// Micro-averaged corpus report: n-gram counts are pooled across all
/// exchanges before dividing, 50MFC and BLEU are corpus-level.
pub fn aggregate(corpus: &Corpus, lexicon: &Lexicon) -> Result<MetricReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("aggregate: empty corpus".into()));
    }

    // (matches, totals) pooled for lex-p1, lex-r1, syn-p2, syn-p3.
    let mut pooled = [(0usize, 0usize); 4];
    let mut n_exchanges = 0usize;
    let mut n_empty_responses = 0usize;
    let mut n_empty_users = 0usize;
    let mut bleu_cands: Vec<Vec<String>> = Vec::new();
    let mut bleu_refs: Vec<Vec<String>> = Vec::new();
    let mut delex_cands: Vec<Vec<String>> = Vec::new();
    let mut delex_refs: Vec<Vec<String>> = Vec::new();

    for ex in corpus.exchanges() {
        n_exchanges += 1;
        let user = ex.user.normalized_tokens();
        let response = ex.response.normalized_tokens();
        if response.is_empty() {
            n_empty_responses += 1;
        }
        if user.is_empty() {
            n_empty_users += 1;
        }

        let (m, t) = clipped_ngram_matches(&response, &user, 1);
        pooled[0].0 += m;
        pooled[0].1 += t;
        let (m, t) = clipped_ngram_matches(&user, &response, 1);
        pooled[1].0 += m;
        pooled[1].1 += t;

        let (user_tags, response_tags) = resolve_tags(ex, lexicon)?;
        for (i, n) in [2usize, 3].iter().enumerate() {
            let (m, t) = clipped_ngram_matches(&response_tags, &user_tags, *n);
            pooled[2 + i].0 += m;
            pooled[2 + i].1 += t;
        }

        if let Some(reference) = &ex.reference {
            let strip = |toks: &crate::corpus::Utterance| {
                toks.tokens
                    .iter()
                    .filter(|t| !t.is_placeholder)
                    .map(|t| t.normalized.clone())
                    .collect::<Vec<_>>()
            };
            bleu_cands.push(strip(&ex.response));
            bleu_refs.push(strip(reference));
            delex_cands.push(ex.response.tokens.iter().map(|t| t.normalized.clone()).collect());
            delex_refs.push(reference.tokens.iter().map(|t| t.normalized.clone()).collect());
        }
    }

    let pct = |(m, t): (usize, usize)| {
        if t == 0 {
            0.0
        } else {
            100.0 * m as f64 / t as f64
        }
    };

    let (bleu, delex_bleu) = if bleu_cands.is_empty() {
        (None, None)
    } else {
        (
            Some(corpus_bleu(&bleu_cands, &bleu_refs)?),
            Some(corpus_bleu(&delex_cands, &delex_refs)?),
        )
    };

    Ok(MetricReport {
        lex_p1: pct(pooled[0]),
        lex_r1: pct(pooled[1]),
        syn_p2: pct(pooled[2]),
        syn_p3: pct(pooled[3]),
        mfc50: fifty_mfc(corpus).ok(),
        bleu,
        delex_bleu,
        n_exchanges,
        n_references: bleu_cands.len(),
        n_empty_responses,
        n_empty_users,
    })
}
