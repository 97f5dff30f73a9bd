//! Rerank externally generated candidate responses by their 1- and 2-gram
//! match with the user context, preferring candidates that reuse the user's
//! wording.

use crate::corpus::{tokenize, Exchange, Token};
use crate::error::{Error, Result};
use crate::metrics::ngram_precision;

/// One beam candidate with its original model rank (1 = model's best).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResponse {
    pub text: String,
    pub tokens: Vec<Token>,
    pub model_rank: u32,
}

impl CandidateResponse {
    pub fn new(text: &str, model_rank: u32) -> Self {
        CandidateResponse {
            text: text.to_string(),
            tokens: tokenize(text),
            model_rank,
        }
    }

    fn normalized_tokens(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.normalized.as_str()).collect()
    }
}

/// Weights for the unigram/bigram components, and whether the context
/// includes the dialogue history in addition to the current user turn.
#[derive(Debug, Clone)]
pub struct RerankOptions {
    pub w_unigram: f64,
    pub w_bigram: f64,
    pub use_history: bool,
}

impl Default for RerankOptions {
    fn default() -> Self {
        RerankOptions {
            w_unigram: 0.5,
            w_bigram: 0.5,
            use_history: false,
        }
    }
}

/// Weighted combination of unigram and bigram precision of the candidate
/// against the context. Candidates shorter than two tokens contribute a
/// bigram precision of 0; an empty candidate scores 0.
pub fn weighted_context_score(
    cand: &CandidateResponse,
    context: &[&str],
    w_unigram: f64,
    w_bigram: f64,
) -> f64 {
    let tokens = cand.normalized_tokens();
    w_unigram * ngram_precision(&tokens, context, 1) + w_bigram * ngram_precision(&tokens, context, 2)
}

/// Equal-weight mean of 1- and 2-gram precision against the context.
pub fn context_score(cand: &CandidateResponse, context: &[&str]) -> f64 {
    weighted_context_score(cand, context, 0.5, 0.5)
}

fn context_tokens<'a>(ex: &'a Exchange, use_history: bool) -> Vec<&'a str> {
    let mut tokens: Vec<&str> = Vec::new();
    if use_history {
        if let Some(history) = &ex.context {
            for utt in history {
                tokens.extend(utt.tokens.iter().map(|t| t.normalized.as_str()));
            }
        }
    }
    tokens.extend(ex.user.tokens.iter().map(|t| t.normalized.as_str()));
    tokens
}

/// Candidates sorted by context score, best first; ties keep the model's
/// original order. The result is a permutation of the input set.
pub fn rerank_with(ex: &Exchange, opts: &RerankOptions) -> Result<Vec<CandidateResponse>> {
    let candidates = ex
        .candidates
        .as_ref()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| {
            Error::exchange(&ex.dialogue_id, ex.turn_index, "no candidates to rerank")
        })?;
    let context = context_tokens(ex, opts.use_history);
    let mut scored: Vec<(f64, CandidateResponse)> = candidates
        .iter()
        .map(|c| {
            (
                weighted_context_score(c, &context, opts.w_unigram, opts.w_bigram),
                c.clone(),
            )
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.model_rank.cmp(&b.1.model_rank))
    });
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

/// [`rerank_with`] under the default options: equal weights, current user
/// turn only.
pub fn rerank(ex: &Exchange) -> Result<Vec<CandidateResponse>> {
    rerank_with(ex, &RerankOptions::default())
}
