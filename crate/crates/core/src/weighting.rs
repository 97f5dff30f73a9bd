//! Per-instance entrainment overlap and the two training-instance weight
//! functions, plus weighted training-set export.
//!
//! The overlap p of an exchange is the unigram precision of its gold
//! reference against the user input, in percent. `w1` is a step: weight 1
//! up to the threshold tau, 10 above it. `w2` is a scaled sigmoid centered
//! at beta with spread w, plus a floor eps so zero-entrainment instances
//! keep a nonzero weight.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Exchange};
use crate::error::{Error, Result};
use crate::metrics::ngram_precision;

/// Which weight function to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum WeightFn {
    W1,
    W2,
}

/// Parameters of the weight functions. Defaults are the reference settings:
/// tau 25.0, w 0.8, beta 18.1, eps 0.1, plateau 10.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightConfig {
    pub function: WeightFn,
    pub tau: f64,
    pub w: f64,
    pub beta: f64,
    pub eps: f64,
    /// Weight plateau shared by both functions; fixed at 10.
    pub high: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            function: WeightFn::W1,
            tau: 25.0,
            w: 0.8,
            beta: 18.1,
            eps: 0.1,
            high: 10.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 100.0) {
            return Err(Error::Config(format!("tau must be in (0,100], got {}", self.tau)));
        }
        if self.w <= 0.0 {
            return Err(Error::Config(format!("w must be positive, got {}", self.w)));
        }
        if !(0.0..=100.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0,100], got {}", self.beta)));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Lexical overlap of the gold reference with the user input: unigram
/// precision of reference tokens against user tokens, in percent.
pub fn overlap_p(ex: &Exchange) -> Result<f64> {
    let reference = ex.reference.as_ref().ok_or_else(|| {
        Error::exchange(&ex.dialogue_id, ex.turn_index, "missing reference for weighting")
    })?;
    Ok(100.0 * ngram_precision(&reference.normalized_tokens(), &ex.user.normalized_tokens(), 1))
}

/// Step weight: 1 if p <= tau, else the plateau (10).
pub fn w1(p: f64, cfg: &WeightConfig) -> f64 {
    if p <= cfg.tau {
        1.0
    } else {
        cfg.high
    }
}

/// Sigmoid weight: high / (1 + exp(w * (beta - p))) + eps.
pub fn w2(p: f64, cfg: &WeightConfig) -> f64 {
    cfg.high / (1.0 + (cfg.w * (cfg.beta - p)).exp()) + cfg.eps
}

/// Weight of overlap p under the configured function.
pub fn weight(p: f64, cfg: &WeightConfig) -> f64 {
    match cfg.function {
        WeightFn::W1 => w1(p, cfg),
        WeightFn::W2 => w2(p, cfg),
    }
}

/// One weighted training instance.
#[derive(Debug, Clone)]
pub struct WeightedInstance<'a> {
    pub exchange: &'a Exchange,
    pub p: f64,
    pub weight: f64,
}

/// Weigh every exchange of the corpus, in corpus order. All exchanges must
/// carry references.
pub fn weigh_corpus<'a>(corpus: &'a Corpus, cfg: &WeightConfig) -> Result<Vec<WeightedInstance<'a>>> {
    cfg.validate()?;
    corpus
        .exchanges()
        .map(|ex| {
            let p = overlap_p(ex)?;
            Ok(WeightedInstance {
                exchange: ex,
                p,
                weight: weight(p, cfg),
            })
        })
        .collect()
}

/// Round to the 6-decimal precision used in exports, so that re-loading an
/// export and recomputing reproduces identical values bit-for-bit.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Number of copies of an instance under weight-proportional materialization:
/// nearest integer, at least 1.
pub fn materialized_copies(weight: f64) -> usize {
    (weight.round() as usize).max(1)
}
