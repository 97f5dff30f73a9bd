//! Attention-based keyword scoring and selection, overlap-keyword
//! extraction, probabilistic blending of the two sources, and emission of
//! keyword-conditioned training sequences.
//!
//! The keyword score of a user token is the attention it receives from all
//! other positions: the mean attention matrix's column sum minus the
//! diagonal entry. All tokens scoring at least t * S_max are kept.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Exchange;
use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Per-head square attention matrices over input positions, with the token
/// strings and the subset of positions that belong to the user input.
///
/// Entry `[j][i]` of a head is attention paid BY query position j TO key
/// position i; every row sums to 1.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    heads: Vec<Vec<Vec<f64>>>,
    pub tokens: Vec<String>,
    pub user_positions: BTreeSet<usize>,
}

impl AttentionStack {
    pub fn new(
        heads: Vec<Vec<Vec<f64>>>,
        tokens: Vec<String>,
        user_positions: BTreeSet<usize>,
    ) -> Result<Self> {
        let n = tokens.len();
        if heads.is_empty() {
            return Err(Error::InvalidArgument("attention stack has no heads".into()));
        }
        for (h, head) in heads.iter().enumerate() {
            if head.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "head {h} has {} rows for {n} tokens",
                    head.len()
                )));
            }
            for (j, row) in head.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "head {h} row {j} has {} entries for {n} tokens",
                        row.len()
                    )));
                }
                if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "head {h} row {j} has negative or non-finite entries"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if n > 0 && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::InvalidArgument(format!(
                        "head {h} row {j} sums to {sum}, not 1"
                    )));
                }
            }
        }
        if let Some(&max) = user_positions.iter().next_back() {
            if max >= n {
                return Err(Error::InvalidArgument(format!(
                    "user position {max} out of range for {n} tokens"
                )));
            }
        }
        Ok(AttentionStack {
            heads,
            tokens,
            user_positions,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn n_positions(&self) -> usize {
        self.tokens.len()
    }
}

/// Entrywise mean across attention heads; rows still sum to 1.
pub fn mean_heads(stack: &AttentionStack) -> Vec<Vec<f64>> {
    let n = stack.n_positions();
    let h = stack.heads.len() as f64;
    let mut mean = vec![vec![0.0; n]; n];
    for head in &stack.heads {
        for (j, row) in head.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                mean[j][i] += v / h;
            }
        }
    }
    mean
}

/// Attention received by each user position from all other positions:
/// S(i) = sum over j != i of M[j][i].
pub fn attention_scores(mean: &[Vec<f64>], user_positions: &BTreeSet<usize>) -> BTreeMap<usize, f64> {
    user_positions
        .iter()
        .map(|&i| {
            let s: f64 = mean
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, row)| row[i])
                .sum();
            (i, s)
        })
        .collect()
}

/// Keyword scores and the tokens that pass the threshold, in original input
/// order, deduplicated by lowercased form (first occurrence kept).
#[derive(Debug, Clone, Serialize)]
pub struct KeywordSelection {
    pub scores: BTreeMap<usize, f64>,
    pub selected: Vec<String>,
    pub threshold_used: f64,
}

/// Select all positions whose score reaches t * S_max. The argmax always
/// passes, so the selection is nonempty whenever any scored position exists.
/// Empty scores produce an empty selection.
pub fn select_keywords(
    tokens: &[String],
    scores: &BTreeMap<usize, f64>,
    t: f64,
) -> Result<KeywordSelection> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keyword threshold t must be in (0,1], got {t}"
        )));
    }
    let s_max = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Ok(KeywordSelection {
            scores: scores.clone(),
            selected: Vec::new(),
            threshold_used: 0.0,
        });
    }
    let cutoff = t * s_max;
    let mut seen = HashSet::new();
    let mut selected = Vec::new();
    for (&pos, &score) in scores {
        if score >= cutoff {
            let token = tokens.get(pos).ok_or_else(|| {
                Error::InvalidArgument(format!("scored position {pos} out of range"))
            })?;
            if seen.insert(token.to_lowercase()) {
                selected.push(token.clone());
            }
        }
    }
    Ok(KeywordSelection {
        scores: scores.clone(),
        selected,
        threshold_used: cutoff,
    })
}

/// Full attention-keyword pipeline: mean heads, score user positions,
/// threshold at t.
pub fn attention_keywords(stack: &AttentionStack, t: f64) -> Result<KeywordSelection> {
    let mean = mean_heads(stack);
    let scores = attention_scores(&mean, &stack.user_positions);
    select_keywords(&stack.tokens, &scores, t)
}

/// Tokens occurring in both the user input and the gold reference, in user
/// order, deduplicated by normalized form.
pub fn overlap_keywords(ex: &Exchange) -> Result<Vec<String>> {
    let reference = ex.reference.as_ref().ok_or_else(|| {
        Error::exchange(
            &ex.dialogue_id,
            ex.turn_index,
            "missing reference for overlap keywords",
        )
    })?;
    let ref_tokens: HashSet<&str> = reference.tokens.iter().map(|t| t.normalized.as_str()).collect();
    let mut seen = HashSet::new();
    Ok(ex
        .user
        .tokens
        .iter()
        .filter(|t| ref_tokens.contains(t.normalized.as_str()))
        .filter(|t| seen.insert(t.normalized.clone()))
        .map(|t| t.normalized.clone())
        .collect())
}

/// Seed for one record of a corpus pass: the corpus seed XOR the record
/// index, so records can be processed in any order.
pub fn derive_seed(seed: u64, record_index: u64) -> u64 {
    seed ^ record_index
}

/// One Bernoulli(sigma) draw from a generator seeded with `seed`: true picks
/// the attention keywords, false the overlap keywords.
pub fn blend<'a>(
    overlap_kw: &'a [String],
    attn_kw: &'a [String],
    sigma: f64,
    seed: u64,
) -> Result<(&'a [String], bool)> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be in [0,1], got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let use_attention = rng.gen::<f64>() < sigma;
    Ok(if use_attention {
        (attn_kw, true)
    } else {
        (overlap_kw, false)
    })
}

pub const SECTION_CONTEXT: &str = "<context>";
pub const SECTION_BELIEF: &str = "<belief>";
pub const SECTION_DATABASE: &str = "<database>";
pub const SECTION_KEYWORDS: &str = "<keywords>";

/// Serialize one training input with the trailing keywords section. The
/// section order is fixed; an empty keyword list still emits its marker.
/// Injective as long as no field contains a section marker and keywords
/// carry no whitespace, which holds for tokenizer output.
pub fn emit_training_sequence(context: &str, belief: &str, db: &str, keywords: &[String]) -> String {
    let mut out = format!(
        "{SECTION_CONTEXT} {context} {SECTION_BELIEF} {belief} {SECTION_DATABASE} {db} {SECTION_KEYWORDS}"
    );
    for kw in keywords {
        out.push(' ');
        out.push_str(kw);
    }
    out
}

/// One line of an attention JSONL file, keyed by (dialogue_id, turn).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub dialogue_id: String,
    pub turn: u32,
    pub tokens: Vec<String>,
    pub user_positions: Vec<usize>,
    pub heads: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn into_stack(self) -> Result<AttentionStack> {
        AttentionStack::new(
            self.heads,
            self.tokens,
            self.user_positions.into_iter().collect(),
        )
    }
}

/// Load an attention JSONL file into a (dialogue_id, turn) -> stack map.
pub fn load_attention<R: std::io::BufRead>(
    reader: R,
) -> Result<BTreeMap<(String, u32), AttentionStack>> {
    let mut map = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AttentionRecord =
            serde_json::from_str(&line).map_err(|e| Error::schema(line_no, e.to_string()))?;
        let key = (record.dialogue_id.clone(), record.turn);
        if map.contains_key(&key) {
            return Err(Error::schema(
                line_no,
                format!("duplicate attention entry for dialogue {} turn {}", key.0, key.1),
            ));
        }
        map.insert(key, record.into_stack().map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::schema(line_no, msg),
            other => other,
        })?);
    }
    Ok(map)
}
