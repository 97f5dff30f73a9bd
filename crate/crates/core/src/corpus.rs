//! Dialogue data model, JSONL ingestion and deterministic tokenization.
//!
//! One JSONL record per exchange:
//!
//! ```json
//! {"dialogue_id": "SNG076", "turn": 0, "user": "...", "response": "...",
//!  "reference": "...?", "user_pos": ["..."]?, "response_pos": ["..."]?,
//!  "candidates": [{"text": "...", "rank": 1}]?}
//! ```
//!
//! Unknown fields are preserved on passthrough and ignored by the core.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rerank::CandidateResponse;

/// Which side of the dialogue an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    User,
    System,
}

/// A single word unit as produced by [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    /// Text as read from the utterance.
    pub surface: String,
    /// Lowercased comparison form; all metrics operate on this.
    pub normalized: String,
    /// True for delexicalization slots such as `[value_name]`.
    pub is_placeholder: bool,
}

impl Token {
    fn new(surface: &str) -> Self {
        Token {
            surface: surface.to_string(),
            normalized: surface.to_lowercase(),
            is_placeholder: is_placeholder(surface),
        }
    }

    pub fn normalized(&self) -> &str {
        &self.normalized
    }
}

/// One turn of one speaker, with its token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub raw: String,
    pub tokens: Vec<Token>,
}

impl Utterance {
    pub fn new(speaker: Speaker, raw: &str) -> Self {
        Utterance {
            speaker,
            raw: raw.to_string(),
            tokens: tokenize(raw),
        }
    }

    /// Normalized token forms, the view the metrics consume.
    pub fn normalized_tokens(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.normalized.as_str()).collect()
    }
}

/// One user-turn/system-response pair: the unit of all per-turn metrics.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub user: Utterance,
    /// The evaluated/generated system response.
    pub response: Utterance,
    /// Gold response, when available.
    pub reference: Option<Utterance>,
    /// Externally generated candidates for reranking.
    pub candidates: Option<Vec<CandidateResponse>>,
    /// Prior utterances of the same dialogue, oldest first.
    pub context: Option<Vec<Utterance>>,
    /// Externally provided POS tags, passed through verbatim by `postag`.
    pub user_pos: Option<Vec<String>>,
    pub response_pos: Option<Vec<String>>,
    /// Unknown record fields, preserved for passthrough.
    pub extra: Map<String, Value>,
}

impl Exchange {
    /// Build a bare exchange from raw text; convenient for tests and FFI.
    pub fn from_text(dialogue_id: &str, turn_index: u32, user: &str, response: &str) -> Self {
        Exchange {
            dialogue_id: dialogue_id.to_string(),
            turn_index,
            user: Utterance::new(Speaker::User, user),
            response: Utterance::new(Speaker::System, response),
            reference: None,
            candidates: None,
            context: None,
            user_pos: None,
            response_pos: None,
            extra: Map::new(),
        }
    }

    pub fn with_reference(mut self, reference: &str) -> Self {
        self.reference = Some(Utterance::new(Speaker::System, reference));
        self
    }
}

/// Ordered collection of dialogues; the unit of 50MFC, BLEU and aggregation.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub dialogues: Vec<(String, Vec<Exchange>)>,
}

impl Corpus {
    pub fn exchanges(&self) -> impl Iterator<Item = &Exchange> {
        self.dialogues.iter().flat_map(|(_, exs)| exs.iter())
    }

    pub fn exchanges_mut(&mut self) -> impl Iterator<Item = &mut Exchange> {
        self.dialogues.iter_mut().flat_map(|(_, exs)| exs.iter_mut())
    }

    pub fn n_exchanges(&self) -> usize {
        self.dialogues.iter().map(|(_, exs)| exs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }
}

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Bracketed slot like `[value_name]`: starts `[`, ends `]`, nonempty inside,
/// no internal whitespace.
fn is_placeholder(s: &str) -> bool {
    s.len() >= 3
        && s.starts_with('[')
        && s.ends_with(']')
        && !s.chars().any(char::is_whitespace)
}

/// Clock time like `17:00` or `7:45`.
fn is_clock_time(s: &str) -> bool {
    match s.split_once(':') {
        Some((h, m)) => {
            (1..=2).contains(&h.len())
                && m.len() == 2
                && h.chars().all(|c| c.is_ascii_digit())
                && m.chars().all(|c| c.is_ascii_digit())
        }
        None => false,
    }
}

/// Deterministic word tokenization.
///
/// Splits on whitespace, peels leading/trailing ASCII punctuation into
/// separate single-character tokens, and keeps bracketed placeholders and
/// clock times intact. Apostrophe-bearing contractions stay whole ("i'll").
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut core = chunk;
        let mut trailing: Vec<&str> = Vec::new();
        loop {
            if core.is_empty() || is_placeholder(core) || is_clock_time(core) {
                break;
            }
            let mut chars = core.char_indices();
            let (_, first) = chars.next().expect("core is nonempty");
            if is_edge_punct(first) {
                tokens.push(Token::new(&core[..first.len_utf8()]));
                core = &core[first.len_utf8()..];
                continue;
            }
            let (last_idx, last) = core.char_indices().last().expect("core is nonempty");
            if is_edge_punct(last) {
                trailing.push(&core[last_idx..]);
                core = &core[..last_idx];
                continue;
            }
            break;
        }
        if !core.is_empty() {
            tokens.push(Token::new(core));
        }
        for t in trailing.into_iter().rev() {
            tokens.push(Token::new(t));
        }
    }
    tokens
}

/// Multiset of normalized user tokens (the set U of the user-likelihood
/// machinery). Deliberately unfiltered: punctuation and common words count.
pub fn user_token_multiset(ex: &Exchange) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for tok in &ex.user.tokens {
        *counts.entry(tok.normalized.clone()).or_insert(0) += 1;
    }
    counts
}

/// Wire form of one candidate in the JSONL schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub rank: u32,
}

/// Wire form of one exchange line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub dialogue_id: String,
    pub turn: u32,
    pub user: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidateRecord>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ExchangeRecord {
    fn into_exchange(self, line: usize) -> Result<Exchange> {
        let candidates = match self.candidates {
            Some(records) => {
                let mut seen = std::collections::HashSet::new();
                let mut min_rank = u32::MAX;
                for c in &records {
                    if !seen.insert(c.rank) {
                        return Err(Error::schema(
                            line,
                            format!("duplicate candidate rank {}", c.rank),
                        ));
                    }
                    min_rank = min_rank.min(c.rank);
                }
                if !records.is_empty() && min_rank != 1 {
                    return Err(Error::schema(line, "candidate ranks must start at 1"));
                }
                Some(
                    records
                        .into_iter()
                        .map(|c| CandidateResponse::new(&c.text, c.rank))
                        .collect(),
                )
            }
            None => None,
        };
        Ok(Exchange {
            dialogue_id: self.dialogue_id,
            turn_index: self.turn,
            user: Utterance::new(Speaker::User, &self.user),
            response: Utterance::new(Speaker::System, &self.response),
            reference: self
                .reference
                .map(|r| Utterance::new(Speaker::System, &r)),
            candidates,
            context: None,
            user_pos: self.user_pos,
            response_pos: self.response_pos,
            extra: self.extra,
        })
    }

    pub fn from_exchange(ex: &Exchange) -> Self {
        ExchangeRecord {
            dialogue_id: ex.dialogue_id.clone(),
            turn: ex.turn_index,
            user: ex.user.raw.clone(),
            response: ex.response.raw.clone(),
            reference: ex.reference.as_ref().map(|r| r.raw.clone()),
            user_pos: ex.user_pos.clone(),
            response_pos: ex.response_pos.clone(),
            candidates: ex.candidates.as_ref().map(|cs| {
                cs.iter()
                    .map(|c| CandidateRecord {
                        text: c.text.clone(),
                        rank: c.model_rank,
                    })
                    .collect()
            }),
            extra: ex.extra.clone(),
        }
    }
}

/// Load a corpus from JSONL, one exchange per line.
///
/// File order is preserved: dialogues appear in order of first occurrence,
/// exchanges in file order within each dialogue. Turn indices must be
/// strictly increasing per dialogue. Each exchange gains a `context` of the
/// prior utterances of its dialogue.
pub fn load_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut order: Vec<String> = Vec::new();
    let mut by_dialogue: HashMap<String, Vec<Exchange>> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExchangeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::schema(line_no, e.to_string()))?;
        let exchange = record.into_exchange(line_no)?;
        let entry = by_dialogue
            .entry(exchange.dialogue_id.clone())
            .or_insert_with(|| {
                order.push(exchange.dialogue_id.clone());
                Vec::new()
            });
        if let Some(prev) = entry.last() {
            if prev.turn_index == exchange.turn_index {
                return Err(Error::schema(
                    line_no,
                    format!(
                        "duplicate turn {} in dialogue {}",
                        exchange.turn_index, exchange.dialogue_id
                    ),
                ));
            }
            if prev.turn_index > exchange.turn_index {
                return Err(Error::schema(
                    line_no,
                    format!(
                        "turn {} out of order in dialogue {} (previous was {})",
                        exchange.turn_index, exchange.dialogue_id, prev.turn_index
                    ),
                ));
            }
        }
        entry.push(exchange);
    }

    let mut dialogues = Vec::with_capacity(order.len());
    for id in order {
        let mut exchanges = by_dialogue.remove(&id).expect("dialogue recorded in order");
        let mut history: Vec<Utterance> = Vec::new();
        for ex in &mut exchanges {
            ex.context = if history.is_empty() {
                None
            } else {
                Some(history.clone())
            };
            history.push(ex.user.clone());
            history.push(ex.response.clone());
        }
        dialogues.push((id, exchanges));
    }
    Ok(Corpus { dialogues })
}

/// Serialize exchanges back to JSONL lines, preserving unknown fields.
pub fn write_corpus_records<W: std::io::Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    for ex in corpus.exchanges() {
        let record = ExchangeRecord::from_exchange(ex);
        serde_json::to_writer(&mut w, &record)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norms(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.normalized.as_str()).collect()
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t\n").is_empty());
    }

    #[test]
    fn tokenize_keeps_contractions_and_peels_final_period() {
        let toks = tokenize("I'll need a reservation for 3 nights starting Sunday.");
        assert_eq!(
            norms(&toks),
            vec!["i'll", "need", "a", "reservation", "for", "3", "nights", "starting", "sunday", "."]
        );
        assert_eq!(toks[0].surface, "I'll");
    }

    #[test]
    fn tokenize_protects_clock_times() {
        let toks = tokenize("depart at or around 17:00?");
        assert_eq!(norms(&toks), vec!["depart", "at", "or", "around", "17:00", "?"]);
    }

    #[test]
    fn tokenize_protects_placeholders() {
        let toks = tokenize("the [value_name] is in the centre.");
        assert_eq!(
            norms(&toks),
            vec!["the", "[value_name]", "is", "in", "the", "centre", "."]
        );
        assert!(toks[1].is_placeholder);
        assert!(!toks[0].is_placeholder);
    }

    #[test]
    fn tokenize_peels_wrapping_punctuation_in_order() {
        let toks = tokenize("(hello)." );
        assert_eq!(norms(&toks), vec!["(", "hello", ")", "."]);
        let toks = tokenize("?!");
        assert_eq!(norms(&toks), vec!["?", "!"]);
    }

    #[test]
    fn tokenize_placeholder_inside_wrapping_punct() {
        let toks = tokenize("([value_area]),");
        assert_eq!(norms(&toks), vec!["(", "[value_area]", ")", ","]);
        assert!(toks[1].is_placeholder);
    }

    #[test]
    fn empty_brackets_are_not_a_placeholder() {
        assert_eq!(norms(&tokenize("[]")), vec!["[", "]"]);
    }

    #[test]
    fn user_token_multiset_counts_duplicates_and_folds_case() {
        let ex = Exchange::from_text("d", 0, "a a b", "x");
        let counts = user_token_multiset(&ex);
        assert_eq!(counts.get("a"), Some(&2));
        assert_eq!(counts.get("b"), Some(&1));
        assert_eq!(counts.len(), 2);

        let ex = Exchange::from_text("d", 0, "", "x");
        assert!(user_token_multiset(&ex).is_empty());

        let ex = Exchange::from_text("d", 0, "Depart depart", "x");
        assert_eq!(user_token_multiset(&ex).get("depart"), Some(&2));
    }

    #[test]
    fn load_empty_stream() {
        let corpus = load_corpus("".as_bytes()).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn load_single_record() {
        let corpus = load_corpus(
            r#"{"dialogue_id": "d1", "turn": 0, "user": "hi", "response": "hello"}"#.as_bytes(),
        )
        .unwrap();
        assert_eq!(corpus.dialogues.len(), 1);
        let ex = corpus.exchanges().next().unwrap();
        assert_eq!(norms(&ex.user.tokens), vec!["hi"]);
        assert_eq!(norms(&ex.response.tokens), vec!["hello"]);
        assert!(ex.context.is_none());
    }

    #[test]
    fn load_missing_field_names_field_and_line() {
        let err = load_corpus(r#"{"dialogue_id": "d1", "turn": 0, "response": "x"}"#.as_bytes())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("user"), "{msg}");
    }

    #[test]
    fn load_duplicate_turn_is_an_error() {
        let data = concat!(
            r#"{"dialogue_id": "d1", "turn": 0, "user": "a", "response": "b"}"#, "\n",
            r#"{"dialogue_id": "d1", "turn": 0, "user": "c", "response": "d"}"#, "\n",
        );
        let err = load_corpus(data.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate turn"), "{err}");
    }

    #[test]
    fn load_out_of_order_turn_is_an_error() {
        let data = concat!(
            r#"{"dialogue_id": "d1", "turn": 2, "user": "a", "response": "b"}"#, "\n",
            r#"{"dialogue_id": "d1", "turn": 1, "user": "c", "response": "d"}"#, "\n",
        );
        let err = load_corpus(data.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("out of order"), "{err}");
    }

    #[test]
    fn load_interleaved_dialogues_preserves_first_occurrence_order() {
        let data = concat!(
            r#"{"dialogue_id": "a", "turn": 0, "user": "u1", "response": "r1"}"#, "\n",
            r#"{"dialogue_id": "b", "turn": 0, "user": "u2", "response": "r2"}"#, "\n",
            r#"{"dialogue_id": "a", "turn": 1, "user": "u3", "response": "r3"}"#, "\n",
        );
        let corpus = load_corpus(data.as_bytes()).unwrap();
        assert_eq!(corpus.dialogues[0].0, "a");
        assert_eq!(corpus.dialogues[1].0, "b");
        assert_eq!(corpus.dialogues[0].1.len(), 2);
        let second = &corpus.dialogues[0].1[1];
        let ctx = second.context.as_ref().unwrap();
        assert_eq!(ctx.len(), 2);
        assert_eq!(ctx[0].raw, "u1");
        assert_eq!(ctx[1].raw, "r1");
    }

    #[test]
    fn load_duplicate_candidate_rank_is_an_error() {
        let data = r#"{"dialogue_id": "d", "turn": 0, "user": "u", "response": "r",
            "candidates": [{"text": "x", "rank": 1}, {"text": "y", "rank": 1}]}"#
            .replace('\n', " ");
        let err = load_corpus(data.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate candidate rank"), "{err}");
    }

    #[test]
    fn load_candidate_ranks_must_start_at_one() {
        let data = r#"{"dialogue_id": "d", "turn": 0, "user": "u", "response": "r",
            "candidates": [{"text": "x", "rank": 2}]}"#
            .replace('\n', " ");
        let err = load_corpus(data.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("start at 1"), "{err}");
    }

    #[test]
    fn load_is_pure_and_preserves_unknown_fields() {
        let data = r#"{"dialogue_id": "d", "turn": 3, "user": "hi there", "response": "hello", "belief": "hotel"}"#;
        let a = load_corpus(data.as_bytes()).unwrap();
        let b = load_corpus(data.as_bytes()).unwrap();
        let exa = a.exchanges().next().unwrap();
        let exb = b.exchanges().next().unwrap();
        assert_eq!(exa.extra.get("belief"), Some(&Value::from("hotel")));
        assert_eq!(exa.user.tokens, exb.user.tokens);

        let mut out = Vec::new();
        write_corpus_records(&a, &mut out).unwrap();
        let round: Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(round.get("belief"), Some(&Value::from("hotel")));
        assert_eq!(round.get("turn"), Some(&Value::from(3)));
    }

    proptest! {
        /// Re-tokenizing the space-joined normalized output is a fixed point.
        #[test]
        fn tokenize_idempotent_on_own_output(s in "[ -~]{0,60}") {
            let first = tokenize(&s);
            let joined = first
                .iter()
                .map(|t| t.normalized.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let second = tokenize(&joined);
            prop_assert_eq!(
                first.iter().map(|t| t.normalized.clone()).collect::<Vec<_>>(),
                second.iter().map(|t| t.normalized.clone()).collect::<Vec<_>>()
            );
        }

        /// No token contains internal whitespace; placeholders survive intact.
        #[test]
        fn tokens_never_contain_whitespace(s in "\\PC{0,60}") {
            for tok in tokenize(&s) {
                prop_assert!(!tok.normalized.chars().any(char::is_whitespace));
                prop_assert!(!tok.normalized.is_empty());
            }
        }

        #[test]
        fn placeholders_survive(inner in "[a-z_]{1,12}") {
            let text = format!("book the [{inner}] now");
            let toks = tokenize(&text);
            let placeholder = format!("[{inner}]");
            prop_assert!(toks.iter().any(|t| t.normalized == placeholder && t.is_placeholder));
        }
    }
}
