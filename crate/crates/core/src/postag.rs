//! Coarse part-of-speech tagging for the syntactic entrainment metrics,
//! with a verbatim passthrough for externally tagged data.
//!
//! The tagger is deliberately small and rule-based: punctuation and numeric
//! tokens are tagged directly, everything else goes through an auditable
//! lexicon and then longest-suffix-first rules. Records that already carry
//! `user_pos`/`response_pos` fields bypass it entirely.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{Exchange, Token};
use crate::error::{Error, Result};

/// Coarse universal POS category. `X` is the only fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Adv,
    Pron,
    Det,
    Adp,
    Num,
    Conj,
    Prt,
    Punct,
    X,
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Det => "DET",
            PosTag::Adp => "ADP",
            PosTag::Num => "NUM",
            PosTag::Conj => "CONJ",
            PosTag::Prt => "PRT",
            PosTag::Punct => "PUNCT",
            PosTag::X => "X",
        };
        f.write_str(name)
    }
}

impl FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NOUN" => Ok(PosTag::Noun),
            "VERB" => Ok(PosTag::Verb),
            "ADJ" => Ok(PosTag::Adj),
            "ADV" => Ok(PosTag::Adv),
            "PRON" => Ok(PosTag::Pron),
            "DET" => Ok(PosTag::Det),
            "ADP" => Ok(PosTag::Adp),
            "NUM" => Ok(PosTag::Num),
            "CONJ" => Ok(PosTag::Conj),
            "PRT" => Ok(PosTag::Prt),
            "PUNCT" => Ok(PosTag::Punct),
            "X" => Ok(PosTag::X),
            other => Err(format!("unknown POS tag '{other}'")),
        }
    }
}

/// Exact-match entries plus ordered suffix rules. Entries take precedence;
/// suffix rules apply longest-suffix-first.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, PosTag>,
    suffix_rules: Vec<(String, PosTag)>,
}

static DEFAULT_ENGLISH: OnceLock<Lexicon> = OnceLock::new();
const DEFAULT_LEXICON_TEXT: &str = include_str!("../data/english.lex");

impl Lexicon {
    pub fn new(entries: HashMap<String, PosTag>, suffix_rules: Vec<(String, PosTag)>) -> Self {
        let mut lexicon = Lexicon {
            entries,
            suffix_rules,
        };
        // Longest suffix first; equal lengths keep their given order.
        lexicon.suffix_rules.sort_by_key(|(s, _)| std::cmp::Reverse(s.len()));
        lexicon
    }

    /// Parse the lexicon file format: `token<TAB>TAG` lines, then a
    /// `#suffix` marker, then `suffix<TAB>TAG` lines. Other `#` lines are
    /// comments. Later duplicate entries win.
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut entries = HashMap::new();
        let mut suffix_rules = Vec::new();
        let mut in_suffix_section = false;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if line == "#suffix" {
                in_suffix_section = true;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let (key, tag_name) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("lexicon line {line_no}: expected token<TAB>TAG"))
            })?;
            let tag = PosTag::from_str(tag_name.trim())
                .map_err(|e| Error::Config(format!("lexicon line {line_no}: {e}")))?;
            if in_suffix_section {
                suffix_rules.push((key.to_string(), tag));
            } else {
                entries.insert(key.to_string(), tag);
            }
        }
        Ok(Lexicon::new(entries, suffix_rules))
    }

    pub fn load(path: &std::path::Path) -> Result<Lexicon> {
        Lexicon::parse(&std::fs::read_to_string(path)?)
    }

    /// The shipped English lexicon: function words, frequent booking-domain
    /// vocabulary, common delexicalization placeholders, and suffix rules.
    pub fn default_english() -> &'static Lexicon {
        DEFAULT_ENGLISH.get_or_init(|| {
            Lexicon::parse(DEFAULT_LEXICON_TEXT).expect("embedded lexicon parses")
        })
    }

    fn lookup(&self, normalized: &str) -> Option<PosTag> {
        if let Some(tag) = self.entries.get(normalized) {
            return Some(*tag);
        }
        for (suffix, tag) in &self.suffix_rules {
            if normalized.len() > suffix.len() && normalized.ends_with(suffix.as_str()) {
                return Some(*tag);
            }
        }
        None
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }
}

fn is_punct_token(normalized: &str) -> bool {
    !normalized.is_empty() && normalized.chars().all(|c| c.is_ascii_punctuation())
}

fn is_numeric_token(normalized: &str) -> bool {
    normalized.chars().any(|c| c.is_ascii_digit())
        && normalized
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | ':' | ','))
}

/// Tag a token sequence: punctuation → PUNCT, numeric/time → NUM, then
/// lexicon entries, then suffix rules, else X. One tag per token.
pub fn tag(tokens: &[Token], lexicon: &Lexicon) -> Vec<PosTag> {
    tokens
        .iter()
        .map(|tok| {
            let normalized = tok.normalized.as_str();
            if is_punct_token(normalized) {
                PosTag::Punct
            } else if is_numeric_token(normalized) {
                PosTag::Num
            } else {
                lexicon.lookup(normalized).unwrap_or(PosTag::X)
            }
        })
        .collect()
}

fn parse_provided(ex: &Exchange, provided: &[String], n_tokens: usize, side: &str) -> Result<Vec<PosTag>> {
    if provided.len() != n_tokens {
        return Err(Error::exchange(
            &ex.dialogue_id,
            ex.turn_index,
            format!(
                "{side} POS sequence has {} tags for {} tokens",
                provided.len(),
                n_tokens
            ),
        ));
    }
    provided
        .iter()
        .map(|s| {
            PosTag::from_str(s)
                .map_err(|e| Error::exchange(&ex.dialogue_id, ex.turn_index, format!("{side}: {e}")))
        })
        .collect()
}

/// POS sequences for the user and response sides. Provided tags are used
/// verbatim when present and length-matched; otherwise [`tag`] runs.
pub fn resolve_tags(ex: &Exchange, lexicon: &Lexicon) -> Result<(Vec<PosTag>, Vec<PosTag>)> {
    let user_tags = match &ex.user_pos {
        Some(provided) => parse_provided(ex, provided, ex.user.tokens.len(), "user")?,
        None => tag(&ex.user.tokens, lexicon),
    };
    let response_tags = match &ex.response_pos {
        Some(provided) => parse_provided(ex, provided, ex.response.tokens.len(), "response")?,
        None => tag(&ex.response.tokens, lexicon),
    };
    Ok((user_tags, response_tags))
}
