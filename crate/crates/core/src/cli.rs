//! Command-line driver: effective configuration, dispatch to the module
//! operations, atomic output writing and report formatting.
//!
//! Precedence is flags over config-file values over built-in defaults. Every
//! report embeds the toolkit version and the effective configuration, and
//! identical inputs + config + seed produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{load_corpus, Corpus, ExchangeRecord, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::keywords::{
    attention_keywords, blend, derive_seed, emit_training_sequence, load_attention,
    overlap_keywords, AttentionStack,
};
use crate::metrics::{aggregate, exchange_metrics};
use crate::objective::{grad_check, GradCheckConfig};
use crate::postag::{resolve_tags, tag, Lexicon};
use crate::rerank::{rerank_with, RerankOptions};
use crate::weighting::{
    materialized_copies, round6, weigh_corpus, WeightConfig, WeightFn,
};

/// Built-in defaults; the reference hyperparameter settings.
pub mod defaults {
    pub const TAU: f64 = 25.0;
    pub const W: f64 = 0.8;
    pub const BETA: f64 = 18.1;
    pub const EPS: f64 = 0.1;
    pub const THRESHOLD_T: f64 = 0.1;
    pub const ALPHA: f64 = 0.2;
    pub const SIGMA: f64 = 0.05;
    pub const SEED: u64 = 0;
    pub const RERANK_W1: f64 = 0.5;
    pub const RERANK_W2: f64 = 0.5;
    pub const LOSSCHECK_VOCAB: usize = 32;
    pub const LOSSCHECK_TRIALS: usize = 1000;
}

/// Flag > file > default.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Keyword source selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KeywordMode {
    /// Gold overlap keywords (requires references).
    Overlap,
    /// Attention-selected keywords (requires attention data).
    Attn,
    /// Bernoulli(sigma) blend of the two per record.
    Blend,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsParams {
    pub lexicon: Option<PathBuf>,
    pub per_exchange: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeighParams {
    #[serde(rename = "fn")]
    pub function: WeightFn,
    pub tau: f64,
    pub w: f64,
    pub beta: f64,
    pub eps: f64,
    pub materialize: bool,
}

impl WeighParams {
    pub fn weight_config(&self) -> WeightConfig {
        WeightConfig {
            function: self.function,
            tau: self.tau,
            w: self.w,
            beta: self.beta,
            eps: self.eps,
            ..WeightConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KeywordsParams {
    pub t: f64,
    pub sigma: f64,
    pub seed: u64,
    pub mode: KeywordMode,
    pub attention: Option<PathBuf>,
    pub emit_sequences: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RerankParams {
    pub w1: f64,
    pub w2: f64,
    pub history: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LosscheckParams {
    pub vocab: usize,
    pub trials: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TagParams {
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum CommandConfig {
    Metrics(MetricsParams),
    Weigh(WeighParams),
    Keywords(KeywordsParams),
    Rerank(RerankParams),
    Losscheck(LosscheckParams),
    Tag(TagParams),
}

impl CommandConfig {
    fn name(&self) -> &'static str {
        match self {
            CommandConfig::Metrics(_) => "metrics",
            CommandConfig::Weigh(_) => "weigh",
            CommandConfig::Keywords(_) => "keywords",
            CommandConfig::Rerank(_) => "rerank",
            CommandConfig::Losscheck(_) => "losscheck",
            CommandConfig::Tag(_) => "tag",
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub command: CommandConfig,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub json: bool,
}

/// Config file sections; every key optional, unknown keys rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub weigh: WeighSection,
    #[serde(default)]
    pub keywords: KeywordsSection,
    #[serde(default)]
    pub rerank: RerankSection,
    #[serde(default)]
    pub losscheck: LosscheckSection,
    #[serde(default)]
    pub tag: TagSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeighSection {
    #[serde(rename = "fn")]
    pub function: Option<WeightFn>,
    pub tau: Option<f64>,
    pub w: Option<f64>,
    pub beta: Option<f64>,
    pub eps: Option<f64>,
    pub materialize: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordsSection {
    pub t: Option<f64>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
    pub mode: Option<KeywordMode>,
    pub attention: Option<PathBuf>,
    pub emit_sequences: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankSection {
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub history: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LosscheckSection {
    pub vocab: Option<usize>,
    pub trials: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagSection {
    pub lexicon: Option<PathBuf>,
}

/// Parse a TOML config file. Unknown keys are errors.
pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// What a run produced: the one-line summary, the full JSON report, and the
/// process exit code (0 success, 2 numerical failure).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: String,
    pub report: Value,
    pub exit_code: u8,
}

/// Dispatch a resolved configuration. Output files are written atomically
/// (temp file in the target directory, then rename).
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    match &config.command {
        CommandConfig::Metrics(params) => run_metrics(config, params),
        CommandConfig::Weigh(params) => run_weigh(config, params),
        CommandConfig::Keywords(params) => run_keywords(config, params),
        CommandConfig::Rerank(params) => run_rerank(config, params),
        CommandConfig::Losscheck(params) => run_losscheck(config, params),
        CommandConfig::Tag(params) => run_tag(config, params),
    }
}

fn open_corpus(config: &RunConfig) -> Result<Corpus> {
    let path = config.input.as_ref().ok_or_else(|| {
        Error::Config(format!("{} requires --input", config.command.name()))
    })?;
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    load_corpus(BufReader::new(file))
}

fn require_output<'a>(config: &'a RunConfig) -> Result<&'a Path> {
    config.output.as_deref().ok_or_else(|| {
        Error::Config(format!("{} requires --output", config.command.name()))
    })
}

fn effective_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    match path {
        Some(p) => Lexicon::load(p),
        None => Ok(Lexicon::default_english().clone()),
    }
}

/// Write via a temp file in the destination directory, then rename.
fn write_atomic(path: &Path, write_fn: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    write_fn(&mut tmp)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_report_file(path: &Path, report: &Value) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, report)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn base_report(config: &RunConfig) -> Value {
    json!({
        "version": crate::VERSION,
        "config": config,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "n/a".to_string(),
    }
}

fn run_metrics(config: &RunConfig, params: &MetricsParams) -> Result<RunOutput> {
    let corpus = open_corpus(config)?;
    let lexicon = effective_lexicon(params.lexicon.as_deref())?;
    let report = aggregate(&corpus, &lexicon)?;

    if let Some(tsv_path) = &params.per_exchange {
        write_atomic(tsv_path, |w| {
            writeln!(w, "dialogue_id\tturn\tlex_p1\tlex_r1\tsyn_p2\tsyn_p3")?;
            for ex in corpus.exchanges() {
                let m = exchange_metrics(ex, &lexicon)?;
                writeln!(
                    w,
                    "{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
                    ex.dialogue_id, ex.turn_index, m.lex_p1, m.lex_r1, m.syn_p2, m.syn_p3
                )?;
            }
            Ok(())
        })?;
    }

    let mut full = base_report(config);
    full["report"] = serde_json::to_value(&report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    if let Some(out) = &config.output {
        write_report_file(out, &full)?;
    }
    let summary = format!(
        "metrics: {} exchanges | lex_p1 {:.2} lex_r1 {:.2} syn_p2 {:.2} syn_p3 {:.2} | 50mfc {} | bleu {} delex {}",
        report.n_exchanges,
        report.lex_p1,
        report.lex_r1,
        report.syn_p2,
        report.syn_p3,
        report.mfc50.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
        fmt_opt(report.bleu),
        fmt_opt(report.delex_bleu),
    );
    Ok(RunOutput {
        summary,
        report: full,
        exit_code: 0,
    })
}

fn run_weigh(config: &RunConfig, params: &WeighParams) -> Result<RunOutput> {
    let corpus = open_corpus(config)?;
    let out_path = require_output(config)?;
    let cfg = params.weight_config();
    let weighted: Vec<(f64, f64)> = weigh_corpus(&corpus, &cfg)?
        .iter()
        .map(|wi| (wi.p, wi.weight))
        .collect();

    let mut corpus = corpus;
    for (ex, (p, wt)) in corpus.exchanges_mut().zip(&weighted) {
        ex.extra.insert("overlap_p".into(), json!(round6(*p)));
        ex.extra.insert("weight".into(), json!(round6(*wt)));
    }

    let mut n_written = 0usize;
    write_atomic(out_path, |w| {
        for (ex, (_, wt)) in corpus.exchanges().zip(&weighted) {
            let record = ExchangeRecord::from_exchange(ex);
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            let copies = if params.materialize {
                materialized_copies(*wt)
            } else {
                1
            };
            for _ in 0..copies {
                writeln!(w, "{line}")?;
                n_written += 1;
            }
        }
        Ok(())
    })?;

    let n = weighted.len();
    let mean = if n == 0 {
        0.0
    } else {
        weighted.iter().map(|(_, w)| w).sum::<f64>() / n as f64
    };
    let mut full = base_report(config);
    full["report"] = json!({
        "n_instances": n,
        "n_records_written": n_written,
        "mean_weight": round6(mean),
    });
    if let Some(out) = &config.output {
        let _ = out; // JSONL already written above
    }
    let summary = format!(
        "weigh: {} instances | fn {:?} | mean weight {:.6} | wrote {} records to {}",
        n,
        params.function,
        mean,
        n_written,
        out_path.display()
    );
    Ok(RunOutput {
        summary,
        report: full,
        exit_code: 0,
    })
}

fn context_text(ex: &crate::corpus::Exchange) -> String {
    let mut parts: Vec<&str> = Vec::new();
    if let Some(history) = &ex.context {
        parts.extend(history.iter().map(|u| u.raw.as_str()));
    }
    parts.push(ex.user.raw.as_str());
    parts.join(" ")
}

fn extra_text(ex: &crate::corpus::Exchange, key: &str) -> String {
    ex.extra
        .get(key)
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string()
}

fn run_keywords(config: &RunConfig, params: &KeywordsParams) -> Result<RunOutput> {
    let mut corpus = open_corpus(config)?;
    let out_path = require_output(config)?;
    let attention: Option<BTreeMap<(String, u32), AttentionStack>> = params
        .attention
        .as_ref()
        .map(|p| -> Result<_> {
            let file = File::open(p)
                .map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))?;
            load_attention(BufReader::new(file))
        })
        .transpose()?;
    if matches!(params.mode, KeywordMode::Attn | KeywordMode::Blend) && attention.is_none() {
        return Err(Error::Config(format!(
            "mode {:?} requires --attention",
            params.mode
        )));
    }

    let mut n_attention_branch = 0usize;
    let mut n_empty = 0usize;
    let exchanges: Vec<_> = corpus.exchanges_mut().collect();
    for (idx, ex) in exchanges.into_iter().enumerate() {
        let attn_selection = match &attention {
            Some(map) => match map.get(&(ex.dialogue_id.clone(), ex.turn_index)) {
                Some(stack) => Some(attention_keywords(stack, params.t)?),
                None => None,
            },
            None => None,
        };
        let need_attn = matches!(params.mode, KeywordMode::Attn | KeywordMode::Blend);
        if need_attn && attn_selection.is_none() {
            return Err(Error::exchange(
                &ex.dialogue_id,
                ex.turn_index,
                "no attention entry for this exchange",
            ));
        }

        let chosen: Vec<String> = match params.mode {
            KeywordMode::Overlap => overlap_keywords(ex)?,
            KeywordMode::Attn => attn_selection.expect("checked above").selected,
            KeywordMode::Blend => {
                let overlap = overlap_keywords(ex)?;
                let attn = attn_selection.expect("checked above").selected;
                let (kws, used_attn) = blend(
                    &overlap,
                    &attn,
                    params.sigma,
                    derive_seed(params.seed, idx as u64),
                )?;
                if used_attn {
                    n_attention_branch += 1;
                }
                kws.to_vec()
            }
        };
        if matches!(params.mode, KeywordMode::Attn) {
            n_attention_branch += 1;
        }
        if chosen.is_empty() {
            n_empty += 1;
        }

        if params.emit_sequences {
            let seq = emit_training_sequence(
                &context_text(ex),
                &extra_text(ex, "belief"),
                &extra_text(ex, "database"),
                &chosen,
            );
            ex.extra.insert("training_sequence".into(), json!(seq));
        }
        ex.extra.insert("keywords".into(), json!(chosen));
    }

    write_atomic(out_path, |w| {
        crate::corpus::write_corpus_records(&corpus, w)
    })?;

    let n = corpus.n_exchanges();
    let mut full = base_report(config);
    full["report"] = json!({
        "n_exchanges": n,
        "n_attention_branch": n_attention_branch,
        "n_empty_keyword_lists": n_empty,
    });
    let summary = format!(
        "keywords: {} exchanges | mode {:?} | attention branch {} | empty lists {} | wrote {}",
        n,
        params.mode,
        n_attention_branch,
        n_empty,
        out_path.display()
    );
    Ok(RunOutput {
        summary,
        report: full,
        exit_code: 0,
    })
}

fn run_rerank(config: &RunConfig, params: &RerankParams) -> Result<RunOutput> {
    let mut corpus = open_corpus(config)?;
    let out_path = require_output(config)?;
    let opts = RerankOptions {
        w_unigram: params.w1,
        w_bigram: params.w2,
        use_history: params.history,
    };
    let mut n_changed_top = 0usize;
    for ex in corpus.exchanges_mut() {
        let reranked = rerank_with(ex, &opts)?;
        if reranked[0].model_rank != 1 {
            n_changed_top += 1;
        }
        ex.response = Utterance::new(Speaker::System, &reranked[0].text.clone());
        ex.candidates = Some(reranked);
    }

    write_atomic(out_path, |w| {
        crate::corpus::write_corpus_records(&corpus, w)
    })?;

    let n = corpus.n_exchanges();
    let mut full = base_report(config);
    full["report"] = json!({
        "n_exchanges": n,
        "n_new_top_candidate": n_changed_top,
    });
    let summary = format!(
        "rerank: {} exchanges | new top candidate in {} | wrote {}",
        n,
        n_changed_top,
        out_path.display()
    );
    Ok(RunOutput {
        summary,
        report: full,
        exit_code: 0,
    })
}

fn run_losscheck(config: &RunConfig, params: &LosscheckParams) -> Result<RunOutput> {
    let report = grad_check(&GradCheckConfig {
        trials: params.trials,
        max_vocab: params.vocab,
        alpha: Some(params.alpha),
        seed: params.seed,
    })?;
    let mut full = base_report(config);
    full["report"] = serde_json::to_value(&report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    if let Some(out) = &config.output {
        write_report_file(out, &full)?;
    }
    let summary = format!(
        "losscheck: {} trials | max rel err {:.3e} (tol {:.0e}): {}",
        report.trials,
        report.max_rel_err,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(RunOutput {
        summary,
        report: full,
        exit_code: if report.passed { 0 } else { 2 },
    })
}

fn run_tag(config: &RunConfig, params: &TagParams) -> Result<RunOutput> {
    let mut corpus = open_corpus(config)?;
    let out_path = require_output(config)?;
    let lexicon = effective_lexicon(params.lexicon.as_deref())?;

    let mut n_filled = 0usize;
    for ex in corpus.exchanges_mut() {
        // Validates provided tag sequences even when nothing is filled.
        resolve_tags(ex, &lexicon)?;
        if ex.user_pos.is_none() {
            ex.user_pos = Some(tag(&ex.user.tokens, &lexicon).iter().map(ToString::to_string).collect());
            n_filled += 1;
        }
        if ex.response_pos.is_none() {
            ex.response_pos =
                Some(tag(&ex.response.tokens, &lexicon).iter().map(ToString::to_string).collect());
        }
    }

    write_atomic(out_path, |w| {
        crate::corpus::write_corpus_records(&corpus, w)
    })?;

    let n = corpus.n_exchanges();
    let mut full = base_report(config);
    full["report"] = json!({
        "n_exchanges": n,
        "n_user_sides_tagged": n_filled,
    });
    let summary = format!(
        "tag: {} exchanges | tagged {} user sides | wrote {}",
        n,
        n_filled,
        out_path.display()
    );
    Ok(RunOutput {
        summary,
        report: full,
        exit_code: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_precedence() {
        assert_eq!(resolve(Some(20.0), Some(30.0), 25.0), 20.0);
        assert_eq!(resolve(None, Some(30.0), 25.0), 30.0);
        assert_eq!(resolve::<f64>(None, None, 25.0), 25.0);
    }

    #[test]
    fn empty_config_file_is_all_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert!(cfg.seed.is_none());
        assert!(cfg.weigh.tau.is_none());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = toml::from_str::<FileConfig>("[weigh]\ntaus = 30.0\n").unwrap_err();
        assert!(err.to_string().contains("taus"), "{err}");
    }

    #[test]
    fn sections_parse() {
        let cfg: FileConfig = toml::from_str(
            "seed = 9\n[weigh]\nfn = \"w2\"\ntau = 30.0\n[keywords]\nmode = \"blend\"\nsigma = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.weigh.function, Some(WeightFn::W2));
        assert_eq!(cfg.weigh.tau, Some(30.0));
        assert_eq!(cfg.keywords.mode, Some(KeywordMode::Blend));
    }

    #[test]
    fn losscheck_runs_and_passes() {
        let config = RunConfig {
            command: CommandConfig::Losscheck(LosscheckParams {
                vocab: 16,
                trials: 50,
                alpha: defaults::ALPHA,
                seed: 7,
            }),
            input: None,
            output: None,
            json: false,
        };
        let out = run(&config).unwrap();
        assert_eq!(out.exit_code, 0);
        assert!(out.summary.contains("PASS"), "{}", out.summary);
        assert_eq!(out.report["version"], crate::VERSION);
        assert_eq!(out.report["config"]["command"], "losscheck");
    }

    #[test]
    fn corpus_commands_require_input_and_output() {
        let config = RunConfig {
            command: CommandConfig::Metrics(MetricsParams {
                lexicon: None,
                per_exchange: None,
            }),
            input: None,
            output: None,
            json: false,
        };
        assert!(matches!(run(&config), Err(Error::Config(_))));
    }
}
