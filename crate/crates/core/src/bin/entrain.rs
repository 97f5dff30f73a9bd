//! `entrain` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use entrain::cli::{
    self, defaults, resolve, CommandConfig, FileConfig, KeywordMode, KeywordsParams,
    LosscheckParams, MetricsParams, RerankParams, RunConfig, TagParams, WeighParams,
};
use entrain::weighting::WeightFn;

#[derive(Parser)]
#[command(
    name = "entrain",
    version,
    about = "Measure and optimize lexical entrainment in dialogue corpora"
)]
struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Print the full JSON report to standard output
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Args)]
struct IoArgs {
    /// Exchange JSONL input
    #[arg(short, long, value_name = "PATH")]
    input: PathBuf,

    /// Output path
    #[arg(short, long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Commands {
    /// Compute entrainment metrics and a corpus report
    Metrics {
        #[command(flatten)]
        io: IoArgs,
        /// Write per-exchange scores as TSV
        #[arg(long, value_name = "PATH")]
        per_exchange: Option<PathBuf>,
        /// POS lexicon file (default: built-in English lexicon)
        #[arg(long, value_name = "PATH")]
        lexicon: Option<PathBuf>,
    },
    /// Annotate training instances with entrainment weights
    Weigh {
        #[command(flatten)]
        io: IoArgs,
        /// Weight function
        #[arg(long = "fn", value_enum, value_name = "FN")]
        function: Option<WeightFn>,
        /// Step threshold of w1 (percent overlap)
        #[arg(long)]
        tau: Option<f64>,
        /// Sigmoid spread of w2
        #[arg(long)]
        w: Option<f64>,
        /// Sigmoid midpoint of w2 (percent overlap)
        #[arg(long)]
        beta: Option<f64>,
        /// Weight floor of w2
        #[arg(long)]
        eps: Option<f64>,
        /// Duplicate each record round(weight) times instead of annotating only
        #[arg(long)]
        materialize: bool,
    },
    /// Extract keywords and emit keyword-conditioned training records
    Keywords {
        #[command(flatten)]
        io: IoArgs,
        /// Selection threshold: keep scores >= t * max score
        #[arg(long)]
        t: Option<f64>,
        /// Probability of using attention keywords instead of overlap keywords
        #[arg(long)]
        sigma: Option<f64>,
        /// Seed of the per-record blending draws
        #[arg(long)]
        seed: Option<u64>,
        /// Keyword source
        #[arg(long, value_enum)]
        mode: Option<KeywordMode>,
        /// Attention JSONL keyed by (dialogue_id, turn)
        #[arg(long, value_name = "PATH")]
        attention: Option<PathBuf>,
        /// Also write serialized training sequences
        #[arg(long)]
        emit_sequences: bool,
    },
    /// Rerank candidate responses by n-gram match with the user context
    Rerank {
        #[command(flatten)]
        io: IoArgs,
        /// Weight of the unigram precision component
        #[arg(long)]
        w1: Option<f64>,
        /// Weight of the bigram precision component
        #[arg(long)]
        w2: Option<f64>,
        /// Match against the full dialogue history, not just the current turn
        #[arg(long)]
        history: bool,
    },
    /// Verify the analytic user-likelihood gradient against finite differences
    Losscheck {
        /// Maximum vocabulary size per trial
        #[arg(long)]
        vocab: Option<usize>,
        /// Number of random trials
        #[arg(long)]
        trials: Option<usize>,
        /// Loss weight alpha
        #[arg(long)]
        alpha: Option<f64>,
        /// Seed of the random draws
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report to a file
        #[arg(short, long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Fill missing POS tag fields in exchange records
    Tag {
        #[command(flatten)]
        io: IoArgs,
        /// POS lexicon file (default: built-in English lexicon)
        #[arg(long, value_name = "PATH")]
        lexicon: Option<PathBuf>,
    },
}

fn build_config(cli: Cli, file: FileConfig) -> RunConfig {
    let json = cli.json;
    match cli.command {
        Commands::Metrics {
            io,
            per_exchange,
            lexicon,
        } => RunConfig {
            command: CommandConfig::Metrics(MetricsParams {
                lexicon: lexicon.or(file.metrics.lexicon),
                per_exchange,
            }),
            input: Some(io.input),
            output: io.output,
            json,
        },
        Commands::Weigh {
            io,
            function,
            tau,
            w,
            beta,
            eps,
            materialize,
        } => RunConfig {
            command: CommandConfig::Weigh(WeighParams {
                function: resolve(function, file.weigh.function, WeightFn::W1),
                tau: resolve(tau, file.weigh.tau, defaults::TAU),
                w: resolve(w, file.weigh.w, defaults::W),
                beta: resolve(beta, file.weigh.beta, defaults::BETA),
                eps: resolve(eps, file.weigh.eps, defaults::EPS),
                materialize: materialize || file.weigh.materialize.unwrap_or(false),
            }),
            input: Some(io.input),
            output: io.output,
            json,
        },
        Commands::Keywords {
            io,
            t,
            sigma,
            seed,
            mode,
            attention,
            emit_sequences,
        } => RunConfig {
            command: CommandConfig::Keywords(KeywordsParams {
                t: resolve(t, file.keywords.t, defaults::THRESHOLD_T),
                sigma: resolve(sigma, file.keywords.sigma, defaults::SIGMA),
                seed: resolve(seed, file.keywords.seed.or(file.seed), defaults::SEED),
                mode: resolve(mode, file.keywords.mode, KeywordMode::Overlap),
                attention: attention.or(file.keywords.attention),
                emit_sequences: emit_sequences || file.keywords.emit_sequences.unwrap_or(false),
            }),
            input: Some(io.input),
            output: io.output,
            json,
        },
        Commands::Rerank { io, w1, w2, history } => RunConfig {
            command: CommandConfig::Rerank(RerankParams {
                w1: resolve(w1, file.rerank.w1, defaults::RERANK_W1),
                w2: resolve(w2, file.rerank.w2, defaults::RERANK_W2),
                history: history || file.rerank.history.unwrap_or(false),
            }),
            input: Some(io.input),
            output: io.output,
            json,
        },
        Commands::Losscheck {
            vocab,
            trials,
            alpha,
            seed,
            output,
        } => RunConfig {
            command: CommandConfig::Losscheck(LosscheckParams {
                vocab: resolve(vocab, file.losscheck.vocab, defaults::LOSSCHECK_VOCAB),
                trials: resolve(trials, file.losscheck.trials, defaults::LOSSCHECK_TRIALS),
                alpha: resolve(alpha, file.losscheck.alpha, defaults::ALPHA),
                seed: resolve(seed, file.losscheck.seed.or(file.seed), defaults::SEED),
            }),
            input: None,
            output,
            json,
        },
        Commands::Tag { io, lexicon } => RunConfig {
            command: CommandConfig::Tag(TagParams {
                lexicon: lexicon.or(file.tag.lexicon),
            }),
            input: Some(io.input),
            output: io.output,
            json,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => match cli::load_config(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("entrain: {e}");
                return ExitCode::from(e.exit_code());
            }
        },
        None => FileConfig::default(),
    };
    let config = build_config(cli, file);
    match cli::run(&config) {
        Ok(output) => {
            println!("{}", output.summary);
            if config.json {
                match serde_json::to_string_pretty(&output.report) {
                    Ok(text) => println!("{text}"),
                    Err(e) => {
                        eprintln!("entrain: cannot serialize report: {e}");
                        return ExitCode::from(1);
                    }
                }
            }
            ExitCode::from(output.exit_code)
        }
        Err(e) => {
            eprintln!("entrain: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
