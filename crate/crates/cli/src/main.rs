//! `translit`: train, evaluate and run character-level transliteration models.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use translit::data::load_corpus;
use translit::decoding::{format_nbest, transliterate_all};
use translit::metrics::score_file;
use translit::training::evaluate_with_outputs;
use translit::{train, Checkpoint, DecodeOptions, Error, TrainConfig};

#[derive(Parser)]
#[command(name = "translit", version, about = "Attention-based neural transliteration")]
struct Cli {
    /// Flat `key = value` training config; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for decoding (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its best checkpoint and learning curve.
    Train(TrainArgs),
    /// Decode a test corpus and print ACC, F-score, MRR and MAP.
    Eval(EvalArgs),
    /// Print n-best transliterations for words.
    Translit(TranslitArgs),
    /// Score an n-best file against references.
    Score(ScoreArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (`source<TAB>ref1[<TAB>ref2...]`).
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Development corpus used for model selection.
    #[arg(long, value_name = "FILE")]
    dev: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// One flag per config key.
#[derive(Args)]
struct Overrides {
    /// Hidden units per encoder direction and in the decoder.
    #[arg(long)]
    hidden: Option<usize>,
    /// Character embedding size.
    #[arg(long)]
    embed: Option<usize>,
    /// Attention layer size.
    #[arg(long)]
    attention: Option<usize>,
    /// Sequence pairs per minibatch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Global gradient-norm clipping threshold.
    #[arg(long)]
    clip_threshold: Option<f64>,
    /// Adam step size.
    #[arg(long)]
    alpha: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam denominator epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without dev improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Beam width used to decode the dev set each epoch.
    #[arg(long)]
    beam_width_for_dev: Option<usize>,
    /// Learning-curve CSV, rewritten after every epoch.
    #[arg(long, alias = "curve", value_name = "FILE")]
    curve_path: Option<PathBuf>,
    /// Best checkpoint, rewritten whenever dev results improve.
    #[arg(long, alias = "checkpoint", value_name = "FILE")]
    checkpoint_path: Option<PathBuf>,
    /// Record elapsed seconds in the curve (false writes 0 for reproducible files).
    #[arg(long, value_name = "BOOL")]
    wall_clock: Option<bool>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        [
            ("hidden", s(&self.hidden)),
            ("embed", s(&self.embed)),
            ("attention", s(&self.attention)),
            ("batch_size", s(&self.batch_size)),
            ("clip_threshold", s(&self.clip_threshold)),
            ("alpha", s(&self.alpha)),
            ("beta1", s(&self.beta1)),
            ("beta2", s(&self.beta2)),
            ("epsilon", s(&self.epsilon)),
            ("max_epochs", s(&self.max_epochs)),
            ("patience", s(&self.patience)),
            ("beam_width_for_dev", s(&self.beam_width_for_dev)),
            ("curve_path", path(&self.curve_path)),
            ("checkpoint_path", path(&self.checkpoint_path)),
            ("wall_clock", s(&self.wall_clock)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam width.
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// Candidates kept per word (default: min(10, beam)).
    #[arg(long)]
    nbest: Option<usize>,
    /// Maximum output length (default: 3 × source length + 5).
    #[arg(long)]
    max_len: Option<usize>,
}

impl DecodeArgs {
    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            beam_width: self.beam,
            max_len: self.max_len,
            n_best: self.nbest.unwrap_or(self.beam.min(10)),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Test corpus with references.
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Also write the decoded n-best lists here.
    #[arg(long, value_name = "FILE")]
    nbest_out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct TranslitArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// A single word to transliterate.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    word: Option<String>,
    /// One word per line; anything after a tab is ignored, so corpus files work too.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Write the n-best TSV here instead of standard output.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct ScoreArgs {
    /// N-best TSV: `source<TAB>rank<TAB>candidate[<TAB>...]`.
    #[arg(long, value_name = "FILE")]
    nbest: PathBuf,
    /// Reference corpus.
    #[arg(long, value_name = "FILE")]
    references: PathBuf,
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &Overrides) -> translit::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for (key, value) in overrides.pairs() {
        cfg.set(key, &value)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e).into()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed, &args.overrides)?;
    if cfg.checkpoint_path.is_none() || cfg.curve_path.is_none() {
        return Err(Error::Config("train needs --checkpoint-path and --curve-path (or config keys)".into()).into());
    }
    let train_pairs = load_corpus(&args.train)?;
    let dev_pairs = load_corpus(&args.dev)?;
    let report = train(&cfg, &train_pairs, &dev_pairs)?;
    let best = &report.curve[report.best_epoch - 1];
    let summary = format!(
        "metric,value\nbest_epoch,{}\nacc,{:?}\nfscore,{:?}\nmrr,{:?}\nmap,{:?}\n",
        report.best_epoch, best.dev_acc, best.dev_fscore, best.dev_mrr, best.dev_map
    );
    write_output(None, &summary)
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let pairs = load_corpus(&args.test)?;
    let opts = args.decode.options();
    let (report, outputs) = evaluate_with_outputs(&ckpt, &pairs, &opts)?;
    if let Some(path) = &args.nbest_out {
        let text: String = pairs
            .iter()
            .zip(&outputs)
            .map(|(p, c)| format_nbest(&p.source, c))
            .collect();
        write_output(Some(path), &text)?;
    }
    log::info!("{}", report.to_text().trim_end());
    write_output(None, &report.to_csv())
}

fn cmd_translit(args: &TranslitArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let words: Vec<String> = match (&args.word, &args.input) {
        (Some(w), _) => vec![w.clone()],
        (None, Some(path)) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .lines()
            .map(|l| l.split('\t').next().unwrap_or_default().trim_end_matches('\r'))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect(),
        (None, None) => return Err(anyhow!("either --word or --input is required")),
    };
    let outputs = transliterate_all(&ckpt, &words, &args.decode.options())?;
    let text: String = words
        .iter()
        .zip(&outputs)
        .map(|(w, c)| format_nbest(w, c))
        .collect();
    write_output(args.output.as_deref(), &text)
}

fn cmd_score(args: &ScoreArgs) -> anyhow::Result<()> {
    let report = score_file(&args.nbest, &args.references)?;
    log::info!("{}", report.to_text().trim_end());
    write_output(None, &report.to_csv())
}

/// 3 for aborts during computation, 2 for everything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. } | Error::Shape { .. } | Error::Contract(_) | Error::InvalidMask) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Translit(a) => cmd_translit(a),
        Command::Score(a) => cmd_score(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
