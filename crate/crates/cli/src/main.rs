//! `gdtm`: preprocess time-stamped text, train a dynamic topic model,
//! and query it — perplexity, trajectories, and top-word tables.
//!
//! stdout carries only machine-readable data (JSON or CSV); diagnostics
//! go to stderr. Exit codes: 0 success, 1 input/pipeline errors,
//! 2 usage (clap), 3 numeric failures.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gdtm::corpus::{
    build_vocabulary, encode, split_by_timestamps, EncodedCorpus, RawDocument, ScoreFilter,
};
use gdtm::evaluation::{heldout_perplexity, top_words, topics_at_time, word_trajectory};
use gdtm::inference::{train, StepRecord, TrainOptions};
use gdtm::kernels::KernelSpec;
use gdtm::state::{init_model, Checkpoint, ModelConfig};
use gdtm::Error;

const DEFAULT_STOPWORDS: &str = include_str!("stopwords.txt");

#[derive(Parser)]
#[command(name = "gdtm", version, about = "Dynamic topic models with Gaussian-process priors")]
struct Cli {
    /// Worker thread cap (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Chatty progress on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a binary corpus from time-stamped text.
    Preprocess(PreprocessArgs),
    /// Run stochastic variational inference, writing checkpoints and history.
    Train(TrainArgs),
    /// Held-out perplexity on a timestamp split.
    Eval(EvalArgs),
    /// Per-word probability series for one topic over a time grid (CSV).
    Trajectories(TrajectoriesArgs),
    /// Top words of every topic at one time point.
    Topics(TopicsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// One JSON object per line: {"id", "timestamp", "text"}.
    Jsonl,
    /// timestamp<TAB>text per line.
    Tsv,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input documents (JSONL or TSV).
    #[arg(long)]
    input: PathBuf,
    /// Output corpus file.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
    /// Stop-word file (one word per line); a built-in English list by default.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Disable stop-word removal entirely.
    #[arg(long)]
    no_stopwords: bool,
    /// Drop words occurring fewer than this many times corpus-wide.
    #[arg(long, default_value_t = 25)]
    min_count: u64,
    /// Keep only the top-scoring terms by tf-idf.
    #[arg(long, default_value_t = 20_000)]
    max_terms: usize,
    /// Keep terms with tf-idf score at or above this instead of --max-terms.
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Drop documents with fewer in-vocabulary tokens than this.
    #[arg(long, default_value_t = 10)]
    min_doc_tokens: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file from `preprocess`.
    #[arg(long)]
    corpus: PathBuf,
    /// Run configuration (TOML). Optional if --kernel and --topics are given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, history.csv, and the effective config.
    #[arg(long)]
    output_dir: PathBuf,
    /// Number of SVI steps (overrides the config file).
    #[arg(long)]
    steps: Option<u64>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from <output-dir>/latest.bin.
    #[arg(long)]
    resume: bool,
    /// Constant step size in (0, 1] instead of the decaying schedule.
    #[arg(long)]
    step_override: Option<f64>,
    /// Write checkpoint-<step>.bin every this many steps (0 = final only).
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Record wall-clock seconds in history.csv (off by default so fixed
    /// seeds give byte-identical histories).
    #[arg(long)]
    timing: bool,
    /// Train on this fraction of unique timestamps (< 1.0 holds the rest out).
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Seed for the timestamp split.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Number of topics (overrides the config file).
    #[arg(long)]
    topics: Option<usize>,
    /// Minibatch size (overrides the config file).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of inducing points (overrides the config file).
    #[arg(long)]
    inducing: Option<usize>,
    /// Inline kernel spec, e.g. 'variant = "ou", sigma2 = 1.0, length_scale = 0.2'.
    #[arg(long)]
    kernel: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// The full corpus; the held-out side of the split is evaluated.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fraction of unique timestamps that were used for training.
    #[arg(long, default_value_t = 0.85)]
    train_fraction: f64,
    /// Seed of the timestamp split (must match training).
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Seed for the fold-in token interleave.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrajectoriesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    topic: usize,
    /// Comma-separated words.
    #[arg(long, value_delimiter = ',')]
    words: Vec<String>,
    /// Time grid start:stop:count on the original time scale.
    #[arg(long)]
    grid: Option<String>,
    /// Explicit comma-separated times instead of --grid.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TopicsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query time on the original scale.
    #[arg(long)]
    time: f64,
    /// Words per topic.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

/// Training-run file: a `ModelConfig` plus loop controls, flat TOML with
/// one nested table for the kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    #[serde(flatten)]
    model: ModelConfig,
    #[serde(default = "default_steps")]
    steps: u64,
    /// 0 = checkpoint only at the end.
    #[serde(default)]
    checkpoint_interval: u64,
    /// 1.0 = train on every timestamp.
    #[serde(default = "default_train_fraction")]
    train_fraction: f64,
    #[serde(default)]
    split_seed: u64,
}

fn default_steps() -> u64 {
    500
}

fn default_train_fraction() -> f64 {
    1.0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, verbose),
        Command::Train(args) => cmd_train(args, verbose),
        Command::Eval(args) => cmd_eval(args, verbose),
        Command::Trajectories(args) => cmd_trajectories(args),
        Command::Topics(args) => cmd_topics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn read_documents(path: &Path, format: Option<InputFormat>) -> Result<Vec<RawDocument>, Error> {
    let format = format.unwrap_or_else(|| {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => InputFormat::Tsv,
            _ => InputFormat::Jsonl,
        }
    });
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            InputFormat::Jsonl => {
                let doc: RawDocument = serde_json::from_str(&line).map_err(|e| {
                    Error::Pipeline(format!("{}:{}: bad JSON document: {e}", path.display(), lineno + 1))
                })?;
                docs.push(doc);
            }
            InputFormat::Tsv => {
                let (ts, text) = line.split_once('\t').ok_or_else(|| {
                    Error::Pipeline(format!(
                        "{}:{}: expected timestamp<TAB>text",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let timestamp: f64 = ts.trim().parse().map_err(|_| {
                    Error::Pipeline(format!(
                        "{}:{}: bad timestamp {ts:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                docs.push(RawDocument {
                    id: format!("line{}", lineno + 1),
                    timestamp,
                    text: text.to_string(),
                });
            }
        }
    }
    if docs.is_empty() {
        return Err(Error::Pipeline(format!("{}: no documents", path.display())));
    }
    Ok(docs)
}

fn load_stopwords(args: &PreprocessArgs) -> Result<HashSet<String>, Error> {
    if args.no_stopwords {
        return Ok(HashSet::new());
    }
    let text = match &args.stopwords {
        Some(path) => fs::read_to_string(path)?,
        None => DEFAULT_STOPWORDS.to_string(),
    };
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

fn cmd_preprocess(args: PreprocessArgs, verbose: bool) -> Result<(), Error> {
    let docs = read_documents(&args.input, args.format)?;
    if verbose {
        eprintln!("read {} documents from {}", docs.len(), args.input.display());
    }
    let stopwords = load_stopwords(&args)?;
    let filter = match args.score_threshold {
        Some(th) => ScoreFilter::Threshold(th),
        None => ScoreFilter::TopTerms(args.max_terms),
    };
    let vocab = build_vocabulary(&docs, &stopwords, args.min_count, filter)?;
    if verbose {
        eprintln!(
            "vocabulary: {} terms after stop words, min_count {} and score filter",
            vocab.len(),
            args.min_count
        );
    }
    let (corpus, stats) = encode(&docs, &vocab, args.min_doc_tokens)?;
    corpus.save(&args.output)?;
    if verbose {
        eprintln!(
            "wrote {} ({} docs, {} terms, {} times)",
            args.output.display(),
            corpus.num_docs(),
            corpus.num_terms(),
            corpus.num_times()
        );
    }
    let summary = serde_json::json!({
        "vocabulary_size": corpus.num_terms(),
        "num_docs": corpus.num_docs(),
        "num_times": corpus.num_times(),
        "fingerprint": format!("{:016x}", corpus.fingerprint()),
        "stats": stats,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary is serializable"));
    Ok(())
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig, Error> {
    let mut config: RunConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let kernel = args.kernel.as_deref().ok_or_else(|| {
                Error::Config("without --config, both --kernel and --topics are required".into())
            })?;
            let topics = args.topics.ok_or_else(|| {
                Error::Config("without --config, both --kernel and --topics are required".into())
            })?;
            let text = format!("num_topics = {topics}\nkernel = {{ {kernel} }}\n");
            toml::from_str(&text).map_err(|e| Error::Config(format!("--kernel: {e}")))?
        }
    };
    // flags override file values
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.model.seed = seed;
    }
    if let Some(k) = args.topics {
        config.model.num_topics = k;
    }
    if let Some(b) = args.batch_size {
        config.model.batch_size = b;
    }
    if let Some(i) = args.inducing {
        config.model.num_inducing = i;
    }
    if let Some(kernel) = &args.kernel {
        let text = format!("kernel = {{ {kernel} }}\n");
        #[derive(Deserialize)]
        struct JustKernel {
            kernel: KernelSpec,
        }
        let parsed: JustKernel =
            toml::from_str(&text).map_err(|e| Error::Config(format!("--kernel: {e}")))?;
        config.model.kernel = parsed.kernel;
    }
    if let Some(iv) = args.checkpoint_interval {
        config.checkpoint_interval = iv;
    }
    if let Some(f) = args.train_fraction {
        config.train_fraction = f;
    }
    if let Some(s) = args.split_seed {
        config.split_seed = s;
    }
    config.model.validate()?;
    Ok(config)
}

fn history_line(rec: &StepRecord, timing: bool) -> String {
    let seconds = if timing { rec.seconds } else { 0.0 };
    format!("{},{},{},{}\n", rec.step, rec.rho, rec.elbo_estimate, seconds)
}

fn cmd_train(args: TrainArgs, verbose: bool) -> Result<(), Error> {
    let full_corpus = EncodedCorpus::load(&args.corpus)?;
    fs::create_dir_all(&args.output_dir)?;
    let latest_path = args.output_dir.join("latest.bin");
    let history_path = args.output_dir.join("history.csv");

    let resumed_from = if args.resume {
        let ckpt = Checkpoint::load(&latest_path)?;
        ckpt.verify_corpus(&full_corpus)?;
        if verbose {
            eprintln!(
                "resuming from {} at step {}",
                latest_path.display(),
                ckpt.state.step_count
            );
        }
        Some(ckpt)
    } else {
        None
    };
    let resumed = resumed_from.is_some();

    let config = match &resumed_from {
        Some(ckpt) => {
            let mut config = RunConfig {
                model: ckpt.config.clone(),
                steps: args.steps.unwrap_or_else(default_steps),
                checkpoint_interval: args.checkpoint_interval.unwrap_or(0),
                train_fraction: args.train_fraction.unwrap_or(1.0),
                split_seed: args.split_seed.unwrap_or(0),
            };
            if let Some(seed) = args.seed {
                config.model.seed = seed;
            }
            config
        }
        None => load_run_config(&args)?,
    };

    let corpus = if config.train_fraction < 1.0 {
        let (train_side, test_side) =
            split_by_timestamps(&full_corpus, config.train_fraction, config.split_seed)?;
        if verbose {
            eprintln!(
                "timestamp split: {} train / {} held-out times",
                train_side.num_times(),
                test_side.num_times()
            );
        }
        train_side
    } else {
        full_corpus
    };

    let (mut state, inducing) = match resumed_from {
        Some(ckpt) => (ckpt.state, ckpt.inducing),
        None => {
            let inducing = config.model.build_inducing(&corpus)?;
            if verbose {
                eprintln!(
                    "initializing: K={}, V={}, T={}, inducing={}",
                    config.model.num_topics,
                    corpus.num_terms(),
                    corpus.num_times(),
                    inducing.num_inducing()
                );
            }
            let state = init_model(&corpus, &config.model, &inducing)?;
            (state, inducing)
        }
    };

    // echo the effective configuration for reproducibility
    let effective = toml::to_string_pretty(&config)
        .map_err(|e| Error::Config(format!("config echo failed: {e}")))?;
    fs::write(args.output_dir.join("effective.toml"), &effective)?;
    if verbose {
        eprintln!("effective configuration:\n{effective}");
    }

    let mut history = fs::OpenOptions::new()
        .create(true)
        .append(resumed)
        .truncate(!resumed)
        .write(true)
        .open(&history_path)?;
    if !resumed {
        history.write_all(b"step,rho,elbo_estimate,seconds\n")?;
    }

    let options = TrainOptions {
        num_steps: config.steps,
        step_override: args.step_override,
    };
    let interval = config.checkpoint_interval;
    let timing = args.timing;
    let model = config.model.clone();
    let out_dir = args.output_dir.clone();
    train(&corpus, &model, &inducing, &mut state, &options, |rec, st| {
        history.write_all(history_line(rec, timing).as_bytes())?;
        if verbose && rec.step % 50 == 0 {
            eprintln!("step {}: rho {:.5}, elbo estimate {:.3}", rec.step, rec.rho, rec.elbo_estimate);
        }
        if interval > 0 && rec.step % interval == 0 {
            let ckpt = Checkpoint::new(model.clone(), st.clone(), inducing.clone(), &corpus);
            ckpt.save(&out_dir.join(format!("checkpoint-{}.bin", rec.step)))?;
            ckpt.save(&out_dir.join("latest.bin"))?;
        }
        Ok(())
    })?;
    history.flush()?;

    let ckpt = Checkpoint::new(config.model.clone(), state, inducing, &corpus);
    ckpt.save(&latest_path)?;
    if verbose {
        eprintln!(
            "done: {} steps, checkpoint at {}",
            ckpt.state.step_count,
            latest_path.display()
        );
    }
    let summary = serde_json::json!({
        "steps": ckpt.state.step_count,
        "checkpoint": latest_path.display().to_string(),
        "history": history_path.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary is serializable"));
    Ok(())
}

fn cmd_eval(args: EvalArgs, verbose: bool) -> Result<(), Error> {
    let full_corpus = EncodedCorpus::load(&args.corpus)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    ckpt.verify_corpus(&full_corpus)?;
    let (_, test) = split_by_timestamps(&full_corpus, args.train_fraction, args.split_seed)?;
    if verbose {
        eprintln!(
            "evaluating {} held-out documents over {} timestamps",
            test.num_docs(),
            test.num_times()
        );
    }
    let report = heldout_perplexity(
        &test,
        &ckpt.state,
        &ckpt.inducing,
        &ckpt.config.kernel,
        &ckpt.config,
        args.seed,
    )?;
    let out = serde_json::json!({
        "perplexity": report.perplexity,
        "docs_evaluated": report.docs_evaluated,
        "docs_skipped": report.docs_skipped,
        "eval_tokens": report.eval_tokens,
        "test_docs": test.num_docs(),
        "test_times": test.num_times(),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("report is serializable"));
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, Error> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Argument(format!("--grid expects start:stop:count, got {spec:?}")));
    }
    let start: f64 = parts[0].parse().map_err(|_| Error::Argument(format!("bad grid start {:?}", parts[0])))?;
    let stop: f64 = parts[1].parse().map_err(|_| Error::Argument(format!("bad grid stop {:?}", parts[1])))?;
    let count: usize = parts[2].parse().map_err(|_| Error::Argument(format!("bad grid count {:?}", parts[2])))?;
    if count < 2 || stop <= start {
        return Err(Error::Argument("grid needs stop > start and count >= 2".into()));
    }
    Ok((0..count)
        .map(|i| start + (stop - start) * i as f64 / (count - 1) as f64)
        .collect())
}

fn cmd_trajectories(args: TrajectoriesArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let grid = match (&args.grid, args.times.is_empty()) {
        (Some(spec), _) => parse_grid(spec)?,
        (None, false) => args.times.clone(),
        (None, true) => {
            return Err(Error::Argument("provide --grid or --times".into()));
        }
    };
    if args.words.is_empty() {
        return Err(Error::Argument("provide at least one word via --words".into()));
    }
    let series = word_trajectory(
        &ckpt.state,
        &ckpt.inducing,
        &ckpt.config.kernel,
        &ckpt.transform,
        &ckpt.vocab_terms,
        args.topic,
        &args.words,
        &grid,
    )?;
    if args.json {
        let rows: Vec<_> = series
            .iter()
            .map(|p| {
                serde_json::json!({
                    "time": p.time,
                    "probabilities": args
                        .words
                        .iter()
                        .zip(&p.probs)
                        .map(|(w, &v)| (w.clone(), v))
                        .collect::<std::collections::BTreeMap<_, _>>(),
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows are serializable"));
    } else {
        println!("time,word,probability");
        for point in &series {
            for (word, &p) in args.words.iter().zip(&point.probs) {
                println!("{},{},{}", point.time, word, p);
            }
        }
    }
    Ok(())
}

fn cmd_topics(args: TopicsArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let snapshot = topics_at_time(
        &ckpt.state,
        &ckpt.inducing,
        &ckpt.config.kernel,
        &ckpt.transform,
        args.time,
    )?;
    if args.json {
        let mut topics = Vec::new();
        for k in 0..ckpt.state.num_topics {
            let words = top_words(&snapshot, &ckpt.vocab_terms, k, args.top)?;
            topics.push(serde_json::json!({
                "topic": k,
                "words": words
                    .iter()
                    .map(|(w, p)| serde_json::json!({"word": w, "probability": p}))
                    .collect::<Vec<_>>(),
            }));
        }
        let out = serde_json::json!({"time": args.time, "topics": topics});
        println!("{}", serde_json::to_string_pretty(&out).expect("topics are serializable"));
    } else {
        println!("topic,rank,word,probability");
        for k in 0..ckpt.state.num_topics {
            for (rank, (word, p)) in top_words(&snapshot, &ckpt.vocab_terms, k, args.top)?
                .into_iter()
                .enumerate()
            {
                println!("{k},{},{word},{p}", rank + 1);
            }
        }
    }
    Ok(())
}
