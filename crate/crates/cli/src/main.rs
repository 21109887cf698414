use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use gradmask_core::checkpoint;
use gradmask_core::corpus::{build_corpus, Corpus, CorpusConfig, Split, VOCAB_FILE};
use gradmask_core::curation::{run_curate_templates, run_filter, FilterCriteria, KMeansConfig};
use gradmask_core::gass::score_pairs;
use gradmask_core::jsonl;
use gradmask_core::train::{evaluate, fit, Dataset, EpochRecord, FitOptions, MetricsLine, TrainConfig, TrainState};
use gradmask_core::Error;

#[derive(Parser)]
#[command(name = "gradmask", version, about = "Score-guided dual masking for image-text retrieval training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a corpus directory, writing checkpoints and a metrics log.
    Train(TrainArgs),
    /// Caption-to-image retrieval metrics of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Screen person-crop records.
    Filter(FilterArgs),
    /// Cluster template embeddings and select a template bank.
    CurateTemplates(CurateArgs),
    /// Generate a synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Per-token scores of a checkpoint, one JSON line per caption.
    DumpScores(DumpScoresArgs),
    /// Summarize a metrics log.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from the latest checkpoint under `<out>/checkpoints`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    alpha_n: Option<f64>,
    #[arg(long)]
    alpha_i: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    score_every: Option<u64>,
    /// Divide the token-prediction loss by the masked count only.
    #[arg(long)]
    conventional_ce: bool,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after_epoch: Option<usize>,
    #[arg(long)]
    eval_every_epoch: bool,
    /// Also write every mask plan to `<out>/mask_audit.jsonl`.
    #[arg(long)]
    mask_audit: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    accepted: PathBuf,
    #[arg(long)]
    audit: PathBuf,
    #[arg(long)]
    min_short_side: Option<f64>,
    #[arg(long)]
    aspect_lo: Option<f64>,
    #[arg(long)]
    aspect_hi: Option<f64>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    min_visible_kp: Option<usize>,
    #[arg(long)]
    min_hip: Option<usize>,
    #[arg(long)]
    min_head: Option<usize>,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    per_cluster: usize,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any subset of the corpus configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    test_noise_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DumpScoresArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    /// Score only the first captions of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train or test")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::NonFinite { .. }) => 4,
            Failure::Core(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Filter(a) => filter(a),
        Command::CurateTemplates(a) => curate(a),
        Command::GenCorpus(a) => gen_corpus(a),
        Command::DumpScores(a) => dump_scores(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("output", e))?;
    println!("{text}");
    Ok(text)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with a partial JSON file.
fn layered<T: Serialize + serde::de::DeserializeOwned>(defaults: T, file: Option<&Path>) -> CliResult<T> {
    let Some(path) = file else { return Ok(defaults) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let overlay: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut base = serde_json::to_value(defaults).map_err(|e| Error::json("defaults", e))?;
    merge(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn vocab_digest(corpus_dir: &Path) -> CliResult<String> {
    let path = corpus_dir.join(VOCAB_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(checkpoint::sha256_hex(&bytes))
}

fn check_vocab(manifest: &checkpoint::CheckpointManifest, corpus_dir: &Path) -> CliResult<()> {
    let digest = vocab_digest(corpus_dir)?;
    match &manifest.vocab_sha256 {
        Some(d) if *d != digest => Err(Error::Compatibility(format!(
            "checkpoint vocabulary {d} differs from corpus vocabulary {digest}"
        ))
        .into()),
        _ => Ok(()),
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let vocab_sha256 = vocab_digest(&a.corpus)?;
    let ckpt_root = a.out.join("checkpoints");
    let (cfg, mut state) = match a.resume.then(|| checkpoint::latest(&ckpt_root)).transpose()?.flatten() {
        Some(dir) => {
            let (cfg, state, manifest) = checkpoint::load(&dir)?;
            check_vocab(&manifest, &a.corpus)?;
            log::info!("resuming from {} at step {}", dir.display(), state.step);
            (cfg, state)
        }
        None => {
            let mut cfg = TrainConfig::default();
            cfg.model = cfg.model.with_vocab_size(corpus.manifest.vocab_size);
            let mut cfg = layered(cfg, a.config.as_deref())?;
            set(&mut cfg.mask.alpha_n, a.alpha_n);
            set(&mut cfg.mask.alpha_i, a.alpha_i);
            set(&mut cfg.mask.lambda, a.lambda);
            set(&mut cfg.mask.gamma, a.gamma);
            set(&mut cfg.beta, a.beta);
            set(&mut cfg.sdm.tau, a.tau);
            set(&mut cfg.lr, a.lr);
            set(&mut cfg.lr_min, a.lr_min);
            set(&mut cfg.adam.weight_decay, a.weight_decay);
            set(&mut cfg.adam.eps, a.adam_eps);
            set(&mut cfg.epochs, a.epochs);
            set(&mut cfg.warmup_epochs, a.warmup_epochs);
            set(&mut cfg.batch_size, a.batch_size);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.mask.seed, a.seed);
            set(&mut cfg.score_every, a.score_every);
            cfg.model.decoder.conventional_ce |= a.conventional_ce;
            cfg.validate()?;
            let state = TrainState::new(&cfg, corpus.train.len())?;
            (cfg, state)
        }
    };
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::json("config", e))?;
    write_text(&a.out.join("config.json"), &(text + "\n"))?;
    let train = Dataset::from_corpus(&corpus, Split::Train)?;
    let test = Dataset::from_corpus(&corpus, Split::Test)?;
    let opts = FitOptions {
        checkpoint_dir: Some(ckpt_root),
        metrics_path: Some(a.out.join("metrics.jsonl")),
        mask_audit_path: a.mask_audit.then(|| a.out.join("mask_audit.jsonl")),
        stop_after_epoch: a.stop_after_epoch,
        eval_every_epoch: a.eval_every_epoch,
        vocab_sha256: Some(vocab_sha256),
    };
    let history = fit(&mut state, &train, (!test.is_empty()).then_some(&test), &cfg, &opts)?;
    if let Some(last) = history.epochs.last() {
        print_json(last)?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let (model, manifest) = checkpoint::load_model(&a.checkpoint)?;
    check_vocab(&manifest, &a.corpus)?;
    let data = Dataset::from_corpus(&corpus, a.split)?;
    let metrics = evaluate(&model, &data)?;
    let text = print_json(&metrics)?;
    if let Some(out) = &a.out {
        write_text(out, &(text + "\n"))?;
    }
    Ok(())
}

fn filter(a: FilterArgs) -> CliResult<()> {
    let mut crit = FilterCriteria::default();
    set(&mut crit.min_short_side, a.min_short_side);
    set(&mut crit.aspect_lo, a.aspect_lo);
    set(&mut crit.aspect_hi, a.aspect_hi);
    set(&mut crit.min_confidence, a.min_confidence);
    set(&mut crit.min_visible_kp, a.min_visible_kp);
    set(&mut crit.min_hip, a.min_hip);
    set(&mut crit.min_head, a.min_head);
    let outcome = run_filter(&a.records, &a.accepted, &a.audit, &crit)?;
    print_json(&serde_json::json!({
        "records": outcome.audit.len(),
        "accepted": outcome.accepted.len(),
        "rejected": outcome.audit.len() - outcome.accepted.len(),
    }))?;
    Ok(())
}

fn curate(a: CurateArgs) -> CliResult<()> {
    let mut cfg = KMeansConfig::new(a.k, a.seed);
    set(&mut cfg.max_iter, a.max_iter);
    set(&mut cfg.tol, a.tol);
    let bank = run_curate_templates(&a.templates, &a.out, &cfg, a.per_cluster)?;
    print_json(&serde_json::json!({
        "k": bank.k,
        "seed": bank.seed,
        "selected": bank.clusters.iter().map(|c| c.templates.len()).sum::<usize>(),
    }))?;
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> CliResult<()> {
    let mut cfg = layered(CorpusConfig::default(), a.config.as_deref())?;
    set(&mut cfg.train, a.train);
    set(&mut cfg.test, a.test);
    set(&mut cfg.noise_rate, a.noise_rate);
    set(&mut cfg.test_noise_rate, a.test_noise_rate);
    set(&mut cfg.seed, a.seed);
    let manifest = build_corpus(&cfg, &a.out)?;
    print_json(&serde_json::json!({
        "vocab_size": manifest.vocab_size,
        "train": manifest.train,
        "test": manifest.test,
    }))?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreDump<'a> {
    pair_id: &'a str,
    tokens: Vec<&'a str>,
    scores: Vec<f64>,
    noise_positions: &'a [usize],
}

fn dump_scores(a: DumpScoresArgs) -> CliResult<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let (_, state, manifest) = checkpoint::load(&a.checkpoint)?;
    check_vocab(&manifest, &a.corpus)?;
    let cfg = &manifest.config;
    let data = Dataset::from_corpus(&corpus, a.split)?;
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    let model = &state.model;
    let mut lines = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let texts: Vec<_> = data.seqs[start..end].iter().collect();
        let images: Vec<_> = data.images[start..end].iter().collect();
        let scores = score_pairs(&model.encoder, &model.params, &texts, &images, &cfg.gass)?;
        for (i, s) in (start..end).zip(scores) {
            let seq = &data.seqs[i];
            let positions: Vec<usize> = seq.content_positions().collect();
            lines.push(ScoreDump {
                pair_id: &data.labels[i],
                tokens: positions
                    .iter()
                    .map(|&p| corpus.vocab.word(seq.ids()[p]).unwrap_or("?"))
                    .collect(),
                scores: positions.iter().map(|&p| s.normalized[p]).collect(),
                noise_positions: &data.noise_truth[i],
            });
        }
    }
    jsonl::write(&a.out, &lines)?;
    print_json(&serde_json::json!({ "captions": lines.len() }))?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    steps: usize,
    epochs: Vec<EpochRecord>,
    first_epoch_mean_total: Option<f64>,
    last_epoch_mean_total: Option<f64>,
}

fn report(a: ReportArgs) -> CliResult<()> {
    let lines: Vec<MetricsLine> = jsonl::read(&a.metrics)?;
    let mut steps = 0;
    let mut epochs = Vec::new();
    for line in lines {
        match line {
            MetricsLine::Step(_) => steps += 1,
            MetricsLine::Epoch(e) => epochs.push(e),
        }
    }
    let summary = Summary {
        steps,
        first_epoch_mean_total: epochs.first().map(|e| e.mean_total),
        last_epoch_mean_total: epochs.last().map(|e| e.mean_total),
        epochs,
    };
    print_json(&summary)?;
    Ok(())
}
