//! The `smmini` command line: ingest, train, eval, report.
//!
//! Exit codes: 0 success, 1 config/IO/checkpoint error, 2 too many malformed
//! corpus lines, 3 non-finite loss or gradient, 4 empty eval dataset.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ingest_corpus, Corpus, IngestStats, Manifest};
use crate::error::Error;
use crate::eval::{self, ModelScorer, ReportRow};
use crate::model::{init_model, ModelConfig, Parameters};
use crate::quant::{QuantMode, DEFAULT_BLOCK_SIZE};
use crate::seed::derive_seed;
use crate::trainer::{load_checkpoint, save_checkpoint, TrainConfig, TrainEvent, Trainer};

pub const SEED_ENV: &str = "SMMINI_SEED";

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_MALFORMED: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;
pub const EXIT_EMPTY_DATASET: u8 = 4;

/// A failed command: the exit code and a message for standard error.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => EXIT_NON_FINITE,
            _ => EXIT_ERROR,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_ERROR, e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "smmini", version, about = "Desk-scale QA instruction tuning with LoRA over a 4-bit base")]
pub struct Cli {
    /// Worker threads for ingestion, training, and eval (1 = reproducibility mode).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, normalize, and deduplicate the corpus sources listed in a manifest.
    Ingest(IngestArgs),
    /// Fine-tune adapters as described by a run config.
    Train(TrainArgs),
    /// Score a checkpoint on multiple-choice datasets.
    Eval(EvalArgs),
    /// Combine report rows into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Normalized corpus output (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ingest statistics as JSON here.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Fail with exit code 2 when more lines than this are malformed.
    #[arg(long)]
    pub max_bad_lines: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsForm {
    /// Adapters applied over the stored (possibly 4-bit) base.
    Quantized,
    /// Adapters folded into a dequantized dense base.
    Merged,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "fixture")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Output directory for rows.tsv, report.txt, and report.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "smmini")]
    pub label: String,
    /// Write per-item predictions to predictions.jsonl.
    #[arg(long)]
    pub predictions: bool,
    #[arg(long, value_enum, default_value = "quantized")]
    pub weights: WeightsForm,
    /// Include the published comparison table.
    #[arg(long)]
    pub fixture: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// rows.tsv files written by `eval`.
    #[arg(long = "rows")]
    pub rows: Vec<PathBuf>,
    /// Include the published comparison table.
    #[arg(long)]
    pub fixture: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Storage format of the frozen base during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseFormat {
    /// Full-precision base (plain LoRA).
    None,
    #[default]
    AbsmaxInt4,
    Nf4,
}

impl BaseFormat {
    pub fn quant_mode(self) -> Option<QuantMode> {
        match self {
            BaseFormat::None => None,
            BaseFormat::AbsmaxInt4 => Some(QuantMode::AbsmaxInt4),
            BaseFormat::Nf4 => Some(QuantMode::Nf4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub mode: BaseFormat,
    pub block_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            mode: BaseFormat::AbsmaxInt4,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub manifest: PathBuf,
    /// Share of records held out for per-epoch validation loss (0 = none).
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Datasets scored with the final checkpoint after training.
    pub datasets: Vec<PathBuf>,
    pub label: Option<String>,
}

/// Everything a training run needs. Unset keys take the LoRA and optimizer
/// defaults listed in the README.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Also save a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub quant: QuantConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            threads: None,
            checkpoint_every: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            quant: QuantConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a config file. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        resolve(&mut cfg.corpus.manifest);
        cfg.eval.datasets.iter_mut().for_each(resolve);
        Ok(cfg)
    }

    /// Fill derived values and check consistency. The trainer seed always
    /// comes from the top-level seed.
    pub fn resolve(mut self, seed_override: Option<u64>) -> crate::Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        let trainer_seed = derive_seed(self.seed, "trainer", &[]);
        if self.train.seed != 0 && self.train.seed != trainer_seed {
            return Err(Error::Config(
                "train.seed is derived from the top-level seed; set `seed` instead".into(),
            ));
        }
        self.train.seed = trainer_seed;
        self.model.validate()?;
        self.train.validate()?;
        if self.corpus.manifest.as_os_str().is_empty() {
            return Err(Error::Config("corpus.manifest is required".into()));
        }
        if !(0.0..1.0).contains(&self.corpus.validation_fraction) {
            return Err(Error::Config(format!(
                "corpus.validation_fraction must lie in [0, 1), got {}",
                self.corpus.validation_fraction
            )));
        }
        if self.quant.block_size == 0 {
            return Err(Error::Config("quant.block_size must be positive".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const VALIDATION: &str = "validation.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a, cli.threads.is_some()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn set_threads(n: usize) -> CmdResult {
    if n == 0 {
        return Err(Failure::new(EXIT_ERROR, "--threads must be positive"));
    }
    // The global pool can only be configured once per process; later calls
    // keep the first setting.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_json_line(w: &mut impl Write, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

pub fn cmd_ingest(args: &IngestArgs) -> CmdResult {
    let manifest = Manifest::load(&args.manifest)?;
    let (corpus, stats) = ingest_corpus(&manifest)?;
    let total = stats.total();
    let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    println!("{stats_json}");
    if let Some(p) = &args.stats {
        fs::write(p, format!("{stats_json}\n"))?;
    }
    let all_bad = total.read > 0 && total.dropped_malformed == total.read;
    let over = args.max_bad_lines.is_some_and(|m| total.dropped_malformed > m);
    if all_bad || over {
        return Err(Failure::new(
            EXIT_MALFORMED,
            format!("{} of {} lines malformed", total.dropped_malformed, total.read),
        ));
    }
    corpus.write_jsonl(&args.out)?;
    eprintln!("wrote {} records to {}", corpus.len(), args.out.display());
    Ok(())
}

fn log_ingest(stats: &IngestStats) {
    for (tag, c) in &stats.per_source {
        eprintln!(
            "source {tag}: read {} kept {} malformed {} duplicate {}",
            c.read, c.kept, c.dropped_malformed, c.dropped_duplicate
        );
    }
}

/// Training and validation corpora for a resolved config.
pub fn load_corpora(cfg: &RunConfig) -> crate::Result<(Corpus, Corpus)> {
    let manifest = Manifest::load(&cfg.corpus.manifest)?;
    let (corpus, stats) = ingest_corpus(&manifest)?;
    log_ingest(&stats);
    if cfg.corpus.validation_fraction > 0.0 {
        let split_seed = derive_seed(cfg.seed, "corpus.split", &[]);
        corpus::split(&corpus, 1.0 - cfg.corpus.validation_fraction, split_seed)
    } else {
        Ok((corpus, Corpus::default()))
    }
}

/// Fresh model for a resolved config: seeded init, then base quantization.
pub fn initial_model(cfg: &RunConfig) -> crate::Result<Parameters> {
    let mut params = init_model(&cfg.model, derive_seed(cfg.seed, "model.init", &[]))?;
    if let Some(mode) = cfg.quant.mode.quant_mode() {
        params.quantize_base(cfg.quant.block_size, mode)?;
    }
    Ok(params)
}

/// Whether `b` may continue a run started with `a`: only the stopping point
/// may change.
fn resumable(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        epochs: 1,
        max_steps: None,
        ..c.clone()
    };
    strip(a) == strip(b)
}

pub fn cmd_train(args: &TrainArgs, threads_from_flag: bool) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config)?.resolve(args.seed)?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir.clone_from(dir);
    }
    if let (Some(n), false) = (cfg.threads, threads_from_flag) {
        set_threads(n)?;
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;

    let (train_corpus, val_corpus) = load_corpora(&cfg)?;
    let mut kept_metrics = Vec::new();
    let trainer = match &args.resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            if ckpt.model != cfg.model {
                return Err(Failure::new(EXIT_ERROR, "checkpoint model config differs from the run config"));
            }
            if !resumable(&ckpt.train, &cfg.train) {
                return Err(Failure::new(EXIT_ERROR, "checkpoint train config differs from the run config"));
            }
            ckpt.train = cfg.train.clone();
            let step = ckpt.step;
            if let Ok(text) = fs::read_to_string(out.join(METRICS)) {
                kept_metrics = text
                    .lines()
                    .filter(|l| {
                        serde_json::from_str::<crate::trainer::StepMetrics>(l).is_ok_and(|m| m.step <= step)
                    })
                    .map(str::to_string)
                    .collect();
            }
            eprintln!("resuming from {} at step {step}", path.display());
            Trainer::from_checkpoint(ckpt, &train_corpus)?
        }
        None => Trainer::new(initial_model(&cfg)?, cfg.train.clone(), &train_corpus)?,
    };
    let mut trainer = trainer.with_validation(&val_corpus);
    if trainer.skipped > 0 {
        eprintln!("skipped {} examples whose answer does not fit", trainer.skipped);
    }
    eprintln!(
        "training {} sequences, {} trainable parameters, {} steps",
        trainer.train_set().len(),
        trainer.params.n_trainable(),
        trainer.total_steps()
    );

    let mut metrics = BufWriter::new(fs::File::create(out.join(METRICS))?);
    for line in &kept_metrics {
        writeln!(metrics, "{line}")?;
    }
    let mut validation = if val_corpus.is_empty() {
        None
    } else {
        Some(BufWriter::new(fs::File::create(out.join(VALIDATION))?))
    };

    let ckpt_dir = out.join("checkpoints");
    let mut io_err: Option<std::io::Error> = None;
    let mut record = |ev: TrainEvent<'_>| {
        let res = match ev {
            TrainEvent::Step(m) => {
                if m.step % 10 == 0 || m.step == 1 {
                    eprintln!("step {} epoch {} loss {:.6} lr {}", m.step, m.epoch, m.loss, m.lr);
                }
                write_json_line(&mut metrics, m).and_then(|_| metrics.flush())
            }
            TrainEvent::EpochEnd(e) => {
                if let Some(v) = e.validation_loss {
                    eprintln!("epoch {} validation loss {v:.6}", e.epoch);
                }
                match validation.as_mut() {
                    Some(w) => write_json_line(w, e),
                    None => Ok(()),
                }
            }
        };
        if let (Err(e), None) = (res, &io_err) {
            io_err = Some(e);
        }
    };
    while !trainer.is_done() {
        let before = trainer.step;
        let end = match before.checked_div(cfg.checkpoint_every) {
            Some(q) => (q + 1) * cfg.checkpoint_every,
            None => u64::MAX,
        };
        run_until(&mut trainer, end, &mut record)?;
        if cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(cfg.checkpoint_every) && !trainer.is_done() {
            fs::create_dir_all(&ckpt_dir)?;
            save_checkpoint(
                &ckpt_dir.join(format!("step-{:06}.bin", trainer.step)),
                &trainer.checkpoint(),
            )?;
        }
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    metrics.flush()?;
    if let Some(w) = validation.as_mut() {
        w.flush()?;
    }
    let final_path = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &trainer.checkpoint())?;
    eprintln!("wrote {}", final_path.display());

    if !cfg.eval.datasets.is_empty() {
        let label = cfg.eval.label.clone().unwrap_or_else(|| "smmini".into());
        let rows = evaluate_paths(&trainer.params, &cfg.eval.datasets, &label, Some(&out.join("predictions.jsonl")))?;
        write_report(&out, &rows)?;
    }
    Ok(())
}

/// Run optimizer steps until `end` (exclusive of later steps) or the end of
/// training, forwarding events.
fn run_until(trainer: &mut Trainer, end: u64, on_event: &mut impl FnMut(TrainEvent<'_>)) -> crate::Result<()> {
    let spe = trainer.steps_per_epoch();
    while !trainer.is_done() && trainer.step < end {
        let m = trainer.step_once()?;
        on_event(TrainEvent::Step(&m));
        if trainer.step.is_multiple_of(spe) {
            let em = trainer.epoch_metrics(m.epoch)?;
            on_event(TrainEvent::EpochEnd(&em));
        }
    }
    Ok(())
}

fn evaluate_paths(
    params: &Parameters,
    datasets: &[PathBuf],
    label: &str,
    predictions: Option<&Path>,
) -> std::result::Result<Vec<ReportRow>, Failure> {
    let scorer = ModelScorer::new(params)?;
    let mut rows = Vec::new();
    let mut log = String::new();
    for path in datasets {
        let items = eval::load_items(path)?;
        if items.is_empty() {
            return Err(Failure::new(
                EXIT_EMPTY_DATASET,
                format!("{} contains no items", path.display()),
            ));
        }
        let ev = eval::evaluate(&scorer, &items, label)?;
        eprintln!(
            "{}: {}/{} correct ({}%), {} truncated",
            ev.row.dataset_tag,
            ev.row.n_correct.unwrap_or(0),
            items.len(),
            ev.row.accuracy(),
            ev.n_truncated
        );
        log.push_str(&eval::predictions_jsonl(&ev.predictions));
        rows.push(ev.row);
    }
    if let Some(p) = predictions {
        fs::write(p, log)?;
    }
    Ok(rows)
}

fn write_report(out: &Path, rows: &[ReportRow]) -> CmdResult {
    let rendered = eval::render_report(rows)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("rows.tsv"), eval::rows_to_tsv(rows))?;
    fs::write(out.join("report.txt"), &rendered.text)?;
    fs::write(out.join("report.tsv"), &rendered.tsv)?;
    print!("{}", rendered.text);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let mut rows = if args.fixture { eval::comparison_fixture() } else { Vec::new() };
    if let Some(path) = &args.checkpoint {
        if args.datasets.is_empty() {
            return Err(Failure::new(EXIT_ERROR, "no --dataset given"));
        }
        let ckpt = load_checkpoint(path)?;
        let params = match args.weights {
            WeightsForm::Quantized => ckpt.params,
            WeightsForm::Merged => ckpt.params.merge_adapters()?,
        };
        eprintln!(
            "scoring with {} weights ({} base)",
            match args.weights {
                WeightsForm::Quantized => "adapter-form",
                WeightsForm::Merged => "merged",
            },
            if params.is_quantized() { "4-bit" } else { "dense" }
        );
        fs::create_dir_all(&args.out)?;
        let preds = args.predictions.then(|| args.out.join("predictions.jsonl"));
        rows.extend(evaluate_paths(&params, &args.datasets, &args.label, preds.as_deref())?);
    }
    write_report(&args.out, &rows)
}

pub fn cmd_report(args: &ReportArgs) -> CmdResult {
    let mut rows = if args.fixture { eval::comparison_fixture() } else { Vec::new() };
    for p in &args.rows {
        let text = fs::read_to_string(p).map_err(|e| Failure::new(EXIT_ERROR, format!("{}: {e}", p.display())))?;
        rows.extend(eval::rows_from_tsv(&text)?);
    }
    write_report(&args.out, &rows)
}
