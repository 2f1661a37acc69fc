//! `daud`: synthesize corpora, train and distill models, audit them for
//! verbatim memorization, and run the full experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use daud_core::data::{load_jsonl, synth_corpus, Corpus, Split};
use daud_core::distill::{train, TrainedModel};
use daud_core::eval::{memorization_fraction, rouge_report, sample_indices, AuditConfig};
use daud_core::harness::{
    emit_report, load_checkpoint, parse_csv, render_report, run_experiment, save_checkpoint, ExperimentConfig,
    ExperimentOptions, ReportFormat, TrainRunConfig,
};
use daud_core::numerics::derive_seed;
use daud_core::{Error, Result};

#[derive(Parser)]
#[command(name = "daud", version, about = "Distillation and verbatim-memorization audits for small language models")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instruction corpus as JSONL.
    Synth(SynthArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Measure the memorization fraction of a checkpoint on a corpus.
    Audit(AuditArgs),
    /// Score greedy responses of a checkpoint with ROUGE on two splits.
    Rouge(RougeArgs),
    /// Run the teacher / student protocol and write the reports.
    Experiment(ExperimentArgs),
    /// Re-render a results CSV as CSV or markdown.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Pretrain,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::Pretrain => Split::Pretrain,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of examples.
    #[arg(short, long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config (model, corpus, teacher, regime).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the regime seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL corpus to audit (normally the training corpus).
    #[arg(long)]
    corpus: PathBuf,
    /// Number of leading tokens that must match.
    #[arg(short, long, default_value_t = 50)]
    k: usize,
    /// Audit a random sample of this many examples.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RougeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Score a random sample of this many examples per split.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; the built-in default protocol when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse matching checkpoints already in the output directory.
    #[arg(long)]
    resume: bool,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV written by `experiment`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}

fn load_corpus(path: &Path, split: Split, max_seq_len: usize) -> Result<Corpus> {
    require_file(path)?;
    let report = load_jsonl(path, split, max_seq_len)?;
    for r in &report.rejected {
        log::warn!("{}:{}: skipped: {}", path.display(), r.line, r.reason);
    }
    Ok(report.corpus)
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    require_file(path)?;
    load_checkpoint(path)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let c = synth_corpus(a.n, a.seed, a.split.into())?;
    c.write_jsonl(&a.out)?;
    eprintln!("wrote {} examples to {}", c.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainRunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.regime.seed = s;
    }
    let mc = cfg.model.config();
    let corpus = load_corpus(&cfg.corpus, Split::Train, mc.max_seq_len)?;
    let teacher = cfg.teacher.as_deref().map(load_model).transpose()?;
    let pretrain = cfg
        .pretrain_path()
        .map(|p| load_corpus(p, Split::Pretrain, mc.max_seq_len))
        .transpose()?;
    let m = train(&mc, teacher.as_ref(), &corpus, &cfg.regime, pretrain.as_ref())?;
    save_checkpoint(&m, &a.out)?;
    eprintln!(
        "trained {} parameters for {} steps; final loss {:.4}; wrote {}",
        mc.param_count(),
        m.loss_curve.len(),
        m.loss_curve.last().copied().unwrap_or(f32::NAN),
        a.out.display()
    );
    Ok(())
}

fn audit(a: AuditArgs) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus, Split::Train, usize::MAX)?;
    let cfg = AuditConfig {
        k: a.k,
        sample_size: a.sample,
        seed: a.seed,
    };
    cfg.validate()?;
    let report = memorization_fraction(&m.params, &corpus, &cfg)?;
    eprintln!(
        "memorized {} of {} ({:.3}); skipped {}",
        report.n_memorized, report.n_evaluated, report.fraction, report.n_skipped
    );
    write_or_print(a.out.as_deref(), &serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn rouge(a: RougeArgs) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let sample = |c: Corpus, label: &str| {
        let idx = sample_indices(c.len(), a.sample, derive_seed(a.seed, label));
        c.subset(&idx)
    };
    let train = sample(load_corpus(&a.train, Split::Train, usize::MAX)?, "rouge/train");
    let test = sample(load_corpus(&a.test, Split::Test, usize::MAX)?, "rouge/test");
    let report = rouge_report(&m.params, &train, &test)?;
    write_or_print(a.out.as_deref(), &serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_protocol(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let outcome = run_experiment(&cfg, &ExperimentOptions { resume: a.resume })?;
    print!("{}", render_report(&outcome.rows, ReportFormat::Markdown)?);
    eprintln!("wrote {} and {}", outcome.csv_path.display(), outcome.markdown_path.display());
    if outcome.rows.iter().any(|r| r.error.is_some()) {
        return Err(Error::Contract("one or more runs failed; see the log".into()));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    require_file(&a.input)?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let rows = parse_csv(&text)?;
    match a.out {
        Some(p) => emit_report(&rows, format, &p),
        None => {
            print!("{}", render_report(&rows, format)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        (false, _) => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp_secs().init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Audit(a) => audit(a),
        Command::Rouge(a) => rouge(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
