//! `lgpt-lab`: generate data, pretrain the frozen LM, train and evaluate graph
//! prompt encoders, run gradient checks and ablation matrices, render tables.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lgpt_core::data::{generate, load_dataset, DatasetSplit, TaskKind, TaskSpec};
use lgpt_core::io::write_atomic;
use lgpt_core::lm::{
    build_pretraining_corpus, checkpoint, pretrain_lm, PretrainConfig, TinyDecoderLM, Vocab,
};
use lgpt_core::trainer::{
    ablate, evaluate, first_failure, gradient_check_suite, prepare, summarize, train,
    AblationTable, ArmResult, GraphPromptModel, Preset, RunConfig, RunReport,
};
use lgpt_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "lgpt-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task as JSONL.
    GenData {
        #[arg(long)]
        task: TaskKind,
        /// Number of examples.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Facts per answer (multifact).
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Entities per graph (attribute lookup).
        #[arg(long, default_value_t = 3)]
        nodes_per_graph: usize,
        /// Attributes per entity (attribute lookup).
        #[arg(long, default_value_t = 2)]
        num_attributes: usize,
    },
    /// Pretrain the stand-in LM and save it frozen.
    PretrainLm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corpus size in documents.
        #[arg(long, default_value_t = 4000)]
        docs: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Where to write the pretraining report; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train an encoder against the frozen LM.
    Train {
        /// JSON run config; unspecified fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        /// Run report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Where to save the selected encoder weights.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact-match accuracy of a saved encoder on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable group on a tiny instance.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset ablation matrix over several seeds.
    Ablate {
        #[arg(long)]
        preset: Preset,
        /// Base config the arms are derived from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Table path; `.md` renders markdown, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// Per-run results as JSON, for `report`.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long, env = "LGPT_LAB_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Render run reports or ablation results as a table.
    Report {
        /// Run reports or ablation result files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Md,
    Csv,
}

/// Whether a failure is the caller's fault (bad input) or the run's.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidExample { .. }
        | Error::MalformedLine { .. }
        | Error::EmptyDataset
        | Error::Json(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

fn read_config(path: Option<&Path>) -> lgpt_core::Result<RunConfig> {
    let config = match path {
        Some(p) => serde_json::from_str::<RunConfig>(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let config = config.normalized();
    config.validate()?;
    Ok(config)
}

fn check_lm_width(config: &RunConfig, lm: &TinyDecoderLM) -> lgpt_core::Result<()> {
    if config.d_llm != lm.config().d_model {
        return Err(Error::Config(format!(
            "config d_llm {} does not match LM width {}",
            config.d_llm,
            lm.config().d_model
        )));
    }
    Ok(())
}

/// Writes `text` with one trailing newline to `out`, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> lgpt_core::Result<()> {
    let text = format!("{}\n", text.trim_end());
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

/// Accepts a run report, a single ablation result, or a list of results.
fn read_results(path: &Path) -> lgpt_core::Result<Vec<ArmResult>> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    if value.is_array() {
        return Ok(serde_json::from_value(value)?);
    }
    if value.get("outcome").is_some() {
        return Ok(vec![serde_json::from_value(value)?]);
    }
    let report: RunReport = serde_json::from_value(value)?;
    Ok(vec![ArmResult {
        config: report.config.clone(),
        outcome: Ok(report),
    }])
}

fn render(table: &AblationTable, format: Format) -> String {
    match format {
        Format::Md => table.to_markdown(),
        Format::Csv => table.to_csv(),
    }
}

fn execute(command: Command) -> lgpt_core::Result<i32> {
    match command {
        Command::GenData {
            task,
            n,
            seed,
            out,
            k,
            nodes_per_graph,
            num_attributes,
        } => {
            let spec = TaskSpec {
                task,
                num_examples: n,
                nodes_per_graph,
                num_attributes,
                facts_per_answer: k,
                seed,
            };
            let data = generate(&spec)?;
            data.write_jsonl(&out)?;
            log::info!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::PretrainLm {
            out,
            seed,
            docs,
            max_steps,
            lr,
            report,
        } => {
            let vocab = Vocab::task_default();
            let mut cfg = PretrainConfig::new(vocab.len(), seed);
            if let Some(s) = max_steps {
                cfg.max_steps = s;
            }
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!("lr must be positive, got {lr}")));
                }
                cfg.lr = lr;
            }
            cfg.lm.validate()?;
            let corpus = build_pretraining_corpus(docs, seed)?;
            let (lm, rep) = pretrain_lm(&corpus, &vocab, &cfg)?;
            checkpoint::save(&lm, &vocab, &out)?;
            emit(report.as_deref(), &pretty(&rep))?;
        }
        Command::Train {
            config,
            data,
            lm,
            out,
            model,
            seed,
        } => {
            let mut config = read_config(config.as_deref())?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let data = load_dataset(&data)?;
            let (lm, vocab) = checkpoint::load(&lm)?;
            check_lm_width(&config, &lm)?;
            let outcome = train(&config, &data, &lm, &vocab)?;
            write_atomic(&out, pretty(&outcome.report).as_bytes())?;
            if let Some(p) = model {
                write_atomic(&p, outcome.model.to_json().as_bytes())?;
            }
            log::info!(
                "{}: test accuracy {:.4} (best step {})",
                config.arm(),
                outcome.report.test_metric,
                outcome.report.best_step
            );
        }
        Command::Eval {
            model,
            data,
            lm,
            split,
            out,
        } => {
            let model = GraphPromptModel::from_json(&fs::read_to_string(&model)?)?;
            let data = load_dataset(&data)?;
            let (lm, vocab) = checkpoint::load(&lm)?;
            check_lm_width(model.config(), &lm)?;
            let examples = match split {
                Split::Train => &data.train,
                Split::Validation => &data.validation,
                Split::Test => &data.test,
            };
            let prepared = prepare(examples, model.config().d)?;
            let accuracy = evaluate(&model, &lm, &vocab, &prepared)?;
            let result = serde_json::json!({
                "split": format!("{split:?}").to_lowercase(),
                "examples": prepared.len(),
                "accuracy": accuracy,
                "config": model.config(),
            });
            emit(out.as_deref(), &pretty(&result))?;
        }
        Command::Gradcheck { config, seed, out } => {
            let mut config = read_config(config.as_deref())?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let report = gradient_check_suite(&config)?;
            emit(out.as_deref(), &pretty(&report))?;
            if let Some(e) = first_failure(&report) {
                log::error!("{e}");
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Ablate {
            preset,
            config,
            data,
            lm,
            seeds,
            out,
            runs,
            jobs,
        } => {
            let base = read_config(config.as_deref())?;
            let arms = preset.arms(&base);
            for arm in &arms {
                arm.validate()?;
            }
            if seeds.is_empty() {
                return Err(Error::Config("at least one seed is required".into()));
            }
            let data: DatasetSplit = load_dataset(&data)?;
            let (lm, vocab) = checkpoint::load(&lm)?;
            check_lm_width(&base, &lm)?;
            let results = ablate(&arms, &seeds, &data, &lm, &vocab, jobs)?;
            if let Some(p) = runs {
                write_atomic(&p, pretty(&results).as_bytes())?;
            }
            let table = summarize(&results)?;
            let format = match out.extension().and_then(|e| e.to_str()) {
                Some("md") => Format::Md,
                _ => Format::Csv,
            };
            write_atomic(&out, render(&table, format).as_bytes())?;
            println!("{}", table.to_markdown());
            if results.iter().all(|r| r.outcome.is_err()) {
                log::error!("every run failed");
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Report {
            inputs,
            format,
            out,
        } => {
            let mut results = Vec::new();
            for p in &inputs {
                results.extend(read_results(p)?);
            }
            let table = summarize(&results)?;
            emit(out.as_deref(), &render(&table, format))?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
