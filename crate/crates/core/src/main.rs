use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use flora::config::{ConfigError, RunConfig};
use flora::eval::{load_records, run_eval, write_records, EvalError, EvalOptions};
use flora::pipeline::PipelineError;
use flora::synth::{self, Redundancy};
use flora::trace::{Trace, TraceEntry};
use flora::{Candidate, ImageRef, Query};

const EXIT_BACKEND: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NO_ANSWER: u8 = 3;

#[derive(Parser)]
#[command(name = "flora", version, about = "Grammar-regulated referring-object selection")]
struct Cli {
    /// Config file (defaults to $FLORA_CONFIG when set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sigma.kind=cubic`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// JSON script serving all three backends.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// JSON script serving only the LLM.
    #[arg(long)]
    mock_llm: Option<PathBuf>,
    #[arg(long)]
    llm_url: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the LLM for the four fields of a phrase and print the parsed result.
    Parse {
        phrase: String,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Rank candidate objects in one image for a phrase.
    Infer {
        phrase: String,
        #[arg(long)]
        image: String,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        /// JSON array of candidates; switches to association mode.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Include the backend call trace in the output.
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Evaluate a JSONL dataset and write summary.json and per_record.jsonl.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Stop at the first failing record.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Generate synthetic scenes, a dataset and a matching mock script.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value = "any3of4")]
        mode: Redundancy,
        /// Emit association records with the scene objects as given candidates.
        #[arg(long)]
        association: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Backend(anyhow::Error),
    Io(anyhow::Error),
    NoAnswer,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_backend() {
            Failure::Backend(e.into())
        } else {
            Failure::Usage(e.into())
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) | EvalError::Pool(_) => Failure::Io(e.into()),
            EvalError::Empty => Failure::Usage(e.into()),
            _ if e.is_backend() => Failure::Backend(e.into()),
            _ => Failure::Usage(e.into()),
        }
    }
}

fn io(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Io(e.into())
}

fn load_config(cli: &Cli, backends: Option<&BackendArgs>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    for o in &cli.overrides {
        let (k, v) =
            o.split_once('=').ok_or_else(|| Failure::Usage(anyhow::anyhow!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(b) = backends {
        if let Some(p) = &b.mock {
            cfg.mock_backends = Some(p.clone());
        }
        if let Some(p) = &b.mock_llm {
            cfg.mock_llm = Some(p.clone());
        }
        if let Some(u) = &b.llm_url {
            cfg.llm.url = Some(u.clone());
        }
    }
    Ok(cfg)
}

fn print_llm_calls(trace: &Trace) {
    for entry in &trace.calls {
        if let TraceEntry::Llm { field, prompt, response } = entry {
            eprintln!("[{field}] {prompt}\n  -> {response}");
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).map_err(io)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io(e)),
        _ => Ok(()),
    }
}

/// Error chain without causes the outer messages already spell out.
fn describe_error(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Parse { phrase, backends } => {
            let cfg = load_config(cli, Some(backends))?;
            let engine = cfg.engine()?;
            let llm = cfg.llm_backend()?;
            let set = flora::BackendSet::new(llm, std::sync::Arc::new(NoDetector), std::sync::Arc::new(NoDetector));
            let image = ImageRef::new("none://", 1, 1).expect("fixed valid size");
            let mut trace = Trace::default();
            let parsed = engine.describe(&Query::detection(image, phrase.clone()), &set, &mut trace)?;
            print_llm_calls(&trace);
            print_json(&parsed)
        }
        Command::Infer { phrase, image, width, height, candidates, top_k, trace, backends } => {
            let cfg = load_config(cli, Some(backends))?;
            let engine = cfg.engine()?;
            let set = cfg.backends()?;
            let image = ImageRef::new(image.clone(), *width, *height).map_err(|e| Failure::Usage(e.into()))?;
            let query = match candidates {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))
                        .map_err(Failure::Usage)?;
                    let given: Vec<Candidate> = serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", path.display()))
                        .map_err(Failure::Usage)?;
                    Query::association(image, phrase.clone(), given).map_err(|e| Failure::Usage(e.into()))?
                }
                None => Query::detection(image, phrase.clone()),
            };
            let mut answer = engine.infer(&query, &set)?;
            print_llm_calls(&answer.trace);
            answer.truncate(*top_k);
            if !trace {
                answer.trace = Trace::default();
            }
            print_json(&answer)?;
            if answer.no_answer {
                return Err(Failure::NoAnswer);
            }
            Ok(())
        }
        Command::Eval { dataset, out, parallelism, strict, backends } => {
            let cfg = load_config(cli, Some(backends))?;
            let engine = cfg.engine()?;
            let set = cfg.backends()?;
            let records = match load_records(dataset) {
                Err(EvalError::Io(e)) => {
                    return Err(Failure::Usage(anyhow::Error::new(e).context(format!("reading {}", dataset.display()))))
                }
                other => other?,
            };
            let options = EvalOptions {
                parallelism: parallelism.unwrap_or(cfg.eval_parallelism),
                strict: *strict || cfg.eval_strict,
            };
            let report = run_eval(&engine, &set, &records, options)?;
            report.write(out)?;
            print_json(&report.summary)
        }
        Command::Synth { seed, count, mode, association, out } => {
            let scenes = synth::generate_batch(*seed, *count, *mode).map_err(|e| Failure::Usage(e.into()))?;
            write_synth(out, &scenes, *association).map_err(io)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
            Ok(())
        }
    }
}

fn write_synth(out: &Path, scenes: &[synth::SceneSpec], association: bool) -> anyhow::Result<()> {
    let scene_dir = out.join("scenes");
    std::fs::create_dir_all(&scene_dir)?;
    for s in scenes {
        std::fs::write(scene_dir.join(format!("{}.json", s.scene_id())), serde_json::to_string_pretty(s)?)?;
    }
    let records: Vec<_> =
        scenes.iter().map(|s| if association { s.association_record() } else { s.detection_record() }).collect();
    write_records(out.join("records.jsonl"), &records)?;
    std::fs::write(out.join("mock.json"), serde_json::to_string_pretty(&synth::mock_script(scenes))?)?;
    Ok(())
}

/// Stand-in for detector and scorer when only the LLM is needed.
struct NoDetector;

impl flora::backends::DetectorBackend for NoDetector {
    fn detect(&self, _: &ImageRef, _: &str, _: usize) -> Result<Vec<Candidate>, flora::BackendError> {
        Ok(Vec::new())
    }
}

impl flora::backends::ScorerBackend for NoDetector {
    fn score_texts(&self, _: &ImageRef, _: &flora::BBox, texts: &[String]) -> Result<Vec<f64>, flora::BackendError> {
        Ok(vec![0.0; texts.len()])
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NoAnswer) => {
            eprintln!("no candidate matched");
            ExitCode::from(EXIT_NO_ANSWER)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe_error(&e));
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Backend(e)) | Err(Failure::Io(e)) => {
            eprintln!("error: {}", describe_error(&e));
            ExitCode::from(EXIT_BACKEND)
        }
    }
}
