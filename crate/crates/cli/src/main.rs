//! `capaug` command-line interface.
//!
//! Exit codes: 0 on success, 1 on failure or partial failure (with a
//! failure file next to the outputs), 2 on invalid arguments or config.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use capaug::corpus::{self, Manifest, ManifestMetadata, WavCapsSubset};
use capaug::filter::{self, FilterRules};
use capaug::harness::{
    self, ExperimentConfig, HarnessError, LlmChoice, ReportFormat, ReportMeta, ReportRow, SyntheticEvalSpec,
};
use capaug::llm::{LlmConfig, MockProfile};
use capaug::prompt::{self, PromptKind, PromptTemplate};
use capaug::separation::{self, EnsembleWeights, OracleSources, SeparatorSpec};
use capaug::signal::{self, WavEncoding};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tracing::info;

#[derive(Parser)]
#[command(name = "capaug", version, about = "Caption augmentation and separation evaluation toolkit")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More logging (-v info, -vv debug). `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Show or render prompt templates.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Build a manifest from dataset metadata.
    Ingest(IngestArgs),
    /// Generate, filter and attach augmented captions.
    Augment(AugmentArgs),
    /// Filter raw LLM responses (JSON lines in, JSON lines out).
    Filter(FilterArgs),
    /// Per-dataset clip and caption counts of a manifest.
    Stats(StatsArgs),
    /// Mix a target and an interference at a given SNR.
    Mix(MixArgs),
    /// Run one separator on one mixture.
    Separate(SeparateArgs),
    /// Score estimates, or run the configured separators on an evaluation set.
    Eval(EvalArgs),
    /// Weighted sum of estimates.
    Ensemble(EnsembleArgs),
    /// Render a comparison table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PromptCmd {
    /// Print a built-in instruction in its display notation.
    Show {
        kind: String,
        /// Print the template as JSON instead.
        #[arg(long)]
        json: bool,
    },
    /// Render a concrete prompt for a caption.
    Render {
        /// Built-in kind; ignored with --template.
        #[arg(default_value = "wavcaps")]
        kind: String,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        count: Option<u32>,
        /// Template JSON `{kind, instruction_text, requested_count}`.
        #[arg(long)]
        template: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum IngestSource {
    Clotho,
    Fsd50k,
    Wavcaps,
}

#[derive(Args)]
struct IngestArgs {
    source: IngestSource,
    /// Metadata file (CSV for clotho/fsd50k, JSON for wavcaps).
    input: PathBuf,
    /// WavCaps subset: bbc, soundbible, audioset (freesound is refused).
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    audio_dir: Option<PathBuf>,
    /// Existing manifest to add the new entries to.
    #[arg(long)]
    merge: Option<PathBuf>,
    /// Output manifest; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LlmArgs {
    /// Use the deterministic offline mock (seeded by --seed).
    #[arg(long, conflicts_with = "llm_endpoint")]
    mock_llm: bool,
    /// Mock behaviour: mixed, always_failure or empty.
    #[arg(long, requires = "mock_llm")]
    mock_profile: Option<String>,
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// simple, clotho or wavcaps.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    count: Option<u32>,
    #[command(flatten)]
    llm: LlmArgs,
    /// Continue from the output manifest and checkpoint in --out-dir.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct FilterArgs {
    /// FilterRules JSON; defaults when absent.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// JSON lines of `{clip_id, response_text}`; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Markdown,
    Csv,
}

impl From<TableFormat> for ReportFormat {
    fn from(f: TableFormat) -> Self {
        match f {
            TableFormat::Markdown => ReportFormat::Markdown,
            TableFormat::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: TableFormat,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    interference: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    snr: f64,
    /// Mixture output; `<out-dir>/mixture.wav` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the scaled sources that make up the mixture.
    #[arg(long)]
    sources_out: Option<PathBuf>,
    #[arg(long)]
    pcm16: bool,
}

#[derive(Args)]
struct SeparateArgs {
    /// SeparatorSpec JSON, e.g. `{"kind":"external","command_template":"..."}`.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long, default_value = "")]
    caption: String,
    #[arg(long)]
    out: PathBuf,
    /// True target, for the oracle separator.
    #[arg(long)]
    target: Option<PathBuf>,
    /// True interference, for the oracle separator; mixture minus target
    /// when absent.
    #[arg(long)]
    interference: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of estimates to score (score mode).
    #[arg(long)]
    estimates: Option<PathBuf>,
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long)]
    mixtures: Option<PathBuf>,
    /// Per-clip CSV in score mode; `<out-dir>/metrics.csv` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON object mapping clip id to caption (run mode).
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Generate this many synthetic tone-in-noise clips instead of reading
    /// directories (run mode).
    #[arg(long)]
    synthetic: Option<usize>,
    /// Length of synthetic clips in seconds.
    #[arg(long, default_value_t = 4.0)]
    synthetic_secs: f64,
    /// Fixed SNR for synthetic clips; otherwise drawn from the config range.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Override the config epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Uniform when absent.
    #[arg(long, num_args = 1..)]
    weights: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON array of rows `{model, training_dataset, caption_augmentation, sdr_db, sdri_db, si_sdr_db}`.
    #[arg(long, conflicts_with = "evaluation")]
    rows: Option<PathBuf>,
    /// `evaluation.json` written by `eval`.
    #[arg(long)]
    evaluation: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: TableFormat,
    #[arg(long, default_value = "Separation results")]
    title: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invalid input that should exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

enum Status {
    Ok,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .init();
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

fn validated(config: ExperimentConfig) -> Result<ExperimentConfig> {
    config.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(config)
}

fn run(cli: Cli) -> Result<Status> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Prompt(cmd) => prompt_cmd(cmd),
        Command::Ingest(args) => ingest(args),
        Command::Augment(args) => augment(config, args),
        Command::Filter(args) => filter_cmd(config, args),
        Command::Stats(args) => stats(args),
        Command::Mix(args) => mix(config, args),
        Command::Separate(args) => separate(args),
        Command::Eval(args) => eval(config, args),
        Command::Ensemble(args) => ensemble(args),
        Command::Report(args) => report(args),
    }
}

fn parse_kind(s: &str) -> Result<PromptKind> {
    s.parse::<PromptKind>().map_err(|e| config_error(e.to_string()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("invalid JSON in {}: {e}", path.display())))
}

fn prompt_cmd(cmd: PromptCmd) -> Result<Status> {
    match cmd {
        PromptCmd::Show { kind, json } => {
            let template = prompt::builtin_template(parse_kind(&kind)?).map_err(|e| config_error(e.to_string()))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&template)?);
            } else {
                println!("{}", template.display_text());
            }
        }
        PromptCmd::Render {
            kind,
            caption,
            count,
            template,
        } => {
            let template: PromptTemplate = match template {
                Some(path) => read_json(&path)?,
                None => prompt::builtin_template(parse_kind(&kind)?).map_err(|e| config_error(e.to_string()))?,
            };
            let text = template.render(&caption, count).map_err(|e| config_error(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(Status::Ok)
}

fn ingest(args: IngestArgs) -> Result<Status> {
    let audio_dir = args.audio_dir.as_deref();
    let entries = match args.source {
        IngestSource::Clotho => corpus::ingest_clotho(&args.input, audio_dir)?,
        IngestSource::Fsd50k => corpus::ingest_fsd50k(&args.input, audio_dir)?,
        IngestSource::Wavcaps => {
            let subset: WavCapsSubset = args
                .subset
                .as_deref()
                .ok_or_else(|| config_error("wavcaps needs --subset"))?
                .parse()
                .map_err(|e: corpus::CorpusError| config_error(e.to_string()))?;
            if subset == WavCapsSubset::FreeSound {
                return Err(config_error(corpus::CorpusError::FreeSoundExcluded.to_string()));
            }
            corpus::ingest_wavcaps(&args.input, subset, audio_dir)?
        }
    };
    let added = entries.len();
    let new = Manifest::new(ManifestMetadata::now(), entries)?;
    let manifest = match &args.merge {
        Some(path) => Manifest::read(path)?.merge(new)?,
        None => new,
    };
    info!(added, total = manifest.len(), "ingested");
    write_output(args.out.as_deref(), &manifest.to_canonical_string())?;
    if args.out.is_some() {
        eprintln!("{added} clips ingested, {} in manifest", manifest.len());
    }
    Ok(Status::Ok)
}

fn apply_llm_args(config: &mut ExperimentConfig, llm: &LlmArgs) -> Result<()> {
    if llm.mock_llm {
        let profile = match &llm.mock_profile {
            Some(p) => serde_json::from_value::<MockProfile>(serde_json::Value::String(p.clone()))
                .map_err(|_| config_error(format!("unknown mock profile `{p}`")))?,
            None => MockProfile::Mixed,
        };
        config.llm = LlmChoice::Mock {
            seed: None,
            profile,
            max_concurrent_requests: 4,
        };
    } else if llm.llm_endpoint.is_some() || llm.llm_model.is_some() {
        let mut http = match &config.llm {
            LlmChoice::Http(c) => c.clone(),
            LlmChoice::Mock { .. } => LlmConfig::default(),
        };
        if let Some(url) = &llm.llm_endpoint {
            http.endpoint_url = url.clone();
        }
        if let Some(model) = &llm.llm_model {
            http.model_id = model.clone();
        }
        config.llm = LlmChoice::Http(http);
    }
    Ok(())
}

#[derive(Serialize)]
struct FailedClip<'a> {
    clip_id: &'a str,
    error: &'a str,
}

fn augment(mut config: ExperimentConfig, args: AugmentArgs) -> Result<Status> {
    if let Some(m) = args.manifest {
        config.manifest_path = Some(m);
    }
    if let Some(p) = &args.prompt {
        config.prompt.kind = parse_kind(p)?;
    }
    if let Some(n) = args.count {
        config.prompt.requested_count = n;
    }
    apply_llm_args(&mut config, &args.llm)?;
    if config.manifest_path.is_none() && !(args.resume && config.augmented_manifest_path().exists()) {
        return Err(config_error("no manifest: pass --manifest or set manifest_path"));
    }
    let config = validated(config)?;

    let (stats, aborted) = match harness::run_augmentation(&config, args.resume) {
        Ok((_, stats)) => (stats, None),
        Err(HarnessError::TooManyFailures { failed, total, partial }) => (partial.1, Some((failed, total))),
        Err(HarnessError::Config(msg)) => return Err(config_error(msg)),
        Err(e) => return Err(e.into()),
    };

    let failures: Vec<FailedClip> = stats
        .clips
        .iter()
        .filter_map(|c| {
            c.error.as_deref().map(|error| FailedClip {
                clip_id: &c.clip_id,
                error,
            })
        })
        .collect();
    let failures_path = config.out_dir.join("failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        harness::write_json(&failures_path, &failures)?;
    }

    println!(
        "{} clips augmented ({} skipped, {} failed): {} captions accepted, {} attached",
        stats.clips.len(),
        stats.skipped.len(),
        failures.len(),
        stats.accepted(),
        stats.attached()
    );
    for (reason, n) in stats.reject_histogram() {
        println!("  rejected {reason:?}: {n}");
    }
    println!("manifest: {}", config.augmented_manifest_path().display());
    if let Some((failed, total)) = aborted {
        eprintln!("aborted: {failed} of {total} clips failed, see {}", failures_path.display());
        return Ok(Status::Partial);
    }
    if !failures.is_empty() {
        eprintln!("{} clips failed, see {}", failures.len(), failures_path.display());
        return Ok(Status::Partial);
    }
    Ok(Status::Ok)
}

#[derive(Deserialize)]
struct ResponseLine {
    clip_id: String,
    response_text: String,
}

#[derive(Serialize)]
struct FilterLine<'a> {
    clip_id: &'a str,
    #[serde(flatten)]
    report: filter::FilterReport,
}

fn filter_cmd(config: ExperimentConfig, args: FilterArgs) -> Result<Status> {
    let rules: FilterRules = match &args.rules {
        Some(path) => read_json(path)?,
        None => config.filter.clone(),
    };
    rules.validate().map_err(|e| config_error(e.to_string()))?;
    let reader: Box<dyn BufRead> = match &args.input {
        Some(path) => Box::new(BufReader::new(
            fs::File::open(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?,
        )),
        None => Box::new(BufReader::new(io::stdin())),
    };
    let mut out = String::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ResponseLine =
            serde_json::from_str(&line).map_err(|e| config_error(format!("line {}: {e}", i + 1)))?;
        let parsed = filter::parse_numbered(&item.response_text);
        let report = filter::filter(&parsed, &rules);
        out.push_str(&serde_json::to_string(&FilterLine {
            clip_id: &item.clip_id,
            report,
        })?);
        out.push('\n');
    }
    write_output(args.out.as_deref(), &out)?;
    Ok(Status::Ok)
}

fn stats(args: StatsArgs) -> Result<Status> {
    let manifest = Manifest::read(&args.manifest)?;
    let rows = corpus::summarize(&manifest);
    let text = match args.format {
        TableFormat::Markdown => corpus::render_summary_markdown(&rows),
        TableFormat::Csv => corpus::render_summary_csv(&rows),
    };
    print!("{text}");
    Ok(Status::Ok)
}

fn mix(config: ExperimentConfig, args: MixArgs) -> Result<Status> {
    let target = signal::read_wav(&args.target)?;
    let interference = signal::read_wav(&args.interference)?;
    let m = signal::mix(&target, &interference, args.snr)?;
    let encoding = if args.pcm16 {
        WavEncoding::Pcm16
    } else {
        WavEncoding::Float32
    };
    let out = args.out.unwrap_or_else(|| config.out_dir.join("mixture.wav"));
    create_parent(&out)?;
    signal::write_wav(&out, &m.mixture, encoding)?;
    if let Some(dir) = &args.sources_out {
        fs::create_dir_all(dir)?;
        signal::write_wav(&dir.join("target.wav"), &m.target, encoding)?;
        signal::write_wav(&dir.join("interference.wav"), &m.interference, encoding)?;
    }
    println!(
        "wrote {} (interference gain {:.6}, peak scale {:.6})",
        out.display(),
        m.interference_gain,
        m.peak_scale
    );
    Ok(Status::Ok)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn separate(args: SeparateArgs) -> Result<Status> {
    let spec: SeparatorSpec = read_json(&args.spec)?;
    spec.validate().map_err(|e| config_error(e.to_string()))?;
    let mixture = signal::read_wav(&args.mixture)?;
    let target = args.target.as_deref().map(signal::read_wav).transpose()?;
    let interference = match (&target, &args.interference) {
        (_, Some(path)) => Some(signal::read_wav(path)?),
        (Some(t), None) => {
            t.check_aligned(&mixture)?;
            let residual = mixture.samples().iter().zip(t.samples()).map(|(m, t)| m - t).collect();
            Some(signal::Waveform::new(residual, mixture.sample_rate())?)
        }
        (None, None) => None,
    };
    let oracle = match (&target, &interference) {
        (Some(target), Some(interference)) => Some(OracleSources { target, interference }),
        _ => None,
    };
    if spec.needs_oracle_sources() && oracle.is_none() {
        return Err(config_error("the oracle separator needs --target"));
    }
    let estimate = separation::separate(&spec, &mixture, &args.caption, oracle)?;
    create_parent(&args.out)?;
    signal::write_wav(&args.out, &estimate, WavEncoding::Float32)?;
    println!("wrote {}", args.out.display());
    Ok(Status::Ok)
}

fn eval(config: ExperimentConfig, args: EvalArgs) -> Result<Status> {
    let mut config = config;
    if let Some(eps) = args.epsilon {
        config.epsilon = eps;
    }
    if let Some(estimates) = &args.estimates {
        let (references, mixtures) = match (&args.references, &args.mixtures) {
            (Some(r), Some(m)) => (r, m),
            _ => return Err(config_error("scoring needs --references and --mixtures")),
        };
        let config = validated(config)?;
        let clips = harness::evaluate_directories(estimates, references, mixtures, config.epsilon)?;
        let out = args.out.unwrap_or_else(|| config.out_dir.join("metrics.csv"));
        harness::write_metrics_csv(&out, &clips)?;
        let ok: Vec<_> = clips.iter().filter_map(|c| c.metrics).collect();
        let failed = clips.len() - ok.len();
        if ok.is_empty() {
            eprintln!("no clip could be scored");
        } else {
            let agg = capaug::metrics::aggregate(&ok, config.clamp_db)?;
            println!(
                "{} clips: SDR {:.3} SDRi {:.3} SI-SDR {:.3}",
                ok.len(),
                agg.sdr_db,
                agg.sdri_db,
                agg.si_sdr_db
            );
        }
        for c in clips.iter().filter(|c| c.error.is_some()) {
            eprintln!("{}: {}", c.clip_id, c.error.as_deref().unwrap_or_default());
        }
        println!("per-clip metrics: {}", out.display());
        return Ok(if failed > 0 { Status::Partial } else { Status::Ok });
    }

    let config = validated(config)?;
    if config.separators.is_empty() {
        return Err(config_error("no separators configured"));
    }
    let eval_set = match args.synthetic {
        Some(n) => harness::synthetic_eval_set(
            &SyntheticEvalSpec {
                clips: n,
                duration_secs: args.synthetic_secs,
                snr_db: args.snr,
                seed: config.seed,
                ..Default::default()
            },
            &config.snr,
        )?,
        None => {
            let (references, mixtures) = match (&args.references, &args.mixtures) {
                (Some(r), Some(m)) => (r, m),
                _ => return Err(config_error("pass --synthetic N, or --references and --mixtures")),
            };
            let captions: BTreeMap<String, String> = match &args.captions {
                Some(path) => read_json(path)?,
                None => BTreeMap::new(),
            };
            harness::load_eval_set(mixtures, references, &captions)?
        }
    };
    if args.synthetic.is_some() {
        // Keep the generated set so `eval --estimates` can rescore it later.
        for (sub, pick) in [("mixtures", 0), ("references", 1)] {
            let dir = config.out_dir.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for clip in &eval_set {
                let wave = if pick == 0 { &clip.mixture } else { &clip.target };
                signal::write_wav(&dir.join(format!("{}.wav", clip.clip_id)), wave, WavEncoding::Float32)?;
            }
        }
    }
    let run = harness::run_evaluation(&config, &eval_set, Some(&config.out_dir))?;
    harness::write_json(&config.out_dir.join("evaluation.json"), &run)?;
    let rows = run.report_rows();
    if !rows.is_empty() {
        let md = harness::render_report(&rows, ReportFormat::Markdown, &run.report_meta("Separation results"))?;
        write_output(Some(&config.out_dir.join("report.md")), &md)?;
        print!("{md}");
    }
    for s in run.systems.iter().filter(|s| s.failed > 0) {
        eprintln!("{}: {} of {} clips failed", s.name, s.failed, s.clips.len());
    }
    Ok(if run.has_failures() { Status::Partial } else { Status::Ok })
}

fn ensemble(args: EnsembleArgs) -> Result<Status> {
    let estimates = args
        .inputs
        .iter()
        .map(|p| signal::read_wav(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let weights = if args.weights.is_empty() {
        EnsembleWeights::uniform(estimates.len())
    } else {
        EnsembleWeights::new(args.weights.clone())
    }
    .map_err(|e| config_error(e.to_string()))?;
    if weights.len() != estimates.len() {
        return Err(config_error(format!(
            "{} weights for {} inputs",
            weights.len(),
            estimates.len()
        )));
    }
    let out = separation::ensemble(&estimates, &weights)?;
    create_parent(&args.out)?;
    signal::write_wav(&args.out, &out, WavEncoding::Float32)?;
    println!("wrote {}", args.out.display());
    Ok(Status::Ok)
}

fn report(args: ReportArgs) -> Result<Status> {
    let (rows, meta) = match (&args.rows, &args.evaluation) {
        (Some(path), None) => {
            let rows: Vec<ReportRow> = read_json(path)?;
            let meta = ReportMeta {
                title: args.title.clone(),
                ..Default::default()
            };
            (rows, meta)
        }
        (None, Some(path)) => {
            let run: harness::EvaluationRun = read_json(path)?;
            (run.report_rows(), run.report_meta(args.title.clone()))
        }
        _ => return Err(config_error("pass --rows or --evaluation")),
    };
    if rows.is_empty() {
        return Err(config_error("no rows to report"));
    }
    let text = harness::render_report(&rows, args.format.into(), &meta).map_err(|e| anyhow!(e))?;
    write_output(args.out.as_deref(), &text)?;
    Ok(Status::Ok)
}
