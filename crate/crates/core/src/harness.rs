//! Experiment orchestration.
//!
//! An [`ExperimentConfig`] drives two kinds of run:
//!
//! - augmentation: render a prompt per clip, complete it, filter the
//!   response and attach the survivors to the manifest;
//! - evaluation: run every configured separator over an evaluation set,
//!   build ensembles from the member estimates and score everything.
//!
//! Results are rendered as comparison tables by [`render_report`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::corpus::{AugmentationRecord, AugmentationStatus, ClipEntry, CorpusError, Manifest};
use crate::filter::{self, FilterError, FilterRules, RejectReason};
use crate::llm::{LlmConfig, LlmError, LlmGateway, MockBackend, MockProfile};
use crate::metrics::{self, MetricsError, MetricsTriple, DEFAULT_CLAMP_DB, HARNESS_EPSILON};
use crate::prompt::{self, PromptError, PromptKind, PromptTemplate, DEFAULT_REQUESTED_COUNT};
use crate::separation::{self, EnsembleWeights, OracleSources, SeparationError, Separator, SeparatorSpec};
use crate::signal::{self, SignalError, SnrRange, WavEncoding, Waveform};
use crate::util::{seeded_rng, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "augment_stats.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.jsonl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Separation(#[from] SeparationError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("augmentation aborted: {failed} of {total} clips failed")]
    TooManyFailures {
        failed: usize,
        total: usize,
        partial: Box<(Manifest, AugmentationStats)>,
    },
    #[error("a report needs at least one row")]
    EmptyReport,
    #[error("unknown report format `{0}` (expected markdown or csv)")]
    UnknownFormat(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptChoice {
    pub kind: PromptKind,
    #[serde(default = "default_requested_count")]
    pub requested_count: u32,
    /// Required for `custom`, ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_text: Option<String>,
}

fn default_requested_count() -> u32 {
    DEFAULT_REQUESTED_COUNT
}

impl Default for PromptChoice {
    fn default() -> Self {
        PromptChoice {
            kind: PromptKind::ModifiedWavCaps,
            requested_count: DEFAULT_REQUESTED_COUNT,
            instruction_text: None,
        }
    }
}

impl PromptChoice {
    pub fn template(&self) -> Result<PromptTemplate, HarnessError> {
        let base = match (self.kind, &self.instruction_text) {
            (PromptKind::Custom, Some(text)) => PromptTemplate::custom(text.clone()),
            (PromptKind::Custom, None) => {
                return Err(HarnessError::Config("custom prompt needs instruction_text".into()))
            }
            (kind, _) => prompt::builtin_template(kind)?,
        };
        let template = base.with_count(self.requested_count)?;
        template.validate()?;
        Ok(template)
    }
}

fn default_mock_concurrency() -> usize {
    4
}

/// Completion backend selection. The mock seed defaults to the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum LlmChoice {
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        profile: MockProfile,
        #[serde(default = "default_mock_concurrency")]
        max_concurrent_requests: usize,
    },
    Http(LlmConfig),
}

impl Default for LlmChoice {
    fn default() -> Self {
        LlmChoice::Mock {
            seed: None,
            profile: MockProfile::Mixed,
            max_concurrent_requests: default_mock_concurrency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSeparator {
    pub name: String,
    pub spec: SeparatorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDef {
    pub name: String,
    pub members: Vec<String>,
    /// Uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl EnsembleDef {
    pub fn weights(&self) -> Result<EnsembleWeights, SeparationError> {
        match &self.weights {
            Some(w) => EnsembleWeights::new(w.clone()),
            None => EnsembleWeights::uniform(self.members.len()),
        }
    }
}

fn default_epsilon() -> f64 {
    HARNESS_EPSILON
}

fn default_clamp() -> f64 {
    DEFAULT_CLAMP_DB
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("capaug-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub prompt: PromptChoice,
    #[serde(default)]
    pub llm: LlmChoice,
    #[serde(default)]
    pub filter: FilterRules,
    #[serde(default)]
    pub separators: Vec<NamedSeparator>,
    #[serde(default)]
    pub ensembles: Vec<EnsembleDef>,
    #[serde(default)]
    pub snr: SnrRange,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_clamp")]
    pub clamp_db: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Free-form record of how externally trained separators were made
    /// (optimizer, learning rate, batch size, ...). Not interpreted.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest_path: None,
            prompt: PromptChoice::default(),
            llm: LlmChoice::default(),
            filter: FilterRules::default(),
            separators: Vec::new(),
            ensembles: Vec::new(),
            snr: SnrRange::default(),
            epsilon: default_epsilon(),
            clamp_db: default_clamp(),
            out_dir: default_out_dir(),
            seed: 0,
            provenance: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig = serde_json::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.prompt.template()?;
        self.filter.validate()?;
        match &self.llm {
            LlmChoice::Mock { max_concurrent_requests, .. } if *max_concurrent_requests == 0 => {
                return Err(HarnessError::Config("max_concurrent_requests must be at least 1".into()))
            }
            LlmChoice::Http(cfg) => cfg.validate()?,
            _ => {}
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(HarnessError::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.clamp_db.is_nan() || self.clamp_db <= 0.0 {
            return Err(HarnessError::Config(format!("clamp_db must be positive, got {}", self.clamp_db)));
        }
        if !(self.snr.min_db.is_finite() && self.snr.max_db.is_finite() && self.snr.min_db <= self.snr.max_db) {
            return Err(HarnessError::Config("snr range must be finite with min_db <= max_db".into()));
        }

        let mut names = HashSet::new();
        for sep in &self.separators {
            if sep.name.trim().is_empty() {
                return Err(HarnessError::Config("separator name is empty".into()));
            }
            if !names.insert(sep.name.as_str()) {
                return Err(HarnessError::Config(format!("duplicate separator name `{}`", sep.name)));
            }
            sep.spec.validate()?;
        }
        let separators: HashSet<&str> = names.clone();
        for ens in &self.ensembles {
            if ens.name.trim().is_empty() {
                return Err(HarnessError::Config("ensemble name is empty".into()));
            }
            if !names.insert(ens.name.as_str()) {
                return Err(HarnessError::Config(format!("duplicate name `{}`", ens.name)));
            }
            if ens.members.is_empty() {
                return Err(HarnessError::Config(format!("ensemble `{}` has no members", ens.name)));
            }
            for m in &ens.members {
                if !separators.contains(m.as_str()) {
                    return Err(HarnessError::Config(format!(
                        "ensemble `{}` references unknown separator `{m}`",
                        ens.name
                    )));
                }
            }
            let weights = ens.weights()?;
            if weights.len() != ens.members.len() {
                return Err(HarnessError::Config(format!(
                    "ensemble `{}` has {} weights for {} members",
                    ens.name,
                    weights.len(),
                    ens.members.len()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the config's JSON form.
    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn build_gateway(&self) -> Result<LlmGateway, HarnessError> {
        Ok(match &self.llm {
            LlmChoice::Mock {
                seed,
                profile,
                max_concurrent_requests,
            } => {
                let config = LlmConfig {
                    model_id: MockBackend::MODEL_ID.to_string(),
                    max_concurrent_requests: *max_concurrent_requests,
                    ..LlmConfig::default()
                };
                let backend = MockBackend::new(seed.unwrap_or(self.seed)).with_profile(*profile);
                LlmGateway::mock(config, backend)?
            }
            LlmChoice::Http(config) => LlmGateway::http(config.clone())?,
        })
    }

    pub fn augmented_manifest_path(&self) -> PathBuf {
        self.out_dir.join(MANIFEST_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_FILE)
    }

    pub fn stats_path(&self) -> PathBuf {
        self.out_dir.join(STATS_FILE)
    }
}

// ---------------------------------------------------------------------------
// Augmentation

/// Per-clip bookkeeping. For every clip
/// `accepted + sum(rejected) + missing + gateway_failures == requested + surplus`,
/// where `missing` and `surplus` measure how far the number of parsed lines
/// fell short of or exceeded the request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipAugmentStats {
    pub clip_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_caption_index: Option<usize>,
    pub requested: usize,
    pub parsed: usize,
    pub accepted: usize,
    /// Accepted captions that were new to the clip.
    pub attached: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    pub missing: usize,
    pub surplus: usize,
    /// Slots lost to a failed request (all of them, or none).
    pub gateway_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ClipAugmentStats {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.accepted + self.rejected_total() + self.missing + self.gateway_failures == self.requested + self.surplus
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationStats {
    /// Clips processed in this run, sorted by clip id.
    pub clips: Vec<ClipAugmentStats>,
    /// Clips left alone because they already had a completed record.
    pub skipped: Vec<String>,
}

impl AugmentationStats {
    pub fn failed(&self) -> usize {
        self.clips.iter().filter(|c| c.failed()).count()
    }

    pub fn accepted(&self) -> usize {
        self.clips.iter().map(|c| c.accepted).sum()
    }

    pub fn attached(&self) -> usize {
        self.clips.iter().map(|c| c.attached).sum()
    }

    pub fn reject_histogram(&self) -> BTreeMap<RejectReason, usize> {
        let mut hist = BTreeMap::new();
        for c in &self.clips {
            for (reason, n) in &c.rejected {
                *hist.entry(*reason).or_insert(0) += n;
            }
        }
        hist
    }
}

#[derive(Debug, Clone)]
pub struct AugmentSettings {
    pub template: PromptTemplate,
    pub rules: FilterRules,
    pub seed: u64,
    /// Append-only per-clip log, replayed by [`apply_checkpoint`].
    pub checkpoint: Option<PathBuf>,
}

impl AugmentSettings {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        Ok(AugmentSettings {
            template: config.prompt.template()?,
            rules: config.filter.clone(),
            seed: config.seed,
            checkpoint: None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointLine {
    clip_id: String,
    record: AugmentationRecord,
    accepted: Vec<String>,
}

struct ClipWork {
    stats: ClipAugmentStats,
    record: AugmentationRecord,
    accepted: Vec<String>,
}

fn is_done(entry: &ClipEntry) -> bool {
    matches!(
        entry.augmentation,
        Some(AugmentationRecord {
            status: AugmentationStatus::Done,
            ..
        })
    )
}

/// Index of the original caption used as the prompt seed for a clip.
pub fn seed_caption_index(seed: u64, clip_id: &str, num_captions: usize) -> usize {
    let mut rng = seeded_rng(&[b"seed-caption", &seed.to_le_bytes(), clip_id.as_bytes()]);
    rng.gen_range(0..num_captions)
}

fn augment_clip(entry: &ClipEntry, gateway: &LlmGateway, settings: &AugmentSettings) -> ClipWork {
    let requested = settings.template.requested_count as usize;
    let index = seed_caption_index(settings.seed, &entry.clip_id, entry.original_captions.len());
    debug!(clip_id = %entry.clip_id, seed_caption_index = index, "augmenting");
    let mut stats = ClipAugmentStats {
        clip_id: entry.clip_id.clone(),
        seed_caption_index: Some(index),
        requested,
        ..Default::default()
    };

    let response = settings
        .template
        .render(&entry.original_captions[index], None)
        .map_err(|e| e.to_string())
        .and_then(|p| gateway.complete(&p).map_err(|e| e.to_string()));
    let text = match response {
        Ok(r) => r.text,
        Err(message) => {
            warn!(clip_id = %entry.clip_id, error = %message, "clip failed");
            stats.gateway_failures = requested;
            stats.error = Some(message.clone());
            return ClipWork {
                stats,
                record: AugmentationRecord {
                    seed_caption_index: index,
                    status: AugmentationStatus::Failed,
                    error: Some(message),
                },
                accepted: Vec::new(),
            };
        }
    };

    let parsed = filter::parse_numbered(&text);
    let report = filter::filter(&parsed, &settings.rules);
    stats.parsed = parsed.len();
    stats.accepted = report.accepted.len();
    stats.rejected = report.histogram();
    stats.missing = requested.saturating_sub(parsed.len());
    stats.surplus = parsed.len().saturating_sub(requested);
    ClipWork {
        stats,
        record: AugmentationRecord {
            seed_caption_index: index,
            status: AugmentationStatus::Done,
            error: None,
        },
        accepted: report.accepted,
    }
}

/// Augments every clip without a completed record. Clips run in parallel,
/// bounded by the gateway's concurrency limit; results are attached in
/// clip id order so the output does not depend on scheduling.
///
/// Fails with [`HarnessError::TooManyFailures`] once more than half of the
/// pending clips have failed; the error carries the partial result.
pub fn augment_manifest(
    mut manifest: Manifest,
    gateway: &LlmGateway,
    settings: &AugmentSettings,
) -> Result<(Manifest, AugmentationStats), HarnessError> {
    settings.template.validate()?;
    settings.rules.validate()?;

    let mut skipped = Vec::new();
    let mut pending = Vec::new();
    for entry in manifest.entries() {
        if is_done(entry) {
            skipped.push(entry.clip_id.clone());
        } else {
            pending.push(entry.clone());
        }
    }
    let total = pending.len();

    let checkpoint = match &settings.checkpoint {
        Some(path) => {
            create_parent(path)?;
            let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
            Some(Mutex::new(file))
        }
        None => None,
    };

    let failed = AtomicUsize::new(0);
    let aborted = AtomicBool::new(false);
    let threads = gateway.config().max_concurrent_requests.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let results: Vec<Option<ClipWork>> = pool.install(|| {
        pending
            .par_iter()
            .map(|entry| {
                if aborted.load(Ordering::SeqCst) {
                    return None;
                }
                let work = augment_clip(entry, gateway, settings);
                if work.stats.failed() {
                    let n = failed.fetch_add(1, Ordering::SeqCst) + 1;
                    if n * 2 > total {
                        aborted.store(true, Ordering::SeqCst);
                    }
                }
                if let Some(file) = &checkpoint {
                    let line = CheckpointLine {
                        clip_id: entry.clip_id.clone(),
                        record: work.record.clone(),
                        accepted: work.accepted.clone(),
                    };
                    let mut json = serde_json::to_string(&line).expect("checkpoint line serializes");
                    json.push('\n');
                    let mut file = file.lock().unwrap_or_else(|p| p.into_inner());
                    if let Err(e) = file.write_all(json.as_bytes()).and_then(|_| file.flush()) {
                        warn!(error = %e, "could not write checkpoint");
                    }
                }
                Some(work)
            })
            .collect()
    });

    let mut stats = AugmentationStats {
        clips: Vec::with_capacity(total),
        skipped,
    };
    for work in results.into_iter().flatten() {
        let ClipWork {
            stats: mut clip_stats,
            record,
            accepted,
        } = work;
        let outcome = manifest.attach_augmentations(&clip_stats.clip_id, &accepted)?;
        clip_stats.attached = outcome.added;
        set_record(&mut manifest, &clip_stats.clip_id, record)?;
        stats.clips.push(clip_stats);
    }
    manifest.metadata.prompt_kind = Some(settings.template.kind);
    manifest.metadata.seed = Some(settings.seed);

    let failed = stats.failed();
    info!(
        clips = stats.clips.len(),
        skipped = stats.skipped.len(),
        failed,
        accepted = stats.accepted(),
        "augmentation finished"
    );
    if aborted.load(Ordering::SeqCst) {
        return Err(HarnessError::TooManyFailures {
            failed,
            total,
            partial: Box::new((manifest, stats)),
        });
    }
    Ok((manifest, stats))
}

fn set_record(manifest: &mut Manifest, clip_id: &str, record: AugmentationRecord) -> Result<(), HarnessError> {
    let entry = manifest
        .get_mut(clip_id)
        .ok_or_else(|| CorpusError::UnknownClip(clip_id.to_string()))?;
    entry.augmentation = Some(record);
    Ok(())
}

/// Replays completed clips from a checkpoint log onto a manifest. Lines for
/// clips that are unknown or already completed are ignored. Returns the
/// number of clips restored.
pub fn apply_checkpoint(manifest: &mut Manifest, path: &Path) -> Result<usize, HarnessError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut restored = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(entry) = serde_json::from_str::<CheckpointLine>(&line) else {
            warn!("ignoring unreadable checkpoint line");
            continue;
        };
        if entry.record.status != AugmentationStatus::Done {
            continue;
        }
        match manifest.get(&entry.clip_id) {
            Some(e) if !is_done(e) => {}
            _ => continue,
        }
        manifest.attach_augmentations(&entry.clip_id, &entry.accepted)?;
        set_record(manifest, &entry.clip_id, entry.record)?;
        restored += 1;
    }
    Ok(restored)
}

/// Full augmentation run driven by a config. Reads `manifest_path` (or,
/// with `resume`, the run's own output manifest and checkpoint when they
/// exist), writes the augmented manifest and stats to `out_dir`.
///
/// On abort the partial manifest and stats are still written.
pub fn run_augmentation(config: &ExperimentConfig, resume: bool) -> Result<(Manifest, AugmentationStats), HarnessError> {
    config.validate()?;
    let out_manifest = config.augmented_manifest_path();
    let checkpoint = config.checkpoint_path();

    let mut manifest = if resume && out_manifest.exists() {
        info!(path = %out_manifest.display(), "resuming from previous output");
        Manifest::read(&out_manifest)?
    } else {
        let path = config
            .manifest_path
            .as_ref()
            .ok_or_else(|| HarnessError::Config("manifest_path is not set".into()))?;
        Manifest::read(path)?
    };
    if resume {
        let restored = apply_checkpoint(&mut manifest, &checkpoint)?;
        if restored > 0 {
            info!(restored, "restored clips from checkpoint");
        }
    } else if checkpoint.exists() {
        fs::remove_file(&checkpoint).map_err(io_err(&checkpoint))?;
    }

    let gateway = config.build_gateway()?;
    let mut settings = AugmentSettings::from_config(config)?;
    settings.checkpoint = Some(checkpoint.clone());

    match augment_manifest(manifest, &gateway, &settings) {
        Ok((manifest, stats)) => {
            manifest.write(&out_manifest)?;
            write_json(&config.stats_path(), &stats)?;
            if checkpoint.exists() {
                fs::remove_file(&checkpoint).map_err(io_err(&checkpoint))?;
            }
            Ok((manifest, stats))
        }
        Err(HarnessError::TooManyFailures { failed, total, partial }) => {
            partial.0.write(&out_manifest)?;
            write_json(&config.stats_path(), &partial.1)?;
            Err(HarnessError::TooManyFailures { failed, total, partial })
        }
        Err(e) => Err(e),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Evaluation

/// One evaluation item. `interference` is only used by oracle separators;
/// when absent it is taken as `mixture - target`.
#[derive(Debug, Clone)]
pub struct EvalClip {
    pub clip_id: String,
    pub caption: String,
    pub mixture: Waveform,
    pub target: Waveform,
    pub interference: Option<Waveform>,
}

impl EvalClip {
    pub fn interference(&self) -> Result<Waveform, SignalError> {
        match &self.interference {
            Some(i) => Ok(i.clone()),
            None => {
                self.mixture.check_aligned(&self.target)?;
                let residual = self
                    .mixture
                    .samples()
                    .iter()
                    .zip(self.target.samples())
                    .map(|(m, t)| m - t)
                    .collect();
                Waveform::new(residual, self.mixture.sample_rate())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEvalSpec {
    pub clips: usize,
    pub sample_rate: u32,
    pub duration_secs: f64,
    /// Fixed mixing SNR; drawn from the config range per clip when absent.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticEvalSpec {
    fn default() -> Self {
        SyntheticEvalSpec {
            clips: 20,
            sample_rate: 16_000,
            duration_secs: 4.0,
            snr_db: Some(0.0),
            seed: 0,
        }
    }
}

/// Tone-burst targets in white noise.
pub fn synthetic_eval_set(spec: &SyntheticEvalSpec, snr_range: &SnrRange) -> Result<Vec<EvalClip>, HarnessError> {
    let len = (spec.duration_secs * spec.sample_rate as f64).round() as usize;
    if len == 0 || spec.sample_rate == 0 {
        return Err(HarnessError::Config("synthetic clips need a positive length and rate".into()));
    }
    let sr = spec.sample_rate as f64;
    (0..spec.clips)
        .map(|i| {
            let mut rng = seeded_rng(&[b"synthetic-eval", &spec.seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
            let freq = rng.gen_range(220.0..2000.0);
            let burst = ((rng.gen_range(0.1..0.5) * sr) as usize).max(1);
            let gap = (rng.gen_range(0.05..0.3) * sr) as usize;
            let target = signal::tone_burst(freq, 0.5, spec.sample_rate, len, burst, gap);
            let noise = signal::white_noise(&mut rng, 0.5, spec.sample_rate, len);
            let snr = spec.snr_db.unwrap_or_else(|| snr_range.sample(&mut rng));
            let m = signal::mix(&target, &noise, snr)?;
            Ok(EvalClip {
                clip_id: format!("synth_{i:03}"),
                caption: format!("a {freq:.0} Hz tone beeping over static"),
                mixture: m.mixture,
                target: m.target,
                interference: Some(m.interference),
            })
        })
        .collect()
}

/// Reads an evaluation set from three directories of equally named WAV
/// files. Clip ids are file stems from the references directory; captions
/// come from the optional map and default to the empty string.
pub fn load_eval_set(
    mixtures: &Path,
    references: &Path,
    captions: &BTreeMap<String, String>,
) -> Result<Vec<EvalClip>, HarnessError> {
    let mut clips = Vec::new();
    for (clip_id, ref_path) in wav_files(references)? {
        let target = signal::read_wav(&ref_path)?;
        let mix_path = mixtures.join(ref_path.file_name().expect("listed file has a name"));
        let mixture = signal::read_wav(&mix_path)?;
        clips.push(EvalClip {
            caption: captions.get(&clip_id).cloned().unwrap_or_default(),
            clip_id,
            mixture,
            target,
            interference: None,
        });
    }
    Ok(clips)
}

/// `.wav` files in a directory as (stem, path), sorted by stem.
pub fn wav_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, HarnessError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_wav = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("wav"))
            .unwrap_or(false);
        if is_wav && path.is_file() {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Separator,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub name: String,
    pub kind: SystemKind,
    pub clips: Vec<ClipResult>,
    /// Clamped mean over the clips that succeeded; absent when none did.
    pub aggregate: Option<MetricsTriple>,
    pub failed: usize,
}

impl SystemResult {
    fn from_clips(name: String, kind: SystemKind, clips: Vec<ClipResult>, clamp_db: f64) -> Result<Self, HarnessError> {
        let ok: Vec<MetricsTriple> = clips.iter().filter_map(|c| c.metrics).collect();
        let failed = clips.len() - ok.len();
        let aggregate = if ok.is_empty() {
            None
        } else {
            Some(metrics::aggregate(&ok, clamp_db)?)
        };
        Ok(SystemResult {
            name,
            kind,
            clips,
            aggregate,
            failed,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRun {
    pub config_hash: String,
    pub epsilon: f64,
    pub clamp_db: f64,
    pub systems: Vec<SystemResult>,
}

impl EvaluationRun {
    pub fn system(&self, name: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.name == name)
    }

    pub fn has_failures(&self) -> bool {
        self.systems.iter().any(|s| s.failed > 0)
    }

    /// Report rows for every system with an aggregate, in run order.
    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.systems
            .iter()
            .filter_map(|s| {
                s.aggregate.map(|m| ReportRow {
                    model: s.name.clone(),
                    training_dataset: "-".to_string(),
                    caption_augmentation: None,
                    metrics: m,
                })
            })
            .collect()
    }

    pub fn report_meta(&self, title: impl Into<String>) -> ReportMeta {
        ReportMeta {
            title: title.into(),
            config_hash: Some(self.config_hash.clone()),
            epsilon: Some(self.epsilon),
            clamp_db: Some(self.clamp_db),
        }
    }
}

/// Turns a clip id into a safe file stem.
fn file_stem(clip_id: &str) -> String {
    clip_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn score(
    clip: &EvalClip,
    estimate: Result<Waveform, String>,
    estimate_dir: Option<&Path>,
    epsilon: f64,
) -> (ClipResult, Option<Waveform>) {
    let mut result = ClipResult {
        clip_id: clip.clip_id.clone(),
        metrics: None,
        error: None,
        estimate_path: None,
    };
    let estimate = match estimate {
        Ok(e) => e,
        Err(message) => {
            result.error = Some(message);
            return (result, None);
        }
    };
    match metrics::evaluate(&estimate, &clip.mixture, &clip.target, epsilon) {
        Ok(m) => result.metrics = Some(m),
        Err(e) => result.error = Some(e.to_string()),
    }
    if let Some(dir) = estimate_dir {
        let path = dir.join(format!("{}.wav", file_stem(&clip.clip_id)));
        match signal::write_wav(&path, &estimate, WavEncoding::Float32) {
            Ok(()) => result.estimate_path = Some(path),
            Err(e) => {
                result.metrics = None;
                result.error = Some(format!("could not write estimate: {e}"));
            }
        }
    }
    (result, Some(estimate))
}

/// Runs every separator on every clip, then every ensemble on the member
/// estimates, and scores all of them.
///
/// With an output directory, estimates go to `estimates/<system>/` and
/// per-clip metrics to `metrics/<system>.csv`.
pub fn run_evaluation(
    config: &ExperimentConfig,
    eval_set: &[EvalClip],
    out_dir: Option<&Path>,
) -> Result<EvaluationRun, HarnessError> {
    config.validate()?;
    let mut ids = HashSet::new();
    for clip in eval_set {
        if !ids.insert(file_stem(&clip.clip_id)) {
            return Err(HarnessError::Config(format!("duplicate evaluation clip `{}`", clip.clip_id)));
        }
    }
    let separators = config
        .separators
        .iter()
        .map(|s| Ok((s.name.clone(), Separator::new(s.spec.clone())?)))
        .collect::<Result<Vec<_>, SeparationError>>()?;

    let estimate_dir = |name: &str| -> Result<Option<PathBuf>, HarnessError> {
        match out_dir {
            Some(dir) => {
                let d = dir.join("estimates").join(file_stem(name));
                fs::create_dir_all(&d).map_err(io_err(&d))?;
                Ok(Some(d))
            }
            None => Ok(None),
        }
    };

    let mut systems = Vec::new();
    let mut estimates: BTreeMap<&str, Vec<Option<Waveform>>> = BTreeMap::new();
    for (name, separator) in &separators {
        let dir = estimate_dir(name)?;
        let scored: Vec<(ClipResult, Option<Waveform>)> = eval_set
            .par_iter()
            .map(|clip| {
                let estimate = run_separator(separator, clip).map_err(|e| e.to_string());
                if let Err(message) = &estimate {
                    warn!(separator = %name, clip_id = %clip.clip_id, error = %message, "separation failed");
                }
                score(clip, estimate, dir.as_deref(), config.epsilon)
            })
            .collect();
        let (clips, waves): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
        estimates.insert(name.as_str(), waves);
        systems.push(SystemResult::from_clips(name.clone(), SystemKind::Separator, clips, config.clamp_db)?);
    }

    for ens in &config.ensembles {
        let weights = ens.weights()?;
        let dir = estimate_dir(&ens.name)?;
        let scored: Vec<ClipResult> = eval_set
            .par_iter()
            .enumerate()
            .map(|(i, clip)| {
                let members: Result<Vec<Waveform>, String> = ens
                    .members
                    .iter()
                    .map(|m| {
                        estimates[m.as_str()][i]
                            .clone()
                            .ok_or_else(|| format!("member `{m}` has no estimate"))
                    })
                    .collect();
                let estimate = members.and_then(|ms| separation::ensemble(&ms, &weights).map_err(|e| e.to_string()));
                score(clip, estimate, dir.as_deref(), config.epsilon).0
            })
            .collect();
        systems.push(SystemResult::from_clips(ens.name.clone(), SystemKind::Ensemble, scored, config.clamp_db)?);
    }

    if let Some(dir) = out_dir {
        for system in &systems {
            let path = dir.join("metrics").join(format!("{}.csv", file_stem(&system.name)));
            write_metrics_csv(&path, &system.clips)?;
        }
    }
    Ok(EvaluationRun {
        config_hash: config.config_hash(),
        epsilon: config.epsilon,
        clamp_db: config.clamp_db,
        systems,
    })
}

fn run_separator(separator: &Separator, clip: &EvalClip) -> Result<Waveform, HarnessError> {
    let interference;
    let oracle = if separator.spec().needs_oracle_sources() {
        interference = clip.interference()?;
        Some(OracleSources {
            target: &clip.target,
            interference: &interference,
        })
    } else {
        None
    };
    Ok(separator.separate(&clip.mixture, &clip.caption, oracle)?)
}

/// Scores precomputed estimates against references and mixtures held in
/// three directories of equally named WAV files.
pub fn evaluate_directories(
    estimates: &Path,
    references: &Path,
    mixtures: &Path,
    epsilon: f64,
) -> Result<Vec<ClipResult>, HarnessError> {
    let refs = wav_files(references)?;
    Ok(refs
        .par_iter()
        .map(|(clip_id, ref_path)| {
            let name = ref_path.file_name().expect("listed file has a name");
            let est_path = estimates.join(name);
            let scored = (|| -> Result<MetricsTriple, HarnessError> {
                let reference = signal::read_wav(ref_path)?;
                let mixture = signal::read_wav(&mixtures.join(name))?;
                let estimate = signal::read_wav(&est_path)?;
                Ok(metrics::evaluate(&estimate, &mixture, &reference, epsilon)?)
            })();
            match scored {
                Ok(m) => ClipResult {
                    clip_id: clip_id.clone(),
                    metrics: Some(m),
                    error: None,
                    estimate_path: Some(est_path),
                },
                Err(e) => ClipResult {
                    clip_id: clip_id.clone(),
                    metrics: None,
                    error: Some(e.to_string()),
                    estimate_path: None,
                },
            }
        })
        .collect())
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Per-clip CSV with columns `clip_id,sdr,sdri,si_sdr`. Failed clips keep
/// their row with empty metric cells.
pub fn metrics_csv(clips: &[ClipResult]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["clip_id", "sdr", "sdri", "si_sdr"])?;
    for c in clips {
        match &c.metrics {
            Some(m) => w.write_record([
                c.clip_id.clone(),
                fmt_db(m.sdr_db),
                fmt_db(m.sdri_db),
                fmt_db(m.si_sdr_db),
            ])?,
            None => w.write_record([c.clip_id.as_str(), "", "", ""])?,
        }
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics_csv(path: &Path, clips: &[ClipResult]) -> Result<(), HarnessError> {
    create_parent(path)?;
    fs::write(path, metrics_csv(clips)?).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub training_dataset: String,
    /// Rendered as a check mark, a cross, or `-` when not applicable.
    #[serde(default)]
    pub caption_augmentation: Option<bool>,
    #[serde(flatten)]
    pub metrics: MetricsTriple,
}

impl ReportRow {
    pub fn new(
        model: impl Into<String>,
        training_dataset: impl Into<String>,
        caption_augmentation: Option<bool>,
        metrics: MetricsTriple,
    ) -> Self {
        ReportRow {
            model: model.into(),
            training_dataset: training_dataset.into(),
            caption_augmentation,
            metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub title: String,
    pub config_hash: Option<String>,
    pub epsilon: Option<f64>,
    pub clamp_db: Option<f64>,
}

impl Default for ReportMeta {
    fn default() -> Self {
        ReportMeta {
            title: "Separation results".into(),
            config_hash: None,
            epsilon: None,
            clamp_db: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(HarnessError::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Markdown => "markdown",
            ReportFormat::Csv => "csv",
        })
    }
}

pub const REPORT_COLUMNS: [&str; 6] = ["Model", "Training dataset", "Caption Augmentation", "SDR", "SDRi", "SI-SDR"];

fn augmentation_mark(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "\u{2713}",
        Some(false) => "\u{2717}",
        None => "-",
    }
}

fn row_cells(row: &ReportRow) -> [String; 6] {
    [
        row.model.clone(),
        row.training_dataset.clone(),
        augmentation_mark(row.caption_augmentation).to_string(),
        format!("{:.3}", row.metrics.sdr_db),
        format!("{:.3}", row.metrics.sdri_db),
        format!("{:.3}", row.metrics.si_sdr_db),
    ]
}

/// Renders rows in the given order. Markdown output is a fixed-width text
/// table (columns separated by a single space) under a short metadata
/// header; CSV output is the bare table.
pub fn render_report(rows: &[ReportRow], format: ReportFormat, meta: &ReportMeta) -> Result<String, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let cells: Vec<[String; 6]> = rows.iter().map(row_cells).collect();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS)?;
            for c in &cells {
                w.write_record(c)?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => {
            let mut widths = REPORT_COLUMNS.map(|h| h.chars().count());
            for c in &cells {
                for (w, cell) in widths.iter_mut().zip(c) {
                    *w = (*w).max(cell.chars().count());
                }
            }
            let line = |cells: &[&str]| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(widths)
                    .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                    .collect();
                padded.join(" ").trim_end().to_string()
            };

            let mut out = format!("# {}\n\n", meta.title);
            let mut bullets = Vec::new();
            if let Some(hash) = &meta.config_hash {
                bullets.push(format!("- config hash: `{hash}`"));
            }
            if let Some(eps) = meta.epsilon {
                bullets.push(format!("- epsilon: {eps:e}"));
            }
            if let Some(clamp) = meta.clamp_db {
                bullets.push(format!("- per-clip clamp: \u{b1}{clamp} dB"));
            }
            if !bullets.is_empty() {
                out.push_str(&bullets.join("\n"));
                out.push_str("\n\n");
            }
            out.push_str("```text\n");
            out.push_str(&line(&REPORT_COLUMNS));
            out.push('\n');
            for c in &cells {
                let refs: Vec<&str> = c.iter().map(String::as_str).collect();
                out.push_str(&line(&refs));
                out.push('\n');
            }
            out.push_str("```\n");
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceDataset;

    fn manifest(n: usize) -> Manifest {
        let entries = (0..n)
            .map(|i| {
                ClipEntry::new(
                    format!("clip{i:02}"),
                    SourceDataset::Synthetic,
                    vec![format!("A dog barks near a road number {i}"), format!("Rain falls on a tin roof {i}")],
                )
            })
            .collect();
        Manifest::new(Default::default(), entries).unwrap()
    }

    fn mock_gateway(profile: MockProfile) -> LlmGateway {
        LlmGateway::mock(LlmConfig::default(), MockBackend::new(0).with_profile(profile)).unwrap()
    }

    fn settings() -> AugmentSettings {
        AugmentSettings {
            template: prompt::builtin_template(PromptKind::ModifiedWavCaps).unwrap(),
            rules: FilterRules::default(),
            seed: 0,
            checkpoint: None,
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!(c.epsilon, HARNESS_EPSILON);
        assert_eq!(c.clamp_db, DEFAULT_CLAMP_DB);
        assert_eq!(c.prompt.kind, PromptKind::ModifiedWavCaps);

        let dup = r#"{"separators":[{"name":"a","spec":{"kind":"identity"}},{"name":"a","spec":{"kind":"identity"}}]}"#;
        assert!(matches!(ExperimentConfig::from_json_str(dup), Err(HarnessError::Config(_))));

        let missing = r#"{"separators":[{"name":"a","spec":{"kind":"identity"}}],
            "ensembles":[{"name":"e","members":["a","b"]}]}"#;
        assert!(matches!(ExperimentConfig::from_json_str(missing), Err(HarnessError::Config(_))));

        let weights = r#"{"separators":[{"name":"a","spec":{"kind":"identity"}}],
            "ensembles":[{"name":"e","members":["a"],"weights":[1,2]}]}"#;
        assert!(matches!(ExperimentConfig::from_json_str(weights), Err(HarnessError::Config(_))));

        assert!(ExperimentConfig::from_json_str(r#"{"bogus":1}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"prompt":{"kind":"custom"}}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"epsilon":-1}"#).is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn llm_choice_json() {
        let c = ExperimentConfig::from_json_str(r#"{"llm":{"backend":"http","model_id":"phi-2","temperature":0.2}}"#).unwrap();
        match c.llm {
            LlmChoice::Http(cfg) => {
                assert_eq!(cfg.temperature, 0.2);
                assert_eq!(cfg.max_retries, LlmConfig::default().max_retries);
            }
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig::from_json_str(r#"{"llm":{"backend":"mock","profile":"always_failure"}}"#).unwrap();
        assert!(matches!(c.llm, LlmChoice::Mock { profile: MockProfile::AlwaysFailure, .. }));
    }

    #[test]
    fn augmentation_is_deterministic_and_conserving() {
        let gw = mock_gateway(MockProfile::Mixed);
        let (a, sa) = augment_manifest(manifest(12), &gw, &settings()).unwrap();
        let (b, sb) = augment_manifest(manifest(12), &gw, &settings()).unwrap();
        assert_eq!(a.to_canonical_string(), b.to_canonical_string());
        assert_eq!(sa, sb);
        assert_eq!(sa.clips.len(), 12);
        for c in &sa.clips {
            assert!(c.is_conserved(), "{c:?}");
            assert!(c.accepted <= 4);
            assert!(c.attached <= c.accepted);
        }
        for e in a.entries() {
            assert!(is_done(e));
        }
        assert_eq!(a.metadata.prompt_kind, Some(PromptKind::ModifiedWavCaps));
    }

    #[test]
    fn rerun_skips_completed_clips() {
        let gw = mock_gateway(MockProfile::Mixed);
        let (a, _) = augment_manifest(manifest(5), &gw, &settings()).unwrap();
        let (b, stats) = augment_manifest(a.clone(), &gw, &settings()).unwrap();
        assert_eq!(a, b);
        assert!(stats.clips.is_empty());
        assert_eq!(stats.skipped.len(), 5);
    }

    #[test]
    fn empty_manifest() {
        let gw = mock_gateway(MockProfile::Mixed);
        let (m, stats) = augment_manifest(Manifest::empty(), &gw, &settings()).unwrap();
        assert!(m.is_empty());
        assert_eq!(stats.clips.len(), 0);
    }

    #[test]
    fn all_failure_mock() {
        let gw = mock_gateway(MockProfile::AlwaysFailure);
        let (m, stats) = augment_manifest(manifest(6), &gw, &settings()).unwrap();
        assert_eq!(stats.accepted(), 0);
        let hist = stats.reject_histogram();
        assert_eq!(hist.keys().collect::<Vec<_>>(), vec![&RejectReason::Failure]);
        assert_eq!(hist[&RejectReason::Failure], 24);
        assert!(m.entries().iter().all(|e| e.augmented_captions.is_empty()));
    }

    #[test]
    fn gateway_failures_abort_the_run() {
        let gw = mock_gateway(MockProfile::Empty);
        match augment_manifest(manifest(4), &gw, &settings()) {
            Err(HarnessError::TooManyFailures { failed, total, partial }) => {
                assert!(failed * 2 > total);
                for c in &partial.1.clips {
                    assert!(c.is_conserved());
                    assert_eq!(c.gateway_failures, 4);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_replay_matches_direct_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.jsonl");
        let gw = mock_gateway(MockProfile::Mixed);
        let mut s = settings();
        s.checkpoint = Some(path.clone());
        let (direct, _) = augment_manifest(manifest(6), &gw, &s).unwrap();

        let mut replayed = manifest(6);
        assert_eq!(apply_checkpoint(&mut replayed, &path).unwrap(), 6);
        replayed.metadata = direct.metadata.clone();
        assert_eq!(replayed, direct);
        assert_eq!(apply_checkpoint(&mut replayed, &dir.path().join("none")).unwrap(), 0);
    }

    #[test]
    fn seed_caption_choice_is_seeded() {
        let a: Vec<usize> = (0..50).map(|i| seed_caption_index(0, &format!("c{i}"), 5)).collect();
        let b: Vec<usize> = (0..50).map(|i| seed_caption_index(0, &format!("c{i}"), 5)).collect();
        let c: Vec<usize> = (0..50).map(|i| seed_caption_index(1, &format!("c{i}"), 5)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&i| i < 5));
    }

    fn eval_config(separators: &[(&str, SeparatorSpec)], ensembles: Vec<EnsembleDef>) -> ExperimentConfig {
        ExperimentConfig {
            separators: separators
                .iter()
                .map(|(n, s)| NamedSeparator { name: n.to_string(), spec: s.clone() })
                .collect(),
            ensembles,
            ..Default::default()
        }
    }

    fn small_set() -> Vec<EvalClip> {
        let spec = SyntheticEvalSpec {
            clips: 3,
            duration_secs: 0.5,
            ..Default::default()
        };
        synthetic_eval_set(&spec, &SnrRange::default()).unwrap()
    }

    #[test]
    fn identity_ensemble_matches_identity() {
        let config = eval_config(
            &[("id", SeparatorSpec::Identity), ("id2", SeparatorSpec::Identity)],
            vec![EnsembleDef { name: "both".into(), members: vec!["id".into(), "id2".into()], weights: None }],
        );
        let run = run_evaluation(&config, &small_set(), None).unwrap();
        let id = run.system("id").unwrap().aggregate.unwrap();
        let both = run.system("both").unwrap().aggregate.unwrap();
        assert_eq!(id, both);
        assert_eq!(id.sdri_db, 0.0);
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        let config = eval_config(
            &[("id", SeparatorSpec::Identity), ("bad", SeparatorSpec::external("/nonexistent/capaug-sep {MIXTURE} {CAPTION} {OUT}"))],
            vec![EnsembleDef { name: "e".into(), members: vec!["id".into(), "bad".into()], weights: None }],
        );
        let run = run_evaluation(&config, &small_set(), None).unwrap();
        assert_eq!(run.system("id").unwrap().failed, 0);
        let bad = run.system("bad").unwrap();
        assert_eq!(bad.failed, 3);
        assert!(bad.aggregate.is_none());
        assert_eq!(run.system("e").unwrap().failed, 3);
        assert!(run.has_failures());
        assert_eq!(run.report_rows().len(), 1);
    }

    #[test]
    fn evaluation_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = eval_config(
            &[("id", SeparatorSpec::Identity), ("irm", SeparatorSpec::oracle_irm())],
            vec![EnsembleDef { name: "mix".into(), members: vec!["id".into(), "irm".into()], weights: Some(vec![1.0, 3.0]) }],
        );
        let set = small_set();
        let run = run_evaluation(&config, &set, Some(dir.path())).unwrap();
        for system in &run.systems {
            let csv = fs::read_to_string(dir.path().join("metrics").join(format!("{}.csv", system.name))).unwrap();
            assert_eq!(csv.lines().count(), set.len() + 1);
            assert!(csv.starts_with("clip_id,sdr,sdri,si_sdr\n"));
            for clip in &system.clips {
                let path = clip.estimate_path.as_ref().unwrap();
                assert!(path.exists());
            }
        }
        let again = run_evaluation(&config, &set, None).unwrap();
        for (a, b) in run.systems.iter().zip(&again.systems) {
            assert_eq!(a.aggregate, b.aggregate);
        }
    }

    #[test]
    fn derived_interference() {
        let clip = &small_set()[0];
        let mut c = clip.clone();
        c.interference = None;
        let derived = c.interference().unwrap();
        let truth = clip.interference.as_ref().unwrap();
        for (a, b) in derived.samples().iter().zip(truth.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_csv_format() {
        let clips = vec![
            ClipResult {
                clip_id: "a".into(),
                metrics: Some(MetricsTriple::new(1.5, f64::INFINITY, -2.0)),
                error: None,
                estimate_path: None,
            },
            ClipResult { clip_id: "b".into(), metrics: None, error: Some("x".into()), estimate_path: None },
        ];
        assert_eq!(
            metrics_csv(&clips).unwrap(),
            "clip_id,sdr,sdri,si_sdr\na,1.500000,inf,-2.000000\nb,,,\n"
        );
    }

    #[test]
    fn report_zero_row() {
        let rows = [ReportRow::new("Identity", "-", None, MetricsTriple::zero())];
        let md = render_report(&rows, ReportFormat::Markdown, &ReportMeta::default()).unwrap();
        assert!(md.contains("0.000 0.000 0.000"), "{md}");
        let csv = render_report(&rows, ReportFormat::Csv, &ReportMeta::default()).unwrap();
        assert_eq!(csv, "Model,Training dataset,Caption Augmentation,SDR,SDRi,SI-SDR\nIdentity,-,-,0.000,0.000,0.000\n");
        assert!(matches!(render_report(&[], ReportFormat::Csv, &ReportMeta::default()), Err(HarnessError::EmptyReport)));
    }

    #[test]
    fn report_keeps_row_order_and_marks() {
        let rows = [
            ReportRow::new("b", "x", Some(true), MetricsTriple::new(1.0, 2.0, 3.0)),
            ReportRow::new("a", "y", Some(false), MetricsTriple::new(-1.0, 0.5, 12.25)),
        ];
        let md = render_report(&rows, ReportFormat::Markdown, &ReportMeta::default()).unwrap();
        let b = md.find("\nb ").unwrap();
        let a = md.find("\na ").unwrap();
        assert!(b < a);
        assert!(md.contains('\u{2713}') && md.contains('\u{2717}'));
        assert!(md.contains("-1.000 0.500 12.250"));
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert!("pdf".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn report_row_json() {
        let row: ReportRow = serde_json::from_str(
            r#"{"model":"m","training_dataset":"d","caption_augmentation":true,"sdr_db":1,"sdri_db":2,"si_sdr_db":3}"#,
        )
        .unwrap();
        assert_eq!(row.metrics, MetricsTriple::new(1.0, 2.0, 3.0));
    }
}
