//! Clip manifests: ingestion of Clotho, FSD50K and WavCaps metadata,
//! storage of augmented captions and per-dataset statistics.
//!
//! A manifest is serialized as one canonical JSON document: metadata
//! first, entries sorted by `clip_id`, two-space indentation, LF line
//! endings and a trailing newline. Writing a manifest that was just read
//! reproduces the input byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::normalize;
use crate::prompt::PromptKind;
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: empty caption in column `{column}`")]
    EmptyCaption { row: usize, column: String },
    #[error("row {row}: empty labels")]
    EmptyLabels { row: usize },
    #[error("row {row}: empty clip id")]
    EmptyId { row: usize },
    #[error("duplicate clip id `{0}`")]
    DuplicateClip(String),
    #[error("FreeSound-derived clips are excluded from the training data")]
    FreeSoundExcluded,
    #[error("unknown WavCaps subset `{0}` (expected bbc, soundbible, audioset)")]
    UnknownSubset(String),
    #[error("unknown clip id `{0}`")]
    UnknownClip(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("invalid entry `{clip_id}`: {reason}")]
    InvalidEntry { clip_id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceDataset {
    #[serde(rename = "fsd50k")]
    Fsd50k,
    #[serde(rename = "clotho_v2")]
    ClothoV2,
    #[serde(rename = "wavcaps_bbc")]
    WavCapsBbc,
    #[serde(rename = "wavcaps_soundbible")]
    WavCapsSoundBible,
    #[serde(rename = "wavcaps_audioset")]
    WavCapsAudioSet,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl SourceDataset {
    pub const ALL: [SourceDataset; 6] = [
        SourceDataset::Fsd50k,
        SourceDataset::ClothoV2,
        SourceDataset::WavCapsBbc,
        SourceDataset::WavCapsSoundBible,
        SourceDataset::WavCapsAudioSet,
        SourceDataset::Synthetic,
    ];

    pub fn category(self) -> &'static str {
        match self {
            SourceDataset::Fsd50k | SourceDataset::ClothoV2 => "Baseline Dev Set",
            SourceDataset::WavCapsBbc
            | SourceDataset::WavCapsSoundBible
            | SourceDataset::WavCapsAudioSet => "WavCaps",
            SourceDataset::Synthetic => "Synthetic",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SourceDataset::Fsd50k => "FSD 50k",
            SourceDataset::ClothoV2 => "Clotho",
            SourceDataset::WavCapsBbc => "BBC sound",
            SourceDataset::WavCapsSoundBible => "Soundbible",
            SourceDataset::WavCapsAudioSet => "AudioSet",
            SourceDataset::Synthetic => "Synthetic",
        }
    }
}

impl fmt::Display for SourceDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavCapsSubset {
    Bbc,
    SoundBible,
    AudioSet,
    FreeSound,
}

impl WavCapsSubset {
    fn dataset(self) -> Result<SourceDataset, CorpusError> {
        match self {
            WavCapsSubset::Bbc => Ok(SourceDataset::WavCapsBbc),
            WavCapsSubset::SoundBible => Ok(SourceDataset::WavCapsSoundBible),
            WavCapsSubset::AudioSet => Ok(SourceDataset::WavCapsAudioSet),
            WavCapsSubset::FreeSound => Err(CorpusError::FreeSoundExcluded),
        }
    }
}

impl FromStr for WavCapsSubset {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "bbc" | "bbcsound" | "bbcsoundeffects" => Ok(WavCapsSubset::Bbc),
            "soundbible" => Ok(WavCapsSubset::SoundBible),
            "audioset" | "audiosetsl" => Ok(WavCapsSubset::AudioSet),
            "freesound" => Ok(WavCapsSubset::FreeSound),
            _ => Err(CorpusError::UnknownSubset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationStatus {
    Done,
    Failed,
}

/// Per-clip log of the augmentation step. Its presence with status
/// `Done` marks the clip as finished for resumed runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub seed_caption_index: usize,
    pub status: AugmentationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    pub source_dataset: SourceDataset,
    pub original_captions: Vec<String>,
    #[serde(default)]
    pub augmented_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationRecord>,
}

impl ClipEntry {
    pub fn new(
        clip_id: impl Into<String>,
        source_dataset: SourceDataset,
        original_captions: Vec<String>,
    ) -> Self {
        ClipEntry {
            clip_id: clip_id.into(),
            audio_path: None,
            source_dataset,
            original_captions,
            augmented_captions: Vec::new(),
            augmentation: None,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidEntry {
            clip_id: self.clip_id.clone(),
            reason: reason.to_string(),
        };
        if self.clip_id.is_empty() {
            return Err(invalid("empty clip id"));
        }
        if self.original_captions.is_empty() {
            return Err(invalid("no original captions"));
        }
        let mut keys = HashSet::new();
        for caption in &self.augmented_captions {
            if !keys.insert(normalize(caption)) {
                return Err(invalid("duplicate augmented caption"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_kind: Option<PromptKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ManifestMetadata {
    fn default() -> Self {
        ManifestMetadata {
            created_at: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            prompt_kind: None,
            seed: None,
        }
    }
}

impl ManifestMetadata {
    pub fn now() -> Self {
        ManifestMetadata {
            created_at: Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub metadata: ManifestMetadata,
    entries: Vec<ClipEntry>,
}

#[derive(Deserialize)]
struct RawManifest {
    metadata: ManifestMetadata,
    entries: Vec<ClipEntry>,
}

impl<'de> Deserialize<'de> for Manifest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawManifest::deserialize(d)?;
        Manifest::new(raw.metadata, raw.entries).map_err(serde::de::Error::custom)
    }
}

/// Outcome of attaching augmented captions to one clip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachOutcome {
    pub added: usize,
    pub skipped_duplicates: usize,
}

impl Manifest {
    /// Builds a manifest, sorting entries by clip id and checking the
    /// entry invariants.
    pub fn new(metadata: ManifestMetadata, mut entries: Vec<ClipEntry>) -> Result<Self, CorpusError> {
        entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        for pair in entries.windows(2) {
            if pair[0].clip_id == pair[1].clip_id {
                return Err(CorpusError::DuplicateClip(pair[0].clip_id.clone()));
            }
        }
        for e in &entries {
            e.validate()?;
        }
        Ok(Manifest { metadata, entries })
    }

    pub fn empty() -> Self {
        Manifest {
            metadata: ManifestMetadata::default(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[ClipEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ClipEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn position(&self, clip_id: &str) -> Option<usize> {
        self.entries
            .binary_search_by(|e| e.clip_id.as_str().cmp(clip_id))
            .ok()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipEntry> {
        self.position(clip_id).map(|i| &self.entries[i])
    }

    pub(crate) fn get_mut(&mut self, clip_id: &str) -> Option<&mut ClipEntry> {
        self.position(clip_id).map(move |i| &mut self.entries[i])
    }

    /// Adds the entries of `other`; clip ids must not collide.
    pub fn merge(self, other: Manifest) -> Result<Manifest, CorpusError> {
        let mut entries = self.entries;
        entries.extend(other.entries);
        Manifest::new(self.metadata, entries)
    }

    /// Appends captions to one clip, skipping any whose normalized form
    /// matches an original or an already present augmented caption.
    pub fn attach_augmentations(
        &mut self,
        clip_id: &str,
        captions: &[String],
    ) -> Result<AttachOutcome, CorpusError> {
        let entry = self
            .get_mut(clip_id)
            .ok_or_else(|| CorpusError::UnknownClip(clip_id.to_string()))?;
        let mut keys: HashSet<String> = entry
            .original_captions
            .iter()
            .chain(&entry.augmented_captions)
            .map(|c| normalize(c))
            .collect();
        let mut outcome = AttachOutcome::default();
        for caption in captions {
            let key = normalize(caption);
            if key.is_empty() || !keys.insert(key) {
                outcome.skipped_duplicates += 1;
            } else {
                entry.augmented_captions.push(caption.clone());
                outcome.added += 1;
            }
        }
        Ok(outcome)
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.to_canonical_string()).map_err(io_err(path))
    }
}

/// Value-style wrapper around [`Manifest::attach_augmentations`].
pub fn attach_augmentations(
    mut manifest: Manifest,
    clip_id: &str,
    captions: &[String],
) -> Result<(Manifest, AttachOutcome), CorpusError> {
    let outcome = manifest.attach_augmentations(clip_id, captions)?;
    Ok((manifest, outcome))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CorpusError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
}

fn audio_path_for(audio_dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    audio_dir.map(|dir| {
        if Path::new(name).extension().is_some() {
            dir.join(name)
        } else {
            dir.join(format!("{name}.wav"))
        }
    })
}

fn check_unique(entries: &[ClipEntry]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.clip_id.as_str()) {
            return Err(CorpusError::DuplicateClip(e.clip_id.clone()));
        }
    }
    Ok(())
}

const CLOTHO_CAPTIONS: usize = 5;

pub fn ingest_clotho_reader<R: Read>(
    reader: R,
    audio_dir: Option<&Path>,
) -> Result<Vec<ClipEntry>, CorpusError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv.headers()?.clone();
    let name_col = column(&headers, "file_name")?;
    let caption_cols = (1..=CLOTHO_CAPTIONS)
        .map(|i| column(&headers, &format!("caption_{i}")).map(|c| (i, c)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut entries = Vec::new();
    for (idx, record) in csv.records().enumerate() {
        let record = record?;
        let row = idx + 2;
        let name = record.get(name_col).unwrap_or("").trim();
        if name.is_empty() {
            return Err(CorpusError::EmptyId { row });
        }
        let mut captions = Vec::with_capacity(CLOTHO_CAPTIONS);
        for &(i, col) in &caption_cols {
            let caption = record.get(col).unwrap_or("").trim();
            if caption.is_empty() {
                return Err(CorpusError::EmptyCaption {
                    row,
                    column: format!("caption_{i}"),
                });
            }
            captions.push(caption.to_string());
        }
        let mut entry = ClipEntry::new(name, SourceDataset::ClothoV2, captions);
        entry.audio_path = audio_path_for(audio_dir, name);
        entries.push(entry);
    }
    check_unique(&entries)?;
    Ok(entries)
}

/// Reads a Clotho captions CSV (`file_name, caption_1..caption_5`).
pub fn ingest_clotho(csv_path: &Path, audio_dir: Option<&Path>) -> Result<Vec<ClipEntry>, CorpusError> {
    let file = fs::File::open(csv_path).map_err(io_err(csv_path))?;
    ingest_clotho_reader(file, audio_dir)
}

pub fn ingest_fsd50k_reader<R: Read>(
    reader: R,
    audio_dir: Option<&Path>,
) -> Result<Vec<ClipEntry>, CorpusError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv.headers()?.clone();
    let name_col = column(&headers, "fname")?;
    let labels_col = column(&headers, "labels")?;

    let mut entries = Vec::new();
    for (idx, record) in csv.records().enumerate() {
        let record = record?;
        let row = idx + 2;
        let name = record.get(name_col).unwrap_or("").trim();
        if name.is_empty() {
            return Err(CorpusError::EmptyId { row });
        }
        let labels: Vec<&str> = record
            .get(labels_col)
            .unwrap_or("")
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        if labels.is_empty() {
            return Err(CorpusError::EmptyLabels { row });
        }
        let mut entry = ClipEntry::new(name, SourceDataset::Fsd50k, vec![labels.join(", ")]);
        entry.audio_path = audio_path_for(audio_dir, name);
        entries.push(entry);
    }
    check_unique(&entries)?;
    Ok(entries)
}

/// Reads an FSD50K ground-truth CSV (`fname, labels`). The label list,
/// joined with ", ", becomes the clip's single caption.
pub fn ingest_fsd50k(labels_csv_path: &Path, audio_dir: Option<&Path>) -> Result<Vec<ClipEntry>, CorpusError> {
    let file = fs::File::open(labels_csv_path).map_err(io_err(labels_csv_path))?;
    ingest_fsd50k_reader(file, audio_dir)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WavCapsDocument {
    Bare(Vec<WavCapsItem>),
    Wrapped { data: Vec<WavCapsItem> },
}

#[derive(Deserialize)]
struct WavCapsItem {
    id: serde_json::Value,
    caption: String,
}

pub fn ingest_wavcaps_str(
    json: &str,
    subset: WavCapsSubset,
    audio_dir: Option<&Path>,
) -> Result<Vec<ClipEntry>, CorpusError> {
    let dataset = subset.dataset()?;
    let items = match serde_json::from_str::<WavCapsDocument>(json)? {
        WavCapsDocument::Bare(items) | WavCapsDocument::Wrapped { data: items } => items,
    };
    let mut entries = Vec::with_capacity(items.len());
    for (row, item) in items.into_iter().enumerate() {
        let id = match item.id {
            serde_json::Value::String(s) => s.trim().to_string(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => String::new(),
        };
        if id.is_empty() {
            return Err(CorpusError::EmptyId { row });
        }
        let caption = item.caption.trim();
        if caption.is_empty() {
            return Err(CorpusError::EmptyCaption {
                row,
                column: "caption".into(),
            });
        }
        let mut entry = ClipEntry::new(id.clone(), dataset, vec![caption.to_string()]);
        entry.audio_path = audio_path_for(audio_dir, &id);
        entries.push(entry);
    }
    check_unique(&entries)?;
    Ok(entries)
}

/// Reads a WavCaps JSON file: either an array of `{id, caption}` or the
/// released `{"data": [...]}` wrapper. FreeSound is refused.
pub fn ingest_wavcaps(
    json_path: &Path,
    subset: WavCapsSubset,
    audio_dir: Option<&Path>,
) -> Result<Vec<ClipEntry>, CorpusError> {
    // refuse before touching the file
    subset.dataset()?;
    let text = fs::read_to_string(json_path).map_err(io_err(json_path))?;
    ingest_wavcaps_str(&text, subset, audio_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    /// `None` for the total row.
    pub dataset: Option<SourceDataset>,
    pub num_clips: usize,
    pub num_original_captions: usize,
    pub num_augmented_captions: usize,
}

/// Per-dataset counts in a fixed dataset order, followed by a total row.
pub fn summarize(manifest: &Manifest) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for dataset in SourceDataset::ALL {
        let mut row = SummaryRow {
            dataset: Some(dataset),
            num_clips: 0,
            num_original_captions: 0,
            num_augmented_captions: 0,
        };
        for e in manifest.entries.iter().filter(|e| e.source_dataset == dataset) {
            row.num_clips += 1;
            row.num_original_captions += e.original_captions.len();
            row.num_augmented_captions += e.augmented_captions.len();
        }
        if row.num_clips > 0 {
            rows.push(row);
        }
    }
    let total = rows.iter().fold(
        SummaryRow {
            dataset: None,
            num_clips: 0,
            num_original_captions: 0,
            num_augmented_captions: 0,
        },
        |mut acc, r| {
            acc.num_clips += r.num_clips;
            acc.num_original_captions += r.num_original_captions;
            acc.num_augmented_captions += r.num_augmented_captions;
            acc
        },
    );
    rows.push(total);
    rows
}

pub fn render_summary_markdown(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "| Category | Dataset | Num. clips | Num. captions | Num. augmented captions |\n\
         |---|---|---:|---:|---:|\n",
    );
    for r in rows {
        let (category, name) = match r.dataset {
            Some(d) => (d.category(), d.label()),
            None => ("Total", ""),
        };
        out.push_str(&format!(
            "| {category} | {name} | {} | {} | {} |\n",
            r.num_clips, r.num_original_captions, r.num_augmented_captions
        ));
    }
    out
}

pub fn render_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("category,dataset,num_clips,num_captions,num_augmented_captions\n");
    for r in rows {
        let (category, name) = match r.dataset {
            Some(d) => (d.category(), d.label()),
            None => ("Total", ""),
        };
        out.push_str(&format!(
            "{category},{name},{},{},{}\n",
            r.num_clips, r.num_original_captions, r.num_augmented_captions
        ));
    }
    out
}

/// Draws (clip, caption) pairs: a clip uniformly, then one of its
/// captions uniformly. Deterministic for a fixed seed.
pub struct TrainingSampler<'a> {
    manifest: &'a Manifest,
    include_augmented: bool,
    rng: ChaCha8Rng,
}

impl<'a> TrainingSampler<'a> {
    pub fn new(manifest: &'a Manifest, include_augmented: bool, seed: u64) -> Result<Self, CorpusError> {
        if manifest.is_empty() {
            return Err(CorpusError::EmptyManifest);
        }
        Ok(TrainingSampler {
            manifest,
            include_augmented,
            rng: seeded_rng(&[b"capaug-training-sampler", &seed.to_le_bytes()]),
        })
    }

    pub fn next_pair(&mut self) -> (&'a str, &'a str) {
        let entries = self.manifest.entries();
        let entry = &entries[self.rng.gen_range(0..entries.len())];
        let originals = entry.original_captions.len();
        let pool = if self.include_augmented {
            originals + entry.augmented_captions.len()
        } else {
            originals
        };
        let i = self.rng.gen_range(0..pool);
        let caption = if i < originals {
            &entry.original_captions[i]
        } else {
            &entry.augmented_captions[i - originals]
        };
        (entry.clip_id.as_str(), caption.as_str())
    }
}

pub fn sample_training_pair(
    manifest: &Manifest,
    include_augmented: bool,
    seed: u64,
) -> Result<(String, String), CorpusError> {
    let mut sampler = TrainingSampler::new(manifest, include_augmented, seed)?;
    let (clip, caption) = sampler.next_pair();
    Ok((clip.to_string(), caption.to_string()))
}
