//! Caption augmentation and separation evaluation for language-queried
//! audio source separation (LASS).
//!
//! The crate is split along the data flow of an experiment:
//!
//! - [`prompt`] renders LLM instructions from a source caption.
//! - [`llm`] sends them to a completion endpoint, or to a deterministic mock.
//! - [`filter`] parses numbered responses and rejects unusable captions.
//! - [`corpus`] ingests dataset metadata into a canonical manifest.
//! - [`signal`] handles WAV I/O, mixture synthesis and the STFT.
//! - [`metrics`] computes SDR, SDRi and SI-SDR.
//! - [`separation`] provides separators and weighted-sum ensembling.
//! - [`harness`] ties everything into reproducible runs and reports.

pub mod corpus;
pub mod filter;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod prompt;
pub mod separation;
pub mod signal;

pub(crate) mod util;

pub use corpus::{ClipEntry, Manifest, SourceDataset};
pub use filter::{FilterReport, FilterRules, RejectReason};
pub use llm::{LlmConfig, LlmGateway, RawResponse};
pub use metrics::MetricsTriple;
pub use prompt::{PromptKind, PromptTemplate};
pub use separation::{EnsembleWeights, SeparatorSpec};
pub use signal::{StftParams, Waveform};


