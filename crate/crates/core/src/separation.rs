//! Separators and weighted-sum ensembling.
//!
//! Three separator kinds are supported:
//!
//! - `identity` returns the mixture untouched (the "do nothing" floor).
//! - `oracle_irm` applies the ideal ratio mask computed from the true
//!   sources, an upper-bound reference.
//! - `external` runs any command-line separator, e.g. a trained LASS
//!   checkpoint behind a Python script, through files.
//!
//! External command templates are split into arguments with shell-style
//! quoting and then `{MIXTURE}`, `{CAPTION}` and `{OUT}` are substituted
//! inside each argument. No shell is involved, so captions never need
//! escaping. Example:
//!
//! ```text
//! python separate.py --mixture {MIXTURE} --text {CAPTION} --output {OUT}
//! ```

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::signal::{self, SignalError, StftParams, WavEncoding, Waveform};
use crate::util::Limiter;

pub const MIXTURE_PLACEHOLDER: &str = "{MIXTURE}";
pub const CAPTION_PLACEHOLDER: &str = "{CAPTION}";
pub const OUT_PLACEHOLDER: &str = "{OUT}";
pub const MASK_EPSILON: f64 = 1e-12;
pub const DEFAULT_EXTERNAL_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_MAX_PROCESSES: usize = 2;

#[derive(Debug, Error)]
pub enum SeparationError {
    #[error("oracle separator needs the true target and interference")]
    MissingOracleSources,
    #[error("command template is missing {0}")]
    MissingPlaceholder(&'static str),
    #[error("command template is not valid: {0}")]
    BadTemplate(String),
    #[error("failed to launch `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("external separator exited with {status}: {stderr}")]
    ExitStatus { status: String, stderr: String },
    #[error("external separator timed out after {0:?}")]
    Timeout(Duration),
    #[error("no estimates to ensemble")]
    NoEstimates,
    #[error("{weights} weights for {estimates} estimates")]
    WeightCount { weights: usize, estimates: usize },
    #[error("weights must be finite, non-negative and not all zero")]
    InvalidWeights,
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn default_timeout_secs() -> u64 {
    DEFAULT_EXTERNAL_TIMEOUT_SECS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeparatorSpec {
    Identity,
    OracleIrm {
        #[serde(default)]
        stft: StftParams,
    },
    External {
        command_template: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

impl SeparatorSpec {
    pub fn external(command_template: impl Into<String>) -> Self {
        SeparatorSpec::External {
            command_template: command_template.into(),
            timeout_secs: DEFAULT_EXTERNAL_TIMEOUT_SECS,
        }
    }

    pub fn oracle_irm() -> Self {
        SeparatorSpec::OracleIrm {
            stft: StftParams::default(),
        }
    }

    pub fn needs_oracle_sources(&self) -> bool {
        matches!(self, SeparatorSpec::OracleIrm { .. })
    }

    pub fn validate(&self) -> Result<(), SeparationError> {
        match self {
            SeparatorSpec::Identity => Ok(()),
            SeparatorSpec::OracleIrm { stft } => Ok(stft.validate()?),
            SeparatorSpec::External { command_template, .. } => {
                for placeholder in [MIXTURE_PLACEHOLDER, CAPTION_PLACEHOLDER, OUT_PLACEHOLDER] {
                    if !command_template.contains(placeholder) {
                        return Err(SeparationError::MissingPlaceholder(placeholder));
                    }
                }
                let args = shell_words::split(command_template)
                    .map_err(|e| SeparationError::BadTemplate(e.to_string()))?;
                if args.is_empty() {
                    return Err(SeparationError::BadTemplate("empty command".into()));
                }
                Ok(())
            }
        }
    }
}

/// Ground-truth sources aligned with a mixture.
#[derive(Debug, Clone, Copy)]
pub struct OracleSources<'a> {
    pub target: &'a Waveform,
    pub interference: &'a Waveform,
}

/// Ideal ratio mask `|S_t|^2 / (|S_t|^2 + |S_i|^2 + eps)`, frame-major.
pub fn ideal_ratio_mask(
    target: &Waveform,
    interference: &Waveform,
    params: &StftParams,
) -> Result<Vec<f64>, SeparationError> {
    target.check_aligned(interference)?;
    let st = signal::stft(target, params)?;
    let si = signal::stft(interference, params)?;
    Ok(st
        .data()
        .iter()
        .zip(si.data())
        .map(|(t, i)| {
            let pt = t.norm_sqr();
            pt / (pt + i.norm_sqr() + MASK_EPSILON)
        })
        .collect())
}

/// A configured separator. External separators share a bound on
/// concurrently running processes.
pub struct Separator {
    spec: SeparatorSpec,
    processes: Limiter,
}

impl Separator {
    pub fn new(spec: SeparatorSpec) -> Result<Self, SeparationError> {
        Self::with_process_limit(spec, DEFAULT_MAX_PROCESSES)
    }

    pub fn with_process_limit(spec: SeparatorSpec, max_processes: usize) -> Result<Self, SeparationError> {
        spec.validate()?;
        Ok(Separator {
            spec,
            processes: Limiter::new(max_processes),
        })
    }

    pub fn spec(&self) -> &SeparatorSpec {
        &self.spec
    }

    pub fn separate(
        &self,
        mixture: &Waveform,
        caption: &str,
        oracle: Option<OracleSources<'_>>,
    ) -> Result<Waveform, SeparationError> {
        match &self.spec {
            SeparatorSpec::Identity => Ok(mixture.clone()),
            SeparatorSpec::OracleIrm { stft } => {
                let oracle = oracle.ok_or(SeparationError::MissingOracleSources)?;
                mixture.check_aligned(oracle.target)?;
                let mask = ideal_ratio_mask(oracle.target, oracle.interference, stft)?;
                let spec = signal::stft(mixture, stft)?;
                Ok(signal::istft(&spec.apply_mask(&mask), stft, mixture.len(), mixture.sample_rate())?)
            }
            SeparatorSpec::External {
                command_template,
                timeout_secs,
            } => {
                let _permit = self.processes.acquire();
                run_external(
                    command_template,
                    mixture,
                    caption,
                    Duration::from_secs(*timeout_secs),
                )
            }
        }
    }
}

/// One-shot separation with a fresh [`Separator`].
pub fn separate(
    spec: &SeparatorSpec,
    mixture: &Waveform,
    caption: &str,
    oracle: Option<OracleSources<'_>>,
) -> Result<Waveform, SeparationError> {
    Separator::new(spec.clone())?.separate(mixture, caption, oracle)
}

fn expand_template(template: &str, mixture: &Path, caption: &str, out: &Path) -> Result<Vec<String>, SeparationError> {
    let args = shell_words::split(template).map_err(|e| SeparationError::BadTemplate(e.to_string()))?;
    Ok(args
        .into_iter()
        .map(|arg| {
            arg.replace(MIXTURE_PLACEHOLDER, &mixture.to_string_lossy())
                .replace(OUT_PLACEHOLDER, &out.to_string_lossy())
                .replace(CAPTION_PLACEHOLDER, caption)
        })
        .collect())
}

fn run_external(
    template: &str,
    mixture: &Waveform,
    caption: &str,
    timeout: Duration,
) -> Result<Waveform, SeparationError> {
    let workdir = tempfile::Builder::new().prefix("capaug-sep-").tempdir()?;
    let mix_path = workdir.path().join("mixture.wav");
    let out_path = workdir.path().join("estimate.wav");
    let stderr_path = workdir.path().join("stderr.log");
    signal::write_wav(&mix_path, mixture, WavEncoding::Float32)?;

    let args = expand_template(template, &mix_path, caption, &out_path)?;
    let (program, rest) = args
        .split_first()
        .ok_or_else(|| SeparationError::BadTemplate("empty command".into()))?;
    let mut child = Command::new(program)
        .args(rest)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(fs::File::create(&stderr_path)?)
        .spawn()
        .map_err(|source| SeparationError::Spawn {
            program: program.clone(),
            source,
        })?;

    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(SeparationError::Timeout(timeout));
        }
        thread::sleep(Duration::from_millis(10));
    };
    if !status.success() {
        let stderr = fs::read_to_string(&stderr_path).unwrap_or_default();
        let tail: String = stderr.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
        return Err(SeparationError::ExitStatus {
            status: status.to_string(),
            stderr: tail,
        });
    }

    let estimate = signal::read_wav(&out_path)?;
    if estimate.sample_rate() != mixture.sample_rate() {
        return Err(SignalError::RateMismatch(estimate.sample_rate(), mixture.sample_rate()).into());
    }
    if estimate.len() != mixture.len() {
        warn!(
            got = estimate.len(),
            expected = mixture.len(),
            "external estimate length differs from mixture, fitting"
        );
        return Ok(estimate.fit_to_len(mixture.len()));
    }
    Ok(estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, SeparationError> {
        if weights.is_empty()
            || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || !weights.iter().any(|w| *w > 0.0)
        {
            return Err(SeparationError::InvalidWeights);
        }
        Ok(EnsembleWeights(weights))
    }

    pub fn uniform(n: usize) -> Result<Self, SeparationError> {
        Self::new(vec![1.0; n])
    }

    pub fn raw(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.0.iter().sum();
        self.0.iter().map(|w| w / total).collect()
    }
}

/// Weighted sum of estimates with weights normalized to one.
///
/// Computed as `x_1 + sum_i w_i (x_i - x_1)`, which equals `sum_i w_i x_i`
/// and returns identical inputs unchanged bit for bit.
pub fn ensemble(estimates: &[Waveform], weights: &EnsembleWeights) -> Result<Waveform, SeparationError> {
    let (first, rest) = estimates.split_first().ok_or(SeparationError::NoEstimates)?;
    if weights.len() != estimates.len() {
        return Err(SeparationError::WeightCount {
            weights: weights.len(),
            estimates: estimates.len(),
        });
    }
    for e in rest {
        first.check_aligned(e)?;
    }
    let w = weights.normalized();
    let mut out = first.samples().to_vec();
    for (est, wi) in rest.iter().zip(&w[1..]) {
        if *wi == 0.0 {
            continue;
        }
        for ((o, x), x1) in out.iter_mut().zip(est.samples()).zip(first.samples()) {
            *o += wi * (x - x1);
        }
    }
    Ok(Waveform::new(out, first.sample_rate())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::signal::{mix, tone_burst, white_noise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wf(xs: &[f64]) -> Waveform {
        Waveform::new(xs.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let m = wf(&[0.1, -0.2, 0.3]);
        let out = separate(&SeparatorSpec::Identity, &m, "a dog barks", None).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn oracle_needs_sources() {
        let m = wf(&vec![0.1; 2048]);
        assert!(matches!(
            separate(&SeparatorSpec::oracle_irm(), &m, "x", None),
            Err(SeparationError::MissingOracleSources)
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            SeparatorSpec::external("sep {MIXTURE} {OUT}").validate(),
            Err(SeparationError::MissingPlaceholder("{CAPTION}"))
        ));
        assert!(SeparatorSpec::external("sep {MIXTURE} {CAPTION} {OUT}").validate().is_ok());
        assert!(matches!(
            SeparatorSpec::external("sep '{MIXTURE} {CAPTION} {OUT}").validate(),
            Err(SeparationError::BadTemplate(_))
        ));
        let bad = SeparatorSpec::OracleIrm {
            stft: StftParams { window_size: 1000, ..Default::default() },
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_json() {
        let spec: SeparatorSpec = serde_json::from_str(r#"{"kind":"oracle_irm"}"#).unwrap();
        assert_eq!(spec, SeparatorSpec::oracle_irm());
        let spec: SeparatorSpec =
            serde_json::from_str(r#"{"kind":"external","command_template":"x {MIXTURE} {CAPTION} {OUT}"}"#).unwrap();
        assert_eq!(spec, SeparatorSpec::external("x {MIXTURE} {CAPTION} {OUT}"));
        assert_eq!(serde_json::to_string(&SeparatorSpec::Identity).unwrap(), r#"{"kind":"identity"}"#);
    }

    #[test]
    fn template_expansion_keeps_caption_as_one_argument() {
        let args = expand_template(
            "python sep.py --in {MIXTURE} --text {CAPTION} --out={OUT}",
            Path::new("/tmp/m.wav"),
            "a dog's bark; rm -rf /",
            Path::new("/tmp/o.wav"),
        )
        .unwrap();
        assert_eq!(
            args,
            vec!["python", "sep.py", "--in", "/tmp/m.wav", "--text", "a dog's bark; rm -rf /", "--out=/tmp/o.wav"]
        );
    }

    fn tone_noise_fixture(seed: u64) -> signal::Mixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = tone_burst(440.0, 0.5, 16_000, 16_000, 2000, 2000);
        let noise = white_noise(&mut rng, 0.5, 16_000, 16_000);
        mix(&target, &noise, 0.0).unwrap()
    }

    #[test]
    fn oracle_mask_is_bounded_and_separates() {
        let m = tone_noise_fixture(1);
        let params = StftParams::default();
        let mask = ideal_ratio_mask(&m.target, &m.interference, &params).unwrap();
        assert!(mask.iter().all(|v| (0.0..=1.0).contains(v)));

        let est = separate(
            &SeparatorSpec::oracle_irm(),
            &m.mixture,
            "a tone",
            Some(OracleSources { target: &m.target, interference: &m.interference }),
        )
        .unwrap();
        let sdr = metrics::sdr(&est, &m.target, 0.0).unwrap();
        assert!(sdr >= 10.0, "oracle sdr {sdr}");
    }

    #[test]
    fn ensemble_examples() {
        let a = wf(&[1.0, 0.0]);
        let b = wf(&[0.0, 1.0]);
        let out = ensemble(&[a.clone(), b], &EnsembleWeights::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(out.samples(), &[0.5, 0.5]);

        let single = ensemble(std::slice::from_ref(&a), &EnsembleWeights::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(single, a);

        let same = vec![wf(&[0.3, -0.7, 0.11]); 3];
        let out = ensemble(&same, &EnsembleWeights::new(vec![0.2, 1.7, 3.0]).unwrap()).unwrap();
        assert_eq!(out, same[0]);
    }

    #[test]
    fn ensemble_errors() {
        let a = wf(&[1.0, 0.0]);
        assert!(matches!(ensemble(&[], &EnsembleWeights::uniform(1).unwrap()), Err(SeparationError::NoEstimates)));
        assert!(matches!(
            ensemble(std::slice::from_ref(&a), &EnsembleWeights::uniform(2).unwrap()),
            Err(SeparationError::WeightCount { weights: 2, estimates: 1 })
        ));
        assert!(matches!(EnsembleWeights::new(vec![0.0, 0.0]), Err(SeparationError::InvalidWeights)));
        assert!(matches!(EnsembleWeights::new(vec![-1.0, 2.0]), Err(SeparationError::InvalidWeights)));
        assert!(matches!(
            ensemble(&[a, wf(&[1.0])], &EnsembleWeights::uniform(2).unwrap()),
            Err(SeparationError::Signal(SignalError::LengthMismatch(2, 1)))
        ));
    }

    #[test]
    fn ensemble_ignores_weight_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ests: Vec<Waveform> = (0..4).map(|_| white_noise(&mut rng, 1.0, 16_000, 256)).collect();
        let w = vec![0.1, 0.4, 0.2, 0.3];
        let base = ensemble(&ests, &EnsembleWeights::new(w.clone()).unwrap()).unwrap();
        for c in [1e-3, 2.0, 1e3] {
            let scaled = ensemble(&ests, &EnsembleWeights::new(w.iter().map(|x| x * c).collect()).unwrap()).unwrap();
            for (a, b) in base.samples().iter().zip(scaled.samples()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // direct weighted sum agrees
        for i in 0..256 {
            let direct: f64 = ests.iter().zip(&w).map(|(e, wi)| wi * e.samples()[i]).sum();
            assert!((direct - base.samples()[i]).abs() < 1e-12);
        }
    }
}
