//! Signal-to-distortion metrics.
//!
//! SDR here is the plain energy ratio between the reference and the
//! estimation error, `10 log10((|s|^2 + eps) / (|s - s_hat|^2 + eps))`,
//! as used by the DCASE language-queried separation baseline. It is *not*
//! the projection-based BSSEval SDR and the two give different numbers.
//!
//! SI-SDR projects the estimate onto the reference first,
//! `s_t = (<s_hat, s> / <s, s>) s`, and compares `|s_t|^2` with
//! `|s_hat - s_t|^2`, which makes it insensitive to estimate gain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Waveform;

pub const DEFAULT_CLAMP_DB: f64 = 60.0;
/// Epsilon used by the evaluation harness to keep per-clip values finite.
pub const HARNESS_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("reference has zero energy")]
    ZeroEnergyReference,
    #[error("epsilon must be a finite non-negative number, got {0}")]
    InvalidEpsilon(f64),
    #[error("cannot aggregate an empty list")]
    EmptyList,
    #[error("clamp must be positive, got {0}")]
    InvalidClamp(f64),
}

fn aligned(a: &Waveform, b: &Waveform) -> Result<(), MetricsError> {
    if a.sample_rate() != b.sample_rate() {
        return Err(MetricsError::RateMismatch(a.sample_rate(), b.sample_rate()));
    }
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<(), MetricsError> {
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidEpsilon(epsilon))
    }
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else if num == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

/// SDR over raw sample slices of equal length.
pub fn sdr_slices(estimate: &[f64], reference: &[f64], epsilon: f64) -> Result<f64, MetricsError> {
    if estimate.len() != reference.len() {
        return Err(MetricsError::LengthMismatch(estimate.len(), reference.len()));
    }
    check_epsilon(epsilon)?;
    let signal: f64 = reference.iter().map(|s| s * s).sum();
    if signal == 0.0 && epsilon == 0.0 {
        return Err(MetricsError::ZeroEnergyReference);
    }
    let error: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (s - e) * (s - e))
        .sum();
    Ok(ratio_db(signal + epsilon, error + epsilon))
}

/// SI-SDR over raw sample slices. An estimate orthogonal to the
/// reference yields `-inf` when `epsilon` is zero.
pub fn si_sdr_slices(estimate: &[f64], reference: &[f64], epsilon: f64) -> Result<f64, MetricsError> {
    if estimate.len() != reference.len() {
        return Err(MetricsError::LengthMismatch(estimate.len(), reference.len()));
    }
    check_epsilon(epsilon)?;
    let ref_energy: f64 = reference.iter().map(|s| s * s).sum();
    if ref_energy == 0.0 {
        return Err(MetricsError::ZeroEnergyReference);
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, s)| e * s).sum();
    let alpha = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut residual_energy = 0.0;
    for (e, s) in estimate.iter().zip(reference) {
        let t = alpha * s;
        target_energy += t * t;
        residual_energy += (e - t) * (e - t);
    }
    Ok(ratio_db(target_energy + epsilon, residual_energy + epsilon))
}

pub fn sdr(estimate: &Waveform, reference: &Waveform, epsilon: f64) -> Result<f64, MetricsError> {
    aligned(estimate, reference)?;
    sdr_slices(estimate.samples(), reference.samples(), epsilon)
}

/// SDR of the estimate minus SDR of the unprocessed mixture.
pub fn sdri(
    estimate: &Waveform,
    mixture: &Waveform,
    reference: &Waveform,
    epsilon: f64,
) -> Result<f64, MetricsError> {
    aligned(estimate, reference)?;
    aligned(mixture, reference)?;
    let est = sdr_slices(estimate.samples(), reference.samples(), epsilon)?;
    let mix = sdr_slices(mixture.samples(), reference.samples(), epsilon)?;
    Ok(improvement(est, mix))
}

/// `est - mix` with the infinite cases spelled out (`inf - inf` is 0: the
/// estimate is exactly as good as the mixture).
fn improvement(est: f64, mix: f64) -> f64 {
    if est == mix {
        0.0
    } else {
        est - mix
    }
}

pub fn si_sdr(estimate: &Waveform, reference: &Waveform, epsilon: f64) -> Result<f64, MetricsError> {
    aligned(estimate, reference)?;
    si_sdr_slices(estimate.samples(), reference.samples(), epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    #[serde(with = "db_value")]
    pub sdr_db: f64,
    #[serde(with = "db_value")]
    pub sdri_db: f64,
    #[serde(with = "db_value")]
    pub si_sdr_db: f64,
}

impl MetricsTriple {
    pub fn new(sdr_db: f64, sdri_db: f64, si_sdr_db: f64) -> Self {
        MetricsTriple { sdr_db, sdri_db, si_sdr_db }
    }

    pub fn zero() -> Self {
        MetricsTriple::new(0.0, 0.0, 0.0)
    }
}

/// All three metrics for one estimate against its reference and mixture.
pub fn evaluate(
    estimate: &Waveform,
    mixture: &Waveform,
    reference: &Waveform,
    epsilon: f64,
) -> Result<MetricsTriple, MetricsError> {
    aligned(estimate, reference)?;
    aligned(mixture, reference)?;
    let est = sdr_slices(estimate.samples(), reference.samples(), epsilon)?;
    let mix = sdr_slices(mixture.samples(), reference.samples(), epsilon)?;
    let si = si_sdr_slices(estimate.samples(), reference.samples(), epsilon)?;
    Ok(MetricsTriple::new(est, improvement(est, mix), si))
}

/// Clamps each per-clip value to `[-clamp_db, clamp_db]`, then takes the
/// arithmetic mean in the dB domain.
pub fn aggregate(triples: &[MetricsTriple], clamp_db: f64) -> Result<MetricsTriple, MetricsError> {
    if triples.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    if clamp_db.is_nan() || clamp_db <= 0.0 {
        return Err(MetricsError::InvalidClamp(clamp_db));
    }
    let n = triples.len() as f64;
    let mean = |f: fn(&MetricsTriple) -> f64| {
        triples.iter().map(|t| f(t).clamp(-clamp_db, clamp_db)).sum::<f64>() / n
    };
    Ok(MetricsTriple::new(
        mean(|t| t.sdr_db),
        mean(|t| t.sdri_db),
        mean(|t| t.si_sdr_db),
    ))
}

/// Finite values as JSON numbers, infinities as the strings `"inf"` and
/// `"-inf"`.
pub mod db_value {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct DbVisitor;
        impl Visitor<'_> for DbVisitor {
            type Value = f64;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"/\"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                parse(v).ok_or_else(|| E::custom(format!("not a dB value: {v}")))
            }
        }
        d.deserialize_any(DbVisitor)
    }

    pub fn parse(v: &str) -> Option<f64> {
        match v.trim() {
            "inf" | "+inf" | "Infinity" => Some(f64::INFINITY),
            "-inf" | "-Infinity" => Some(f64::NEG_INFINITY),
            "nan" | "NaN" => Some(f64::NAN),
            other => other.parse().ok(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wf(xs: &[f64]) -> Waveform {
        Waveform::new(xs.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn sdr_examples() {
        let s = wf(&[1.0, 0.0]);
        let v = sdr(&wf(&[1.0, 0.1]), &s, 0.0).unwrap();
        assert!((v - 20.0).abs() < 1e-12, "{v}");
        assert_eq!(sdr(&s, &s, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(sdr(&wf(&[0.0, 0.0]), &s, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn sdr_errors() {
        let z = wf(&[0.0, 0.0]);
        assert_eq!(sdr(&z, &z, 0.0), Err(MetricsError::ZeroEnergyReference));
        assert_eq!(sdr(&z, &z, 1e-8).unwrap(), 0.0);
        assert_eq!(
            sdr(&wf(&[1.0]), &wf(&[1.0, 2.0]), 0.0),
            Err(MetricsError::LengthMismatch(1, 2))
        );
        assert_eq!(
            sdr(&wf(&[1.0]), &wf(&[1.0]), -1.0),
            Err(MetricsError::InvalidEpsilon(-1.0))
        );
        let other_rate = Waveform::new(vec![1.0], 8000).unwrap();
        assert!(matches!(sdr(&other_rate, &wf(&[1.0]), 0.0), Err(MetricsError::RateMismatch(..))));
    }

    #[test]
    fn si_sdr_examples() {
        let s = wf(&[1.0, 0.0]);
        let v = si_sdr(&wf(&[0.5, 0.5]), &s, 0.0).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        assert_eq!(si_sdr(&wf(&[2.0, 0.0]), &s, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(si_sdr(&wf(&[0.0, 1.0]), &s, 0.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(
            si_sdr(&s, &wf(&[0.0, 0.0]), 1e-8),
            Err(MetricsError::ZeroEnergyReference)
        );
    }

    #[test]
    fn sdr_is_not_scale_invariant() {
        let s = wf(&[0.3, -0.2, 0.7, 0.1]);
        let doubled = s.scaled(2.0);
        let v = sdr(&doubled, &s, 0.0).unwrap();
        assert!(v.abs() < 1e-12);
        assert_eq!(si_sdr(&doubled, &s, 0.0).unwrap(), f64::INFINITY);
        assert_ne!(v, si_sdr(&doubled, &s, 0.0).unwrap());
    }

    #[test]
    fn sdri_examples() {
        let s = wf(&[1.0, 0.0, 0.5, 0.0]);
        let m = wf(&[1.0, 1.0, 0.5, 0.5]);
        assert_eq!(sdri(&m, &m, &s, 0.0).unwrap(), 0.0);
        assert_eq!(sdri(&s, &m, &s, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(sdri(&m, &m, &s, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn sdri_with_orthogonal_zero_db_mixture() {
        // target and noise occupy disjoint samples with equal energy, so
        // the mixture SDR is 10 log10(E_s / E_n) = 0 dB
        let s = wf(&[1.0, 0.0, -1.0, 0.0]);
        let noise = [0.0, 1.0, 0.0, -1.0];
        let m = wf(&[1.0, 1.0, -1.0, -1.0]);
        // estimate error energy E_s / 10 gives SDR 10 dB
        let g = (0.1f64).sqrt();
        let est = wf(&[1.0, g * noise[1], -1.0, g * noise[3]]);
        assert!((sdr(&est, &s, 0.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(sdr(&m, &s, 0.0).unwrap().abs() < 1e-12);
        let v = sdri(&est, &m, &s, 0.0).unwrap();
        assert!((v - 10.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sdri_against_half_energy_mixture() {
        // mixture at 0 dB: E_err = E_s, so SDR(mixture) = 0 dB. Estimate
        // 10 dB -> SDRi 10 dB. With a noise twice as strong the mixture
        // sits at -3.0103 dB and SDRi = 10 + 3.0103.
        let s = wf(&[1.0, 0.0]);
        let m = wf(&[1.0, 2f64.sqrt()]);
        let est = wf(&[1.0, (0.1f64).sqrt()]);
        let v = sdri(&est, &m, &s, 0.0).unwrap();
        assert!((v - (10.0 + 10.0 * 2f64.log10())).abs() < 1e-12, "{v}");
    }

    #[test]
    fn aggregate_examples() {
        let t = MetricsTriple::new(5.817, 5.782, 3.837);
        assert_eq!(aggregate(&[t], 60.0).unwrap(), t);
        let both = [
            MetricsTriple::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            MetricsTriple::zero(),
        ];
        let agg = aggregate(&both, 60.0).unwrap();
        assert_eq!(agg, MetricsTriple::new(30.0, 30.0, 30.0));
        let neg = [MetricsTriple::new(f64::NEG_INFINITY, -70.0, 0.0)];
        assert_eq!(aggregate(&neg, 60.0).unwrap(), MetricsTriple::new(-60.0, -60.0, 0.0));
        assert_eq!(aggregate(&[], 60.0), Err(MetricsError::EmptyList));
        assert_eq!(format!("{:.3}", aggregate(&[t], 60.0).unwrap().sdr_db), "5.817");
    }

    #[test]
    fn triple_json_handles_infinity() {
        let t = MetricsTriple::new(f64::INFINITY, f64::NEG_INFINITY, 1.5);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"sdr_db":"inf","sdri_db":"-inf","si_sdr_db":1.5}"#);
        let back: MetricsTriple = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let ints: MetricsTriple = serde_json::from_str(r#"{"sdr_db":3,"sdri_db":0,"si_sdr_db":-1}"#).unwrap();
        assert_eq!(ints, MetricsTriple::new(3.0, 0.0, -1.0));
    }

    proptest! {
        #[test]
        fn shrinking_error_increases_sdr(
            reference in proptest::collection::vec(-1.0f64..1.0, 16),
            error in proptest::collection::vec(-1.0f64..1.0, 16),
            shrink in 0.05f64..0.95,
        ) {
            prop_assume!(reference.iter().map(|x| x * x).sum::<f64>() > 1e-3);
            prop_assume!(error.iter().map(|x| x * x).sum::<f64>() > 1e-3);
            let s = wf(&reference);
            let est_a: Vec<f64> = reference.iter().zip(&error).map(|(r, e)| r + e).collect();
            let est_b: Vec<f64> = reference.iter().zip(&error).map(|(r, e)| r + shrink * e).collect();
            let a = sdr(&wf(&est_a), &s, 0.0).unwrap();
            let b = sdr(&wf(&est_b), &s, 0.0).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn identity_sdri_is_zero(
            reference in proptest::collection::vec(-1.0f64..1.0, 1..64),
            noise in proptest::collection::vec(-1.0f64..1.0, 64),
        ) {
            prop_assume!(reference.iter().any(|x| *x != 0.0));
            let m: Vec<f64> = reference.iter().zip(&noise).map(|(r, n)| r + n).collect();
            let mix = wf(&m);
            prop_assert_eq!(sdri(&mix, &mix, &wf(&reference), 0.0).unwrap(), 0.0);
            prop_assert_eq!(sdri(&mix, &mix, &wf(&reference), HARNESS_EPSILON).unwrap(), 0.0);
        }
    }
}
