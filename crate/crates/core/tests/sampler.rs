mod common;

use std::collections::HashMap;

use capaug::corpus::{self, Manifest, ManifestMetadata, TrainingSampler};
use common::fixture;

/// 0.999 quantile of the chi-square distribution with 4 degrees of freedom.
const CHI2_DF4_P001: f64 = 18.467;

fn one_clotho_clip() -> Manifest {
    let mut entries = corpus::ingest_clotho(&fixture("clotho_development.csv"), None).unwrap();
    entries.truncate(1);
    Manifest::new(ManifestMetadata::default(), entries).unwrap()
}

#[test]
fn original_captions_are_uniform() {
    let manifest = one_clotho_clip();
    let mut sampler = TrainingSampler::new(&manifest, false, 11).unwrap();
    let draws = 100_000;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(sampler.next_pair().1).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 5);
    let expected = draws as f64 / 5.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < CHI2_DF4_P001, "chi-square {chi2}");
}

#[test]
fn augmented_captions_only_when_requested() {
    let mut manifest = one_clotho_clip();
    let id = manifest.entries()[0].clip_id.clone();
    let extra = vec!["A tuned radio crackles between channels.".to_string()];
    manifest.attach_augmentations(&id, &extra).unwrap();

    let mut without = TrainingSampler::new(&manifest, false, 3).unwrap();
    assert!((0..2_000).all(|_| without.next_pair().1 != extra[0]));

    let mut with = TrainingSampler::new(&manifest, true, 3).unwrap();
    assert!((0..2_000).any(|_| with.next_pair().1 == extra[0]));
}

#[test]
fn sampling_is_seeded() {
    let manifest = corpus::ingest_clotho(&fixture("clotho_development.csv"), None).unwrap();
    let manifest = Manifest::new(ManifestMetadata::default(), manifest).unwrap();
    let a = corpus::sample_training_pair(&manifest, false, 5).unwrap();
    let b = corpus::sample_training_pair(&manifest, false, 5).unwrap();
    assert_eq!(a, b);
    let draws: Vec<_> = (0..20).map(|s| corpus::sample_training_pair(&manifest, false, s).unwrap()).collect();
    assert!(draws.iter().any(|d| d != &a));
}
