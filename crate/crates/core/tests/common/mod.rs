#![allow(dead_code)]

use std::collections::BTreeMap;

use agenet::dataset::{
    age_bin, stratified_split, BinCounts, Corpus, MemoryImageSource, Ratios, Sample, Split, SplitManifest,
};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A smooth random color field: a few Gaussian blobs over a tinted base.
pub fn synthetic_image(seed: u64, side: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), rng.random_range(40.0..200.0)];
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..side as f32),
                rng.random_range(0.0..side as f32),
                rng.random_range(side as f32 / 8.0..side as f32 / 3.0),
                [rng.random_range(-90.0..90.0), rng.random_range(-90.0..90.0), rng.random_range(-90.0..90.0)],
            )
        })
        .collect();
    RgbImage::from_fn(side, side, |x, y| {
        let mut px = base;
        for (cx, cy, r, c) in &blobs {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            let w = (-d2 / (2.0 * r * r)).exp();
            for k in 0..3 {
                px[k] += w * c[k];
            }
        }
        Rgb(px.map(|v| v.clamp(0.0, 255.0) as u8))
    })
}

pub fn synthetic_samples(ages: &[f64]) -> Vec<Sample> {
    ages.iter()
        .enumerate()
        .map(|(i, &a)| Sample::new(format!("s{i:05}"), format!("mem/s{i:05}.png"), a).unwrap())
        .collect()
}

pub fn memory_source(samples: &[Sample], side: u32, seed: u64) -> MemoryImageSource {
    let mut src = MemoryImageSource::new();
    for (i, s) in samples.iter().enumerate() {
        src.insert(s.id.clone(), synthetic_image(seed.wrapping_add(i as u64), side));
    }
    src
}

/// A corpus with the given ages, stratified at the default ratios.
pub fn stratified_corpus(ages: &[f64], seed: u64) -> Corpus {
    let samples = synthetic_samples(ages);
    let manifest = stratified_split(&samples, Ratios::default(), seed).unwrap();
    let src = memory_source(&samples, 48, seed);
    Corpus::new(samples, manifest, Box::new(src)).unwrap()
}

/// A corpus with explicit train and validation sets and no test split.
pub fn fixed_corpus(train_ages: &[f64], val_ages: &[f64], seed: u64) -> Corpus {
    let all: Vec<f64> = train_ages.iter().chain(val_ages).copied().collect();
    let samples = synthetic_samples(&all);
    let mut assignment = BTreeMap::new();
    let mut bins = BTreeMap::new();
    let mut bin_counts: BTreeMap<u32, BinCounts> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let split = if i < train_ages.len() { Split::Train } else { Split::Val };
        assignment.insert(s.id.clone(), split);
        bins.insert(s.id.clone(), age_bin(s.age));
        let c = bin_counts.entry(age_bin(s.age)).or_default();
        match split {
            Split::Train => c.train += 1,
            Split::Val => c.val += 1,
            Split::Test => c.test += 1,
        }
    }
    let manifest = SplitManifest {
        seed,
        ratios: Ratios::default(),
        assignment,
        bins,
        bin_counts,
        weights: BTreeMap::new(),
        degenerate_bins: Vec::new(),
        curation_log: None,
    };
    let src = memory_source(&samples, 48, seed);
    Corpus::new(samples, manifest, Box::new(src)).unwrap()
}

/// Ages spread evenly over `[lo, hi]`.
pub fn spread_ages(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).collect()
}
