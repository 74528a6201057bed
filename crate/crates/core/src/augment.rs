//! Minority-class balancing by noisy copies or plain repetition.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{mix_seed, BeatRecord, ClassLabel, Dataset};

pub const DEFAULT_NOISE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Noise,
    Repeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub target_count: usize,
    pub mode: AugmentMode,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl AugmentPlan {
    pub fn noise(target_count: usize, seed: u64) -> Self {
        Self {
            target_count,
            mode: AugmentMode::Noise,
            noise_fraction: DEFAULT_NOISE_FRACTION,
            seed,
        }
    }

    pub fn repeat(target_count: usize, seed: u64) -> Self {
        Self {
            target_count,
            mode: AugmentMode::Repeat,
            noise_fraction: 0.0,
            seed,
        }
    }

    fn validate(&self) {
        assert!(self.target_count >= 1, "target_count must be at least 1");
        assert!(
            (0.0..=1.0).contains(&self.noise_fraction),
            "noise_fraction must lie in [0, 1]"
        );
    }
}

/// Adds zero-mean Gaussian noise with `σ = noise_fraction·peak/3`, each draw
/// clipped to `±noise_fraction·peak`, then clamps the beat to `[0, 1]`.
pub fn gaussian_augment(beat: &BeatRecord, noise_fraction: f64, seed: u64) -> BeatRecord {
    let peak = beat.samples.iter().copied().fold(0.0, f64::max);
    let bound = noise_fraction * peak;
    if !(bound > 0.0) {
        return beat.clone();
    }
    let normal = Normal::new(0.0, bound / 3.0).expect("finite positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = beat
        .samples
        .iter()
        .map(|&v| {
            let n: f64 = normal.sample(&mut rng);
            (v + n.clamp(-bound, bound)).clamp(0.0, 1.0)
        })
        .collect();
    BeatRecord {
        samples,
        label: beat.label,
        source_id: beat.source_id.clone(),
    }
}

/// Indices of the originals used to fill a deficit: `i mod class_size`.
pub fn fill_sources(class_size: usize, deficit: usize) -> impl Iterator<Item = usize> {
    (0..deficit).map(move |i| i % class_size)
}

/// Brings every present class to exactly `plan.target_count` records.
/// Short classes keep all originals and append augmented copies of record
/// `i mod size`; long classes are down-sampled without replacement. Output
/// is grouped by class in file-ordinal order, originals first.
///
/// Augmented records carry `source_id = "<class>:<source index>:aug<i>"`.
pub fn balance_classes(ds: &Dataset, plan: &AugmentPlan) -> Dataset {
    plan.validate();
    let mut records = Vec::with_capacity(plan.target_count * ClassLabel::ALL.len());
    for class in ClassLabel::ALL {
        let members: Vec<&BeatRecord> = ds.records.iter().filter(|r| r.label == class).collect();
        if members.is_empty() {
            continue;
        }
        let size = members.len();
        if size >= plan.target_count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(plan.seed, class.ordinal() as u64, u64::MAX));
            let mut keep = sample(&mut rng, size, plan.target_count).into_vec();
            keep.sort_unstable();
            records.extend(keep.into_iter().map(|i| members[i].clone()));
            continue;
        }
        records.extend(members.iter().map(|r| (*r).clone()));
        for (i, src) in fill_sources(size, plan.target_count - size).enumerate() {
            let original = members[src];
            let mut copy = match plan.mode {
                AugmentMode::Repeat => original.clone(),
                AugmentMode::Noise => gaussian_augment(
                    original,
                    plan.noise_fraction,
                    mix_seed(plan.seed, class.ordinal() as u64, i as u64),
                ),
            };
            copy.source_id = Some(format!("{class}:{src}:aug{i}"));
            records.push(copy);
        }
    }
    Dataset::new(records, ds.split_tag)
}
