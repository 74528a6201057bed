//! Seeded synthetic beats with class-specific morphology. They stand in for
//! the public dataset in tests, benchmarks and demos; they are not a model
//! of real arrhythmias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::{mix_seed, BeatRecord, ClassLabel, Dataset, SplitTag};

pub const BEAT_LEN: usize = 187;

struct Wave {
    center: f64,
    width: f64,
    amplitude: f64,
}

fn waves(class: ClassLabel) -> (usize, Vec<Wave>) {
    let w = |center, width, amplitude| Wave { center, width, amplitude };
    match class {
        ClassLabel::N => (150, vec![w(30.0, 4.0, 0.15), w(50.0, 2.0, 1.0), w(90.0, 7.0, 0.3)]),
        ClassLabel::S => (110, vec![w(42.0, 3.0, 0.12), w(50.0, 2.0, 1.0), w(80.0, 6.0, 0.25)]),
        ClassLabel::V => (150, vec![w(50.0, 7.0, 1.0), w(95.0, 10.0, -0.4)]),
        ClassLabel::F => (150, vec![w(30.0, 4.0, 0.1), w(50.0, 4.5, 0.9), w(92.0, 8.0, 0.1)]),
        ClassLabel::Q => (140, vec![w(40.0, 0.6, 0.8), w(52.0, 5.0, 0.7), w(95.0, 8.0, 0.2)]),
    }
}

/// One beat: Gaussian waves with jittered timing and amplitude plus white
/// noise, scaled to `[0, 1]` and zero-padded to [`BEAT_LEN`].
pub fn synthetic_beat(class: ClassLabel, seed: u64) -> BeatRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let (len, waves) = waves(class);
    let shift: f64 = rng.random_range(-3.0..3.0);
    let stretch: f64 = rng.random_range(0.9..1.1);
    let gains: Vec<f64> = waves.iter().map(|_| rng.random_range(0.85..1.15)).collect();
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64;
            let signal: f64 = waves
                .iter()
                .zip(&gains)
                .map(|(w, g)| {
                    let z = (t - w.center - shift) / (w.width * stretch);
                    g * w.amplitude * (-0.5 * z * z).exp()
                })
                .sum();
            signal + noise.sample(&mut rng)
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut samples: Vec<f64> = raw.iter().map(|v| (v - lo) / (hi - lo)).collect();
    samples.resize(BEAT_LEN, 0.0);
    BeatRecord {
        samples,
        label: class,
        source_id: Some(format!("synthetic:{class}:{seed:016x}")),
    }
}

/// `counts` beats of each listed class, interleaved class by class.
pub fn synthetic_dataset(counts: &[(ClassLabel, usize)], seed: u64, split: SplitTag) -> Dataset {
    let most = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
    let mut records = Vec::new();
    for i in 0..most {
        for &(class, n) in counts {
            if i < n {
                records.push(synthetic_beat(class, mix_seed(seed, class.ordinal() as u64, i as u64)));
            }
        }
    }
    Dataset::new(records, split)
}

/// Equal counts of all five classes.
pub fn balanced(per_class: usize, seed: u64, split: SplitTag) -> Dataset {
    let counts: Vec<(ClassLabel, usize)> = ClassLabel::ALL.iter().map(|&c| (c, per_class)).collect();
    synthetic_dataset(&counts, seed, split)
}
