//! End-to-end runs shared by the command line and the acceptance tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{balance_classes, AugmentPlan};
use crate::eval::{evaluate, EvalError, EvalOptions, MetricsReport};
use crate::images::{ImageSet, ImagesError};
use crate::ingest::{class_distribution, mix_seed, stratified_subset, ClassLabel, Dataset, IngestError};
use crate::model::{fit_with, predict, save_model, EpochStats, ModelError, Network, TrainHistory, TrainSchedule};
use crate::tfr::{BeatTransform, TransformConfig};

/// Directory holding the public per-beat files, overridable through
/// `ECG_DATA_DIR`.
pub const DATA_DIR_ENV: &str = "ECG_DATA_DIR";
pub const TRAIN_FILE: &str = "mitbih_train.csv";
pub const TEST_FILE: &str = "mitbih_test.csv";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// `(train, test)` file paths under `dir`, if both exist.
pub fn dataset_files(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    let (train, test) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
    (train.is_file() && test.is_file()).then_some((train, test))
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Images(#[from] ImagesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    std::fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    fn from_ms(mut v: Vec<f64>) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(Self {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p95_ms: v[rank - 1],
            max_ms: v[v.len() - 1],
        })
    }
}

/// Per-beat wall-clock latency on the calling thread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub beats: usize,
    pub threads: usize,
    pub total: Option<LatencyStats>,
    pub transform: Option<LatencyStats>,
    pub inference: Option<LatencyStats>,
}

/// Times `n` beats (cycling through `ds`) one at a time: transform, then
/// inference with the batch dimension 1.
pub fn bench(net: &Network<f32>, ds: &Dataset, n: usize, cfg: TransformConfig) -> Result<BenchReport, PipelineError> {
    if n > 0 && ds.is_empty() {
        return Err(PipelineError::Invalid("no beats to benchmark".into()));
    }
    let transform = BeatTransform::new(cfg);
    let (mut t_ms, mut i_ms, mut total_ms) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..n {
        let beat = &ds.records[k % ds.len()].samples;
        let start = Instant::now();
        let image = transform.transform_f32(beat);
        let mid = Instant::now();
        let (class, _) = predict(net, &image)?;
        let end = Instant::now();
        std::hint::black_box(class);
        t_ms.push((mid - start).as_secs_f64() * 1e3);
        i_ms.push((end - mid).as_secs_f64() * 1e3);
        total_ms.push((end - start).as_secs_f64() * 1e3);
    }
    Ok(BenchReport {
        beats: n,
        threads: 1,
        total: LatencyStats::from_ms(total_ms),
        transform: LatencyStats::from_ms(t_ms),
        inference: LatencyStats::from_ms(i_ms),
    })
}

/// Everything a reproduce run depends on besides the two datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceConfig {
    pub seed: u64,
    pub schedule: TrainSchedule,
    /// Stratified cap per class on the training set.
    pub train_cap_per_class: Option<usize>,
    pub test_cap_per_class: Option<usize>,
    pub transform: TransformConfig,
    pub no_ramp: bool,
    pub drop_q: bool,
    /// Per-class target when the schedule trains on augmented data; defaults
    /// to the largest class count after subsetting.
    pub augment_target: Option<usize>,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: TrainSchedule::default(),
            train_cap_per_class: None,
            test_cap_per_class: None,
            transform: TransformConfig::default(),
            no_ramp: false,
            drop_q: false,
            augment_target: None,
        }
    }
}

impl ReproduceConfig {
    pub fn effective_transform(&self) -> TransformConfig {
        TransformConfig {
            ramp_strength: if self.no_ramp { 0.0 } else { self.transform.ramp_strength },
            ..self.transform
        }
    }
}

/// Counts and settings recorded next to a reproduce run's report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: ReproduceConfig,
    pub train_counts: std::collections::BTreeMap<String, usize>,
    pub test_counts: std::collections::BTreeMap<String, usize>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub epochs_run: usize,
    pub stopped_early_at: Option<usize>,
}

pub struct ReproduceOutcome {
    pub report: MetricsReport,
    pub history: TrainHistory,
    pub manifest: RunManifest,
    pub model: Network<f32>,
}

fn code_counts(ds: &Dataset) -> std::collections::BTreeMap<String, usize> {
    class_distribution(ds)
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .map(|(c, n)| (c.code().to_string(), n))
        .collect()
}

/// Subset → (optional augmentation) → transform → train → evaluate.
pub fn reproduce(
    train: &Dataset,
    test: &Dataset,
    cfg: &ReproduceConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<ReproduceOutcome, PipelineError> {
    cfg.schedule.validate()?;
    let keep = |c: ClassLabel| !(cfg.drop_q && c == ClassLabel::Q);
    let mut train = train.filter_labels(keep);
    let mut test = test.filter_labels(keep);
    if let Some(cap) = cfg.train_cap_per_class {
        train = stratified_subset(&train, cap, mix_seed(cfg.seed, 0x7a, 0));
    }
    if let Some(cap) = cfg.test_cap_per_class {
        test = stratified_subset(&test, cap, mix_seed(cfg.seed, 0x7e, 0));
    }
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::Invalid("train and test sets must be non-empty".into()));
    }
    if cfg.schedule.augment {
        let target = cfg
            .augment_target
            .unwrap_or_else(|| class_distribution(&train).values().copied().max().unwrap_or(1));
        train = balance_classes(&train, &AugmentPlan::noise(target, mix_seed(cfg.seed, 0xa6, 0)));
    }

    let transform = BeatTransform::new(cfg.effective_transform());
    let train_images = ImageSet::from_dataset(&train, &transform);
    let test_images = ImageSet::from_dataset(&test, &transform);

    let mut arch = cfg.schedule.arch_config();
    arch.input_size = cfg.transform.size;
    let mut model = Network::<f32>::new(arch, mix_seed(cfg.seed, 0x1417, 0))?;
    let history = fit_with(&mut model, &train_images, &cfg.schedule, cfg.seed, on_epoch)?;
    let report = evaluate(
        &model,
        &test_images,
        EvalOptions {
            no_ramp: cfg.no_ramp,
            drop_q: cfg.drop_q,
        },
    )?;
    let (trainable_params, total_params) = model.param_counts();
    let manifest = RunManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        train_counts: code_counts(&train),
        test_counts: code_counts(&test),
        trainable_params,
        total_params,
        epochs_run: history.epochs.len(),
        stopped_early_at: history.stopped_early_at,
    };
    Ok(ReproduceOutcome {
        report,
        history,
        manifest,
        model,
    })
}

/// Files written by [`write_outcome`], relative to the output directory.
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const TIMINGS_JSON: &str = "timings.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.bin";

/// Writes the report, confusion matrix, history, manifest and model.
/// Wall-clock times go to their own file so every other output is
/// byte-identical between runs with the same seed.
pub fn write_outcome(outcome: &mut ReproduceOutcome, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join(REPORT_TXT), &outcome.report.to_text())?;
    write_file(&dir.join(REPORT_JSON), &outcome.report.to_json())?;
    write_file(&dir.join(CONFUSION_CSV), &outcome.report.confusion_matrix.to_csv())?;
    write_file(&dir.join(HISTORY_JSON), &json(&outcome.history.epochs))?;
    write_file(&dir.join(TIMINGS_JSON), &json(&outcome.history.wall_times_s))?;
    write_file(&dir.join(MANIFEST_JSON), &json(&outcome.manifest))?;
    save_model(&mut outcome.model, &dir.join(MODEL_FILE))?;
    Ok(())
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SplitTag;
    use crate::model::{ArchConfig, HeadKind};
    use crate::synthetic::balanced;

    fn tiny_net() -> Network<f32> {
        let arch = ArchConfig {
            input_size: 32,
            stem_filters: 4,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: true,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            head_pool: 1,
            head: HeadKind::None,
            num_classes: 5,
        };
        Network::new(arch, 3).unwrap()
    }

    #[test]
    fn bench_with_zero_beats_is_empty() {
        let ds = Dataset::new(Vec::new(), SplitTag::Test);
        let r = bench(&tiny_net(), &ds, 0, TransformConfig::default()).unwrap();
        assert_eq!(r.beats, 0);
        assert!(r.total.is_none() && r.transform.is_none() && r.inference.is_none());
    }

    #[test]
    fn bench_total_covers_its_parts() {
        let ds = balanced(2, 5, SplitTag::Test);
        let cfg = TransformConfig {
            size: 32,
            ..Default::default()
        };
        let r = bench(&tiny_net(), &ds, 12, cfg).unwrap();
        let (total, t, i) = (r.total.unwrap(), r.transform.unwrap(), r.inference.unwrap());
        assert!(total.mean_ms >= t.mean_ms && total.mean_ms >= i.mean_ms);
        assert!(total.p95_ms <= total.max_ms);
    }

    #[test]
    fn p95_uses_nearest_rank() {
        let s = LatencyStats::from_ms((1..=20).map(f64::from).collect()).unwrap();
        assert_eq!(s.p95_ms, 19.0);
        assert_eq!(s.mean_ms, 10.5);
    }
}
