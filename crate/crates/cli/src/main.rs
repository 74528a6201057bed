//! `ecgwvd`: beat ingest, segmentation, WVD images, training and evaluation
//! from the command line.

mod error;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecg_wvd::augment::{balance_classes, AugmentPlan, DEFAULT_NOISE_FRACTION};
use ecg_wvd::eval::{evaluate, EvalOptions, MetricsReport};
use ecg_wvd::images::{read_tensor, sidecar_path, write_png, write_tensor, ImageSet};
use ecg_wvd::ingest::{
    class_distribution, load_beat_csv, load_beat_csv_as, mix_seed, reference_counts, reference_mismatches,
    write_beat_csv, BeatRecord, ClassLabel, Dataset, DatasetManifest, SplitTag,
};
use ecg_wvd::model::{fit_with, load_model, predict_set, save_model, ArchConfig, Network, TrainSchedule};
use ecg_wvd::pipeline::{
    bench, data_dir, dataset_files, reproduce, write_file, write_outcome, ReproduceConfig, HISTORY_JSON,
    MANIFEST_JSON, MODEL_FILE, REPORT_JSON, REPORT_TXT, CONFUSION_CSV, TIMINGS_JSON,
};
use ecg_wvd::segmentation::{segment_strip, EcgStrip, SegmentConfig, LONG_BEAT_S};
use ecg_wvd::synthetic::balanced;
use ecg_wvd::tfr::{BeatTransform, TransformConfig};
use serde_json::json;

use error::{io_error, CliError};

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ecgwvd", version, about = "ECG beat classification from Wigner-Ville images")]
struct Cli {
    /// Root seed; every random choice derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a beat CSV and report its class counts.
    IngestCheck(IngestCheckArgs),
    /// Cut a raw single-lead strip into beat rows.
    Segment(SegmentArgs),
    /// Turn beat rows into a WVD image tensor.
    Transform(TransformCmdArgs),
    /// Balance classes with noisy copies (or plain repeats).
    Augment(AugmentArgs),
    /// Train a model on beats or an image tensor.
    Train(TrainArgs),
    /// Score a model on labelled beats or images.
    Eval(EvalArgs),
    /// Predict a class for every beat.
    Classify(ClassifyArgs),
    /// Per-beat latency, transform plus inference, on one thread.
    Bench(BenchArgs),
    /// Subset, transform, train and evaluate in one go.
    Reproduce(ReproduceArgs),
    /// Write images from a tensor file as PNGs.
    ExportImages(ExportArgs),
}

#[derive(Args, Clone, Default)]
struct TransformFlags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ramp_strength: Option<f64>,
    /// Leave the coordinate ramp out.
    #[arg(long)]
    no_ramp: bool,
    /// Use the real beat instead of its analytic signal.
    #[arg(long)]
    no_analytic: bool,
}

#[derive(Args, Clone, Default)]
struct ScheduleFlags {
    /// Named schedule 1-10.
    #[arg(long, conflicts_with = "schedule")]
    preset: Option<u8>,
    /// Schedule as JSON; missing fields take preset 10's values.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Override the epoch count (or cap, with early stopping).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct IngestCheckArgs {
    input: PathBuf,
    /// Split tag; inferred from the file name when absent.
    #[arg(long)]
    split: Option<SplitTag>,
    /// Fail unless the counts match the published per-beat files.
    #[arg(long)]
    expect_reference: bool,
}

#[derive(Args)]
struct SegmentArgs {
    /// Single-column CSV of samples.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sampling rate of the strip in Hz.
    #[arg(long, default_value_t = 360.0)]
    fs: f64,
    /// Label written for every beat.
    #[arg(long, default_value = "N")]
    label: ClassLabel,
    #[arg(long, default_value_t = ecg_wvd::segmentation::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = ecg_wvd::segmentation::DEFAULT_WINDOW_S)]
    window_s: f64,
    #[arg(long, default_value_t = ecg_wvd::segmentation::DEFAULT_BEAT_S)]
    beat_s: f64,
    /// Cut 1.496 s beats, the span of the public rows.
    #[arg(long, conflicts_with = "beat_s")]
    long_beats: bool,
}

#[derive(Args)]
struct TransformCmdArgs {
    /// Beat CSV.
    #[arg(long)]
    input: PathBuf,
    /// Tensor file; the sidecar goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    transform: TransformFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentModeArg {
    Noise,
    Repeat,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Records per class; defaults to the largest class.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, value_enum, default_value = "noise")]
    mode: AugmentModeArg,
    #[arg(long, default_value_t = DEFAULT_NOISE_FRACTION)]
    noise_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Beat CSV, or a tensor file with its sidecar.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    schedule: ScheduleFlags,
    #[command(flatten)]
    transform: TransformFlags,
    /// Stratified cap per class.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled beat CSV or tensor file.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    transform: TransformFlags,
    #[arg(long)]
    drop_q: bool,
    /// Also write report.txt, report.json and confusion.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Beat CSV (the label column is ignored) or tensor file.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    transform: TransformFlags,
    /// CSV of predictions; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Saved model; an untrained compact model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Beat CSV; synthetic beats when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[command(flatten)]
    transform: TransformFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Directory with the public train/test files (default: $ECG_DATA_DIR or data/).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, requires = "test")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    schedule: ScheduleFlags,
    #[command(flatten)]
    transform: TransformFlags,
    #[arg(long)]
    train_cap: Option<usize>,
    #[arg(long)]
    test_cap: Option<usize>,
    #[arg(long)]
    drop_q: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Tensor file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Export at most this many images.
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ecgwvd: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::IngestCheck(a) => ingest_check(a),
        Command::Segment(a) => segment(a),
        Command::Transform(a) => transform(a, seed),
        Command::Augment(a) => augment(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Classify(a) => classify(a, seed),
        Command::Bench(a) => run_bench(a, seed),
        Command::Reproduce(a) => run_reproduce(a, seed),
        Command::ExportImages(a) => export_images(a),
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(seed: Option<u64>, t: &TransformFlags, s: Option<&ScheduleFlags>) -> Result<ReproduceConfig> {
    let mut cfg = match &t.config {
        Some(path) => parse_json::<ReproduceConfig>(path)?,
        None => ReproduceConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(r) = t.ramp_strength {
        if !(r.is_finite() && r >= 0.0) {
            return Err(CliError::invalid(format!("ramp strength must be finite and non-negative, got {r}")));
        }
        cfg.transform.ramp_strength = r;
    }
    cfg.no_ramp |= t.no_ramp;
    if t.no_analytic {
        cfg.transform.analytic = false;
    }
    if let Some(s) = s {
        if let Some(path) = &s.schedule {
            cfg.schedule = parse_json(path)?;
        }
        if let Some(n) = s.preset {
            cfg.schedule = TrainSchedule::preset(n)?;
        }
        if let Some(e) = s.epochs {
            cfg.schedule.epochs = e;
        }
        cfg.schedule.validate()?;
    }
    Ok(cfg)
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn is_tensor(path: &Path) -> bool {
    sidecar_path(path).is_file()
}

/// Beats get transformed; tensors are read as stored.
fn load_images(path: &Path, cfg: &TransformConfig) -> Result<ImageSet> {
    if is_tensor(path) {
        Ok(read_tensor(path)?)
    } else {
        let ds = load_beat_csv(path)?;
        Ok(ImageSet::from_dataset(&ds, &BeatTransform::new(*cfg)))
    }
}

fn ingest_check(a: IngestCheckArgs) -> Result<()> {
    let ds = match a.split {
        Some(split) => load_beat_csv_as(&a.input, split)?,
        None => load_beat_csv(&a.input)?,
    };
    let mismatches = reference_mismatches(&ds);
    let report = json!({
        "manifest": DatasetManifest::describe(&ds),
        "reference": reference_counts(ds.split_tag)
            .into_iter()
            .map(|(c, n)| (c.code().to_string(), n))
            .collect::<std::collections::BTreeMap<_, _>>(),
        "matches_reference": mismatches.is_empty(),
    });
    print!("{}", to_json(&report));
    if a.expect_reference && !mismatches.is_empty() {
        let detail: Vec<String> = mismatches
            .iter()
            .map(|(c, want, got)| format!("{c}: expected {want}, found {got}"))
            .collect();
        return Err(CliError::invalid(format!("class counts differ from the reference: {}", detail.join(", "))));
    }
    Ok(())
}

fn read_strip(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => samples.push(v),
            // a header line is allowed
            Err(_) if i == 0 => {}
            _ => return Err(CliError::invalid(format!("{}: line {}: not a number: {field:?}", path.display(), i + 1))),
        }
    }
    if samples.is_empty() {
        return Err(CliError::invalid(format!("{} holds no samples", path.display())));
    }
    Ok(samples)
}

fn segment(a: SegmentArgs) -> Result<()> {
    if !(a.fs.is_finite() && a.fs > 0.0) {
        return Err(CliError::invalid("--fs must be positive"));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::invalid("--threshold must lie in [0, 1]"));
    }
    let strip = EcgStrip::new(read_strip(&a.input)?, a.fs);
    let cfg = SegmentConfig {
        window_s: a.window_s,
        threshold: a.threshold,
        beat_s: if a.long_beats { LONG_BEAT_S } else { a.beat_s },
        ..Default::default()
    };
    let (beats, summary) = segment_strip(&strip, &cfg);
    if beats.is_empty() {
        return Err(CliError::invalid(format!(
            "no beats found ({} windows, {} flat)",
            summary.windows, summary.degenerate_windows
        )));
    }
    let records = beats.into_iter().map(|b| BeatRecord::new(b, a.label)).collect();
    let notes = json!({
        "source": a.input.display().to_string(),
        "fs": a.fs,
        "threshold": cfg.threshold,
        "window_s": cfg.window_s,
        "beat_s": cfg.beat_s,
        "windows": summary.windows,
        "flat_windows": summary.degenerate_windows,
    });
    let manifest = write_beat_csv(&Dataset::new(records, SplitTag::Train), &a.out, object(notes))?;
    eprintln!("{} beats from {} windows", manifest.count, summary.windows);
    Ok(())
}

fn object(v: serde_json::Value) -> serde_json::Map<String, serde_json::Value> {
    match v {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("json! object literal"),
    }
}

fn transform(a: TransformCmdArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(seed, &a.transform, None)?;
    let ds = load_beat_csv(&a.input)?;
    let tcfg = cfg.effective_transform();
    let set = ImageSet::from_dataset(&ds, &BeatTransform::new(tcfg));
    let extra = json!({ "seed": cfg.seed, "analytic": tcfg.analytic });
    let sidecar = write_tensor(&set, &a.out, object(extra))?;
    eprintln!("{} images of {}x{}", sidecar.count, sidecar.rows, sidecar.cols);
    Ok(())
}

fn augment(a: AugmentArgs, seed: Option<u64>) -> Result<()> {
    if !(0.0..=1.0).contains(&a.noise_fraction) {
        return Err(CliError::invalid("--noise-fraction must lie in [0, 1]"));
    }
    let seed = seed.unwrap_or(0);
    let ds = load_beat_csv(&a.input)?;
    let target = a
        .target
        .unwrap_or_else(|| class_distribution(&ds).values().copied().max().unwrap_or(1));
    if target == 0 {
        return Err(CliError::invalid("--target must be at least 1"));
    }
    let plan = match a.mode {
        AugmentModeArg::Noise => AugmentPlan {
            noise_fraction: a.noise_fraction,
            ..AugmentPlan::noise(target, seed)
        },
        AugmentModeArg::Repeat => AugmentPlan::repeat(target, seed),
    };
    let out = balance_classes(&ds, &plan);
    let notes = json!({ "seed": seed, "plan": plan, "source": a.input.display().to_string() });
    let manifest = write_beat_csv(&out, &a.out, object(notes))?;
    eprintln!("{} beats written", manifest.count);
    Ok(())
}

fn print_epoch(e: &ecg_wvd::model::EpochStats) {
    let val = match (e.val_loss, e.val_acc) {
        (Some(l), Some(a)) => format!(", val loss {l:.4}, val acc {a:.4}"),
        _ => String::new(),
    };
    eprintln!(
        "epoch {:>3}: lr {:.2e}, loss {:.4}, acc {:.4}{val}",
        e.epoch, e.lr, e.train_loss, e.train_acc
    );
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(seed, &a.transform, Some(&a.schedule))?;
    let tcfg = cfg.effective_transform();
    let set = if is_tensor(&a.input) {
        if cfg.schedule.augment {
            return Err(CliError::invalid("augmenting schedules need a beat CSV, not a tensor"));
        }
        let mut set = read_tensor(&a.input)?;
        if let Some(cap) = a.cap {
            set = set.select(&capped_indices(&set.labels, cap, cfg.seed));
        }
        set
    } else {
        let mut ds = load_beat_csv(&a.input)?;
        if let Some(cap) = a.cap {
            ds = ecg_wvd::ingest::stratified_subset(&ds, cap, mix_seed(cfg.seed, 0x7a, 0));
        }
        if cfg.schedule.augment {
            let target = class_distribution(&ds).values().copied().max().unwrap_or(1);
            ds = balance_classes(&ds, &AugmentPlan::noise(target, mix_seed(cfg.seed, 0xa6, 0)));
        }
        ImageSet::from_dataset(&ds, &BeatTransform::new(tcfg))
    };
    if a.cap == Some(0) {
        return Err(CliError::invalid("--cap must be at least 1"));
    }
    let mut arch = cfg.schedule.arch_config();
    arch.input_size = set.rows;
    if set.rows != set.cols {
        return Err(CliError::invalid(format!("images must be square, got {}x{}", set.rows, set.cols)));
    }
    let mut net = Network::<f32>::new(arch, mix_seed(cfg.seed, 0x1417, 0))?;
    let history = fit_with(&mut net, &set, &cfg.schedule, cfg.seed, &mut print_epoch)?;

    create_dir(&a.out_dir)?;
    save_model(&mut net, &a.out_dir.join(MODEL_FILE))?;
    let (trainable, total) = net.param_counts();
    let counts: std::collections::BTreeMap<_, _> = set
        .labels
        .iter()
        .fold(std::collections::BTreeMap::new(), |mut m, l| {
            *m.entry(l.code()).or_insert(0usize) += 1;
            m
        });
    let manifest = json!({
        "seed": cfg.seed,
        "config": cfg,
        "input": a.input.display().to_string(),
        "train_counts": counts,
        "trainable_params": trainable,
        "total_params": total,
        "epochs_run": history.epochs.len(),
        "stopped_early_at": history.stopped_early_at,
    });
    write_file(&a.out_dir.join(MANIFEST_JSON), &to_json(&manifest))?;
    write_file(&a.out_dir.join(HISTORY_JSON), &to_json(&history.epochs))?;
    write_file(&a.out_dir.join(TIMINGS_JSON), &to_json(&history.wall_times_s))?;
    Ok(())
}

/// Stratified cap on a labelled index list.
fn capped_indices(labels: &[ClassLabel], cap: usize, seed: u64) -> Vec<usize> {
    let tagged = Dataset::new(
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| BeatRecord::new(vec![i as f64], l))
            .collect(),
        SplitTag::Train,
    );
    ecg_wvd::ingest::stratified_subset(&tagged, cap, mix_seed(seed, 0x7a, 0))
        .records
        .iter()
        .map(|r| r.samples[0] as usize)
        .collect()
}

fn model_transform(net: &Network<f32>, cfg: &ReproduceConfig) -> TransformConfig {
    TransformConfig {
        size: net.arch().input_size,
        ..cfg.effective_transform()
    }
}

fn eval(a: EvalArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(seed, &a.transform, None)?;
    let net = load_model(&a.model)?;
    // the ramp is stripped inside `evaluate`, so beats are transformed with it
    let tcfg = TransformConfig {
        ramp_strength: cfg.transform.ramp_strength,
        ..model_transform(&net, &cfg)
    };
    let set = load_images(&a.input, &tcfg)?;
    let report = evaluate(
        &net,
        &set,
        EvalOptions {
            no_ramp: cfg.no_ramp,
            drop_q: a.drop_q,
        },
    )?;
    if let Some(dir) = &a.out_dir {
        write_report(&report, dir)?;
    }
    if a.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(REPORT_TXT), &report.to_text())?;
    write_file(&dir.join(REPORT_JSON), &report.to_json())?;
    write_file(&dir.join(CONFUSION_CSV), &report.confusion_matrix.to_csv())?;
    Ok(())
}

fn classify(a: ClassifyArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(seed, &a.transform, None)?;
    let net = load_model(&a.model)?;
    let set = load_images(&a.input, &model_transform(&net, &cfg))?;
    let probs = predict_set(&net, &set, 64)?;
    let mut out = String::from("index,class");
    for c in ClassLabel::ALL {
        out.push_str(&format!(",p_{c}"));
    }
    out.push('\n');
    for (i, p) in probs.iter().enumerate() {
        let class = ecg_wvd::model::argmax_class(p, |_| true);
        out.push_str(&format!("{i},{class}"));
        for v in p {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    match &a.out {
        Some(path) => write_file(path, &out)?,
        None => std::io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| CliError::Io(e.to_string()))?,
    }
    Ok(())
}

fn run_bench(a: BenchArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(seed, &a.transform, None)?;
    let net = match &a.model {
        Some(path) => load_model(path)?,
        None => Network::<f32>::new(ArchConfig::compact(), cfg.seed)?,
    };
    let ds = match &a.input {
        Some(path) => load_beat_csv(path)?,
        None => balanced(20, cfg.seed, SplitTag::Test),
    };
    let report = bench(&net, &ds, a.n, model_transform(&net, &cfg))?;
    let text = to_json(&report);
    if let Some(path) = &a.out {
        write_file(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_reproduce(a: ReproduceArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = resolve_config(seed, &a.transform, Some(&a.schedule))?;
    if a.train_cap.is_some() {
        cfg.train_cap_per_class = a.train_cap;
    }
    if a.test_cap.is_some() {
        cfg.test_cap_per_class = a.test_cap;
    }
    if cfg.train_cap_per_class == Some(0) || cfg.test_cap_per_class == Some(0) {
        return Err(CliError::invalid("caps must be at least 1"));
    }
    cfg.drop_q |= a.drop_q;
    let (train_path, test_path) = match (a.train, a.test) {
        (Some(train), Some(test)) => (train, test),
        _ => {
            let dir = a.data_dir.unwrap_or_else(data_dir);
            dataset_files(&dir).ok_or_else(|| {
                CliError::Io(format!(
                    "{} does not hold {} and {}",
                    dir.display(),
                    ecg_wvd::pipeline::TRAIN_FILE,
                    ecg_wvd::pipeline::TEST_FILE
                ))
            })?
        }
    };
    let train = load_beat_csv_as(&train_path, SplitTag::Train)?;
    let test = load_beat_csv_as(&test_path, SplitTag::Test)?;
    let mut outcome = reproduce(&train, &test, &cfg, &mut print_epoch)?;
    write_outcome(&mut outcome, &a.out_dir)?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

fn export_images(a: ExportArgs) -> Result<()> {
    let set = read_tensor(&a.input)?;
    create_dir(&a.out_dir)?;
    let n = a.limit.unwrap_or(set.len()).min(set.len());
    for i in 0..n {
        let path = a.out_dir.join(format!("{i:05}_{}.png", set.labels[i]));
        write_png(set.image(i), set.rows, set.cols, &path)?;
    }
    eprintln!("{n} images written to {}", a.out_dir.display());
    Ok(())
}
