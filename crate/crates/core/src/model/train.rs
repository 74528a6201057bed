//! Loss, optimizers, schedules and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{ArchConfig, FreezeSpec, HeadKind, Mode, Network};
use super::tensor::{Scalar, Tensor};
use super::ModelError;
use crate::images::ImageSet;
use crate::ingest::{mix_seed, ClassLabel};

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_L2: f64 = 1e-4;
pub const PRESET_COUNT: u8 = 10;
/// Epoch cap for early-stopping presets, which list no epoch count.
pub const EARLY_STOP_EPOCH_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    SgdMinibatch { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-7,
        }
    }

    pub fn sgd() -> Self {
        Self::SgdMinibatch { momentum: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrPolicy {
    Fixed,
    /// `η·rate^⌊epoch/period⌋`.
    StepDecay { rate: f64, period_epochs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValAcc,
    Acc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub min_delta: f64,
    pub patience: usize,
    pub monitor: Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    Compact,
    Baseline,
}

/// One training configuration. Unset JSON fields take preset 10's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub preset: Option<u8>,
    pub arch: ArchVariant,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_policy: LrPolicy,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop: Option<EarlyStop>,
    pub val_fraction: f64,
    pub head: HeadKind,
    pub freeze: FreezeSpec,
    /// Train on noise-balanced classes.
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::preset(10).expect("preset 10 exists")
    }
}

impl TrainSchedule {
    /// Named schedules 1 to 10.
    pub fn preset(n: u8) -> Result<Self, ModelError> {
        let early = |monitor| {
            Some(EarlyStop {
                min_delta: 0.0005,
                patience: 5,
                monitor,
            })
        };
        let adam = Self {
            preset: Some(n),
            arch: ArchVariant::Compact,
            optimizer: OptimizerKind::adam(),
            learning_rate: DEFAULT_LEARNING_RATE,
            lr_policy: LrPolicy::Fixed,
            l2: DEFAULT_L2,
            batch_size: 32,
            epochs: EARLY_STOP_EPOCH_CAP,
            early_stop: None,
            val_fraction: 0.0,
            head: HeadKind::None,
            freeze: FreezeSpec::None,
            augment: false,
        };
        let sgd = Self {
            optimizer: OptimizerKind::sgd(),
            batch_size: 64,
            ..adam.clone()
        };
        let decay = |period_epochs| LrPolicy::StepDecay {
            rate: 0.5,
            period_epochs,
        };
        let s = match n {
            1 => Self {
                arch: ArchVariant::Baseline,
                epochs: 9,
                ..sgd
            },
            2 => Self {
                epochs: 8,
                val_fraction: 0.2,
                ..sgd
            },
            3 => Self {
                early_stop: early(Monitor::Acc),
                ..adam
            },
            4 => Self {
                early_stop: early(Monitor::Acc),
                freeze: FreezeSpec::Stem,
                ..adam
            },
            5 => Self {
                early_stop: early(Monitor::ValAcc),
                val_fraction: 0.2,
                freeze: FreezeSpec::StemAndStage1,
                ..adam
            },
            6 => Self {
                early_stop: early(Monitor::Acc),
                freeze: FreezeSpec::StemAndStage1,
                ..adam
            },
            7 => Self {
                lr_policy: decay(20),
                head: HeadKind::Dense64,
                freeze: FreezeSpec::StemAndStage1,
                ..adam
            },
            8 => Self {
                lr_policy: decay(20),
                freeze: FreezeSpec::StemAndStage1,
                ..adam
            },
            9 => Self {
                lr_policy: decay(5),
                epochs: 30,
                freeze: FreezeSpec::StemAndStage1,
                augment: true,
                ..adam
            },
            10 => Self {
                lr_policy: decay(5),
                epochs: 30,
                freeze: FreezeSpec::StemAndStage1,
                ..adam
            },
            _ => return Err(ModelError::Config(format!("preset must be 1-{PRESET_COUNT}, got {n}"))),
        };
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if let LrPolicy::StepDecay { rate, period_epochs } = self.lr_policy {
            if period_epochs == 0 || !(rate > 0.0 && rate.is_finite()) {
                return bad("step decay needs a positive rate and period");
            }
        }
        if let Some(es) = self.early_stop {
            if es.monitor == Monitor::ValAcc && self.val_fraction == 0.0 {
                return bad("early stopping on val_acc needs val_fraction > 0");
            }
            if es.patience == 0 {
                return bad("patience must be at least 1");
            }
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_policy {
            LrPolicy::Fixed => self.learning_rate,
            LrPolicy::StepDecay { rate, period_epochs } => {
                self.learning_rate * rate.powi((epoch / period_epochs) as i32)
            }
        }
    }

    pub fn arch_config(&self) -> ArchConfig {
        let base = match self.arch {
            ArchVariant::Compact => ArchConfig::compact(),
            ArchVariant::Baseline => ArchConfig::baseline(),
        };
        base.with_head(self.head)
    }
}

/// Mean `−ln p[true]` computed from logits through log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[ClassLabel]) -> f64 {
    let k = logits.sample_len();
    let total: f64 = logits
        .data
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, l)| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            lse - row[l.ordinal()].as_f64()
        })
        .sum();
    total / labels.len() as f64
}

/// Cross-entropy on probability rows plus `λ·Σ‖W‖²` over conv and dense
/// weights.
pub fn loss<T: Scalar>(probs: &Tensor<T>, labels: &[ClassLabel], net: &mut Network<T>, l2: f64) -> f64 {
    let k = probs.sample_len();
    let ce: f64 = probs
        .data
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, l)| -row[l.ordinal()].as_f64().ln())
        .sum::<f64>()
        / labels.len() as f64;
    ce + l2 * net.l2_penalty().as_f64()
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[ClassLabel]) -> usize {
    let k = logits.sample_len();
    logits
        .data
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, l)| {
            let probs: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            super::argmax_class(&probs, |_| true) == **l
        })
        .count()
}

/// Per-parameter optimizer state, indexed in `visit_params` order.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients of every trainable parameter.
    pub fn apply(&mut self, net: &mut Network<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut idx = 0;
        net.visit_params(&mut |p| {
            let i = idx;
            idx += 1;
            if first.len() <= i {
                first.push(vec![T::zero(); p.param.value.len()]);
                second.push(Vec::new());
            }
            if p.frozen {
                return;
            }
            match self.kind {
                OptimizerKind::SgdMinibatch { momentum } => {
                    let lr = T::from_f64_lossy(lr);
                    if momentum == 0.0 {
                        for (w, &g) in p.param.value.iter_mut().zip(p.param.grad.iter()) {
                            *w -= lr * g;
                        }
                    } else {
                        let mu = T::from_f64_lossy(momentum);
                        for ((w, &g), v) in p.param.value.iter_mut().zip(p.param.grad.iter()).zip(first[i].iter_mut()) {
                            *v = mu * *v - lr * g;
                            *w += *v;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    if second[i].is_empty() {
                        second[i] = vec![T::zero(); p.param.value.len()];
                    }
                    let lr_t = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let (lr_t, eps) = (T::from_f64_lossy(lr_t), T::from_f64_lossy(epsilon));
                    let one = T::one();
                    for (((w, &g), m), v) in p
                        .param
                        .value
                        .iter_mut()
                        .zip(p.param.grad.iter())
                        .zip(first[i].iter_mut())
                        .zip(second[i].iter_mut())
                    {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *w -= lr_t * *m / (v.sqrt() + eps);
                    }
                }
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Cross-entropy plus the L2 term.
    pub loss: f64,
    pub correct: usize,
}

/// One optimizer step on a batch in training mode.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    x: &Tensor<T>,
    labels: &[ClassLabel],
    lr: f64,
    l2: f64,
) -> Result<StepOutcome, ModelError> {
    let logits = net.logits(x, Mode::Train)?;
    let loss = cross_entropy(&logits, labels) + l2 * net.l2_penalty().as_f64();
    if !loss.is_finite() {
        return Err(ModelError::Divergence {
            epoch: 0,
            step: opt.steps() as usize,
            loss,
        });
    }
    let correct = count_correct(&logits, labels);

    let mut dlogits = super::layers::softmax(&logits);
    let k = dlogits.sample_len();
    let scale = T::from_f64_lossy(1.0 / labels.len() as f64);
    for (row, l) in dlogits.data.chunks_exact_mut(k).zip(labels) {
        row[l.ordinal()] -= T::one();
        row.iter_mut().for_each(|v| *v = *v * scale);
    }
    net.zero_grad();
    net.backward(&dlogits, false);
    if l2 > 0.0 {
        let two_l2 = T::from_f64_lossy(2.0 * l2);
        net.visit_params(&mut |p| {
            if p.param.decay && !p.frozen {
                for (g, &w) in p.param.grad.iter_mut().zip(p.param.value.iter()) {
                    *g += two_l2 * w;
                }
            }
        });
    }
    opt.apply(net, lr);
    Ok(StepOutcome { loss, correct })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Seconds per epoch; kept apart from `epochs` so the latter is
    /// reproducible.
    pub wall_times_s: Vec<f64>,
    pub stopped_early_at: Option<usize>,
    pub train_count: usize,
    pub val_count: usize,
}

/// Keras-style early stopping: an epoch counts as an improvement only when
/// the monitored value beats the best so far by more than `min_delta`.
#[derive(Debug, Clone)]
struct Stopper {
    cfg: EarlyStop,
    best: f64,
    wait: usize,
}

impl Stopper {
    fn new(cfg: EarlyStop) -> Self {
        Self {
            cfg,
            best: f64::NEG_INFINITY,
            wait: 0,
        }
    }

    fn should_stop(&mut self, stats: &EpochStats) -> bool {
        let current = match self.cfg.monitor {
            Monitor::Acc => stats.train_acc,
            Monitor::ValAcc => stats.val_acc.unwrap_or(f64::NEG_INFINITY),
        };
        if current - self.cfg.min_delta > self.best {
            self.best = current;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.cfg.patience
    }
}

/// Loss and accuracy in inference mode.
pub fn evaluate_loss<T: Scalar>(
    net: &mut Network<T>,
    set: &ImageSet,
    indices: &[usize],
    batch: usize,
    l2: f64,
) -> Result<(f64, f64), ModelError> {
    let (mut ce, mut correct) = (0.0, 0);
    for chunk in indices.chunks(batch.max(1)) {
        let logits = net.infer_logits(&set.batch_tensor(chunk))?;
        let labels: Vec<ClassLabel> = chunk.iter().map(|&i| set.labels[i]).collect();
        ce += cross_entropy(&logits, &labels) * chunk.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    let n = indices.len() as f64;
    Ok((ce / n + l2 * net.l2_penalty().as_f64(), correct as f64 / n))
}

/// [`fit_with`] without a progress callback.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    set: &ImageSet,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainHistory, ModelError> {
    fit_with(net, set, schedule, seed, &mut |_| {})
}

/// Trains for `schedule.epochs` epochs or until early stopping. With
/// `val_fraction > 0` a seeded shuffle holds out the trailing fraction.
pub fn fit_with<T: Scalar>(
    net: &mut Network<T>,
    set: &ImageSet,
    schedule: &TrainSchedule,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainHistory, ModelError> {
    schedule.validate()?;
    if set.is_empty() {
        return Err(ModelError::EmptyData);
    }
    net.set_freeze(schedule.freeze);

    let mut order: Vec<usize> = (0..set.len()).collect();
    let n_val = (set.len() as f64 * schedule.val_fraction).round() as usize;
    if n_val > 0 {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5a11, 0)));
    }
    if n_val >= set.len() {
        return Err(ModelError::Config("validation split leaves no training data".into()));
    }
    let (mut train_idx, val_idx) = {
        let (t, v) = order.split_at(set.len() - n_val);
        (t.to_vec(), v.to_vec())
    };

    let mut opt = Optimizer::new(schedule.optimizer);
    let mut stopper = schedule.early_stop.map(Stopper::new);
    let mut history = TrainHistory {
        train_count: train_idx.len(),
        val_count: val_idx.len(),
        ..Default::default()
    };
    for epoch in 0..schedule.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch);
        train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe90c, epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, chunk) in train_idx.chunks(schedule.batch_size).enumerate() {
            let labels: Vec<ClassLabel> = chunk.iter().map(|&i| set.labels[i]).collect();
            let out = train_step(net, &mut opt, &set.batch_tensor(chunk), &labels, lr, schedule.l2).map_err(
                |e| match e {
                    ModelError::Divergence { loss, .. } => ModelError::Divergence {
                        epoch: epoch + 1,
                        step,
                        loss,
                    },
                    other => other,
                },
            )?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
        }
        let n = train_idx.len() as f64;
        let (val_loss, val_acc) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_loss(net, set, &val_idx, 64, schedule.l2)?;
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        };
        on_epoch(&stats);
        history.wall_times_s.push(started.elapsed().as_secs_f64());
        let stop = stopper.as_mut().is_some_and(|s| s.should_stop(&stats));
        history.epochs.push(stats);
        if stop {
            history.stopped_early_at = Some(epoch + 1);
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_mirror_the_schedule_table() {
        let p = |n| TrainSchedule::preset(n).unwrap();
        assert_eq!(p(1).arch, ArchVariant::Baseline);
        assert_eq!((p(1).batch_size, p(1).epochs), (64, 9));
        assert_eq!((p(2).epochs, p(2).val_fraction), (8, 0.2));
        assert!(matches!(p(2).optimizer, OptimizerKind::SgdMinibatch { .. }));
        for n in 3..=10 {
            assert_eq!(p(n).batch_size, 32);
            assert_eq!(p(n).optimizer, OptimizerKind::adam());
            assert_eq!(p(n).learning_rate, 0.01);
            assert_eq!(p(n).l2, 1e-4);
        }
        assert_eq!(p(3).freeze, FreezeSpec::None);
        assert_eq!(p(4).freeze, FreezeSpec::Stem);
        assert_eq!(p(5).early_stop.unwrap().monitor, Monitor::ValAcc);
        assert_eq!(p(6).early_stop.unwrap().monitor, Monitor::Acc);
        assert_eq!(p(7).head, HeadKind::Dense64);
        assert!(p(9).augment && !p(10).augment);
        assert_eq!(p(10).epochs, 30);
        assert_eq!(
            p(10).lr_policy,
            LrPolicy::StepDecay {
                rate: 0.5,
                period_epochs: 5
            }
        );
        assert_eq!(TrainSchedule::default(), p(10));
        assert!(TrainSchedule::preset(0).is_err() && TrainSchedule::preset(11).is_err());
        for n in 1..=10 {
            p(n).validate().unwrap();
        }
    }

    #[test]
    fn step_decay_halves_every_period() {
        let s = TrainSchedule::preset(10).unwrap();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(4), 0.01);
        assert_eq!(s.lr_at(5), 0.005);
        assert_eq!(s.lr_at(29), 0.01 / 32.0);
        assert_eq!(TrainSchedule::preset(8).unwrap().lr_at(20), 0.005);
    }

    #[test]
    fn val_monitor_without_val_split_is_rejected() {
        let mut s = TrainSchedule::preset(5).unwrap();
        s.val_fraction = 0.0;
        assert!(matches!(s.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn partial_json_fills_from_default() {
        let s: TrainSchedule = serde_json::from_str(r#"{"epochs": 3, "learning_rate": 0.001}"#).unwrap();
        assert_eq!(s.epochs, 3);
        assert_eq!(s.learning_rate, 0.001);
        assert_eq!(s.batch_size, 32);
        let round: TrainSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(round, s);
    }

    #[test]
    fn frozen_metric_stops_after_patience() {
        let cfg = EarlyStop {
            min_delta: 0.0005,
            patience: 5,
            monitor: Monitor::Acc,
        };
        let mut stopper = Stopper::new(cfg);
        let stats = |epoch| EpochStats {
            epoch,
            lr: 0.01,
            train_loss: 1.0,
            train_acc: 0.5,
            val_loss: None,
            val_acc: None,
        };
        let stop_at = (1..=100).find(|&e| stopper.should_stop(&stats(e))).unwrap();
        assert_eq!(stop_at, 6);
    }

    #[test]
    fn improvement_below_min_delta_does_not_reset_patience() {
        let cfg = EarlyStop {
            min_delta: 0.01,
            patience: 2,
            monitor: Monitor::Acc,
        };
        let mut stopper = Stopper::new(cfg);
        let mk = |acc| EpochStats {
            epoch: 1,
            lr: 0.0,
            train_loss: 0.0,
            train_acc: acc,
            val_loss: None,
            val_acc: None,
        };
        assert!(!stopper.should_stop(&mk(0.5)));
        assert!(!stopper.should_stop(&mk(0.505)));
        assert!(stopper.should_stop(&mk(0.509)));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln5() {
        let logits = Tensor::<f64>::zeros([3, 5, 1, 1]);
        let ce = cross_entropy(&logits, &[ClassLabel::N, ClassLabel::Q, ClassLabel::F]);
        assert!((ce - 5f64.ln()).abs() < 1e-15);
    }
}
