use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Dense, Dropout, Layer, MaxPool2d, Param, Relu, ResidualBlock};
use super::tensor::{Scalar, Tensor};
use super::ModelError;
use crate::ingest::mix_seed;

/// Extra fully connected layers between the flattened features and the
/// 5-way output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    None,
    Dense64,
    Dense1024Drop50Dense64,
}

/// Architecture description; also the JSON stored in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub stem_filters: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 3×3 stride-2 max pool after the stem.
    pub stem_pool: bool,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Square max-pool window (and stride) before flattening; 1 disables it.
    pub head_pool: usize,
    pub head: HeadKind,
    pub num_classes: usize,
}

impl ArchConfig {
    /// Default desk-scale model: 7×7/2 stem with 64 filters, 3×3/2 pool,
    /// three stages of two blocks at widths 16/32/64, 2×2 pool, FC(5).
    pub fn compact() -> Self {
        Self {
            input_size: crate::tfr::IMAGE_SIZE,
            stem_filters: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            head_pool: 2,
            head: HeadKind::None,
            num_classes: 5,
        }
    }

    /// Smallest configuration (the "Baseline" schedule).
    pub fn baseline() -> Self {
        Self {
            stem_filters: 16,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            ..Self::compact()
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSpec {
    None,
    /// Stem conv/BN.
    Stem,
    /// Stem plus the first residual stage.
    StemAndStage1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches for backward, dropout active.
    Train,
    /// Moving statistics, no caching.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Stem,
    Stage(usize),
    Head,
}

pub struct ParamInfo<'a, T> {
    pub param: Param<'a, T>,
    pub frozen: bool,
}

/// Residual CNN over `[n, 1, size, size]` images producing class
/// probabilities. The final dense layer is kept separately from the layer
/// list so it can be inspected directly.
pub struct Network<T: Scalar> {
    arch: ArchConfig,
    seed: u64,
    layers: Vec<Box<dyn Layer<T>>>,
    groups: Vec<Group>,
    frozen: Vec<bool>,
    output: Dense<T>,
    output_frozen: bool,
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("arch", &self.arch)
            .field("seed", &self.seed)
            .field("layers", &self.layers.iter().map(|l| l.kind()).collect::<Vec<_>>())
            .finish()
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the layer graph with He fan-in initialization; BN starts at
    /// `γ=1, β=0, μ=0, σ²=1` and all biases at zero.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        if arch.num_classes == 0 || arch.stage_widths.is_empty() || arch.blocks_per_stage == 0 {
            return Err(ModelError::Shape("architecture needs classes, stages and blocks".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
        let mut groups = Vec::new();
        let mut push = |layer: Box<dyn Layer<T>>, group: Group, layers: &mut Vec<Box<dyn Layer<T>>>| {
            layers.push(layer);
            groups.push(group);
        };

        let stem_pad = arch.stem_kernel / 2;
        push(
            Box::new(Conv2d::new(1, arch.stem_filters, arch.stem_kernel, arch.stem_stride, stem_pad, true, &mut rng)),
            Group::Stem,
            &mut layers,
        );
        push(Box::new(BatchNorm2d::new(arch.stem_filters)), Group::Stem, &mut layers);
        push(Box::new(Relu::new()), Group::Stem, &mut layers);
        if arch.stem_pool {
            push(Box::new(MaxPool2d::new(3, 2, 1)), Group::Stem, &mut layers);
        }

        let mut ch = arch.stem_filters;
        for (s, &width) in arch.stage_widths.iter().enumerate() {
            for b in 0..arch.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                push(Box::new(ResidualBlock::new(ch, width, stride, &mut rng)), Group::Stage(s), &mut layers);
                ch = width;
            }
        }

        if arch.head_pool > 1 {
            push(Box::new(MaxPool2d::new(arch.head_pool, arch.head_pool, 0)), Group::Head, &mut layers);
        }

        // walk shapes so far to size the dense layers
        let mut shape = [1, arch.input_size, arch.input_size];
        for layer in &layers {
            shape = layer.output_shape(shape).map_err(ModelError::Shape)?;
        }
        let mut features = shape.iter().product::<usize>();
        let hidden: &[(usize, Option<f64>)] = match arch.head {
            HeadKind::None => &[],
            HeadKind::Dense64 => &[(64, None)],
            HeadKind::Dense1024Drop50Dense64 => &[(1024, Some(0.5)), (64, None)],
        };
        for (i, &(units, dropout)) in hidden.iter().enumerate() {
            push(Box::new(Dense::new(features, units, &mut rng)), Group::Head, &mut layers);
            push(Box::new(Relu::new()), Group::Head, &mut layers);
            if let Some(rate) = dropout {
                let drng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD0, i as u64));
                push(Box::new(Dropout::new(rate, drng)), Group::Head, &mut layers);
            }
            features = units;
        }
        let output = Dense::new(features, arch.num_classes, &mut rng);
        let n = layers.len();
        Ok(Self {
            arch,
            seed,
            layers,
            groups,
            frozen: vec![false; n],
            output,
            output_frozen: false,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_kinds(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.kind()).chain(["dense", "softmax"]).collect()
    }

    pub fn output_layer(&self) -> &Dense<T> {
        &self.output
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense<T> {
        &mut self.output
    }

    pub fn set_freeze(&mut self, spec: FreezeSpec) {
        for (flag, group) in self.frozen.iter_mut().zip(&self.groups) {
            *flag = match spec {
                FreezeSpec::None => false,
                FreezeSpec::Stem => *group == Group::Stem,
                FreezeSpec::StemAndStage1 => matches!(group, Group::Stem | Group::Stage(0)),
            };
        }
    }

    /// Freezes everything including the output layer (a training run then
    /// leaves all parameters untouched).
    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
        self.output_frozen = true;
    }

    /// Per-sample shape after the stem (conv + pool).
    pub fn stem_output_shape(&self) -> [usize; 3] {
        let mut shape = [1, self.arch.input_size, self.arch.input_size];
        for (layer, group) in self.layers.iter().zip(&self.groups) {
            if *group != Group::Stem {
                break;
            }
            shape = layer.output_shape(shape).expect("validated at construction");
        }
        shape
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let expected = [1, self.arch.input_size, self.arch.input_size];
        let got = [x.shape[1], x.shape[2], x.shape[3]];
        if got != expected || x.batch() == 0 {
            return Err(ModelError::InputShape { expected, got: x.shape });
        }
        Ok(())
    }

    /// Raw logits.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, ModelError> {
        if mode == Mode::Infer {
            return self.infer_logits(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in self.layers.iter_mut() {
            h = layer.forward_train(&h);
        }
        Ok(self.output.forward_train(&h))
    }

    pub fn infer_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h);
        }
        Ok(self.output.infer(&h))
    }

    /// Class probabilities `[n, classes, 1, 1]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, ModelError> {
        Ok(super::layers::softmax(&self.logits(x, mode)?))
    }

    /// Read-only inference with moving statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(super::layers::softmax(&self.infer_logits(x)?))
    }

    /// Back-propagates a logits gradient from the last `Mode::Train` pass,
    /// stopping at the first trainable layer. With `want_input_grad` and no
    /// frozen layers, returns the gradient with respect to the images.
    pub fn backward(&mut self, dlogits: &Tensor<T>, want_input_grad: bool) -> Option<Tensor<T>> {
        let len = self.layers.len();
        let first_trainable = self.frozen.iter().position(|f| !f).unwrap_or(len);
        let mut g = self.output.backward(dlogits, first_trainable < len)?;
        for i in (first_trainable..len).rev() {
            let need = i > first_trainable || (i == 0 && want_input_grad);
            g = self.layers[i].backward(&g, need)?;
        }
        Some(g)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.param.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamInfo<'_, T>)) {
        for (layer, &frozen) in self.layers.iter_mut().zip(&self.frozen) {
            layer.visit_params(&mut |param| f(ParamInfo { param, frozen }));
        }
        let frozen = self.output_frozen;
        self.output.visit_params(&mut |param| f(ParamInfo { param, frozen }));
    }

    /// Every persisted tensor in a fixed order: per layer, parameters then
    /// moving statistics.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for layer in self.layers.iter_mut() {
            layer.visit_params(&mut |p| f(p.value));
            layer.visit_buffers(f);
        }
        self.output.visit_params(&mut |p| f(p.value));
    }

    pub fn state_vector(&mut self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_state(&mut |s| out.extend_from_slice(s));
        out
    }

    /// Overwrites all state from a flat vector in [`Network::visit_state`] order.
    pub fn load_state(&mut self, values: &[T]) -> Result<(), ModelError> {
        let expected = self.state_len();
        if values.len() != expected {
            return Err(ModelError::Truncated {
                expected,
                got: values.len(),
            });
        }
        let mut at = 0;
        self.visit_state(&mut |s| {
            s.copy_from_slice(&values[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    pub fn state_len(&mut self) -> usize {
        let mut n = 0;
        self.visit_state(&mut |s| n += s.len());
        n
    }

    /// `(trainable, total)` parameter counts, moving statistics excluded.
    pub fn param_counts(&mut self) -> (usize, usize) {
        let (mut trainable, mut total) = (0, 0);
        self.visit_params(&mut |p| {
            total += p.param.value.len();
            if !p.frozen {
                trainable += p.param.value.len();
            }
        });
        (trainable, total)
    }

    /// `Σ‖W‖²` over conv and dense weights.
    pub fn l2_penalty(&mut self) -> T {
        let mut s = T::zero();
        self.visit_params(&mut |p| {
            if p.param.decay {
                s += p.param.value.iter().map(|&w| w * w).sum::<T>();
            }
        });
        s
    }

    /// Holds dropout masks fixed across forward passes.
    pub fn freeze_dropout_masks(&mut self, freeze: bool) {
        for layer in self.layers.iter_mut() {
            layer.freeze_random(freeze);
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&mut self) -> Network<U> {
        let mut out = Network::<U>::new(self.arch.clone(), self.seed).expect("same arch builds");
        let values: Vec<U> = self
            .state_vector()
            .into_iter()
            .map(|v| U::from_f64_lossy(v.as_f64()))
            .collect();
        out.load_state(&values).expect("same layout");
        out.frozen = self.frozen.clone();
        out.output_frozen = self.output_frozen;
        out
    }
}
