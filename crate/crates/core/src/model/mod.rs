//! Compact residual CNN, trained from scratch.

mod io;
pub mod layers;
mod network;
mod tensor;
pub mod train;

use thiserror::Error;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use network::{ArchConfig, FreezeSpec, HeadKind, Mode, Network, ParamInfo};
pub use tensor::{Scalar, Tensor};
pub use train::{fit, fit_with, EpochStats, TrainHistory, TrainSchedule};

use crate::images::ImageSet;
use crate::ingest::ClassLabel;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Shape(String),
    #[error("expected input [n, {}, {}, {}], got {got:?}", expected[0], expected[1], expected[2])]
    InputShape { expected: [usize; 3], got: [usize; 4] },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("model format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model data truncated: expected {expected} values, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("model header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("no training data")]
    EmptyData,
}

/// Highest-probability class among those accepted by `allowed`. Ties go to
/// the class listed first in report order (F, N, Q, S, V). `probs` is
/// indexed by file ordinal.
pub fn argmax_class(probs: &[f64], allowed: impl Fn(ClassLabel) -> bool) -> ClassLabel {
    let mut best: Option<(ClassLabel, f64)> = None;
    for class in ClassLabel::REPORT_ORDER {
        if !allowed(class) {
            continue;
        }
        let p = probs[class.ordinal()];
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((class, p));
        }
    }
    best.expect("at least one class allowed").0
}

/// Class and probabilities (file-ordinal order) for one `rows×cols` image.
pub fn predict(net: &Network<f32>, image: &[f32]) -> Result<(ClassLabel, Vec<f64>), ModelError> {
    let size = net.arch().input_size;
    if image.len() != size * size {
        return Err(ModelError::InputShape {
            expected: [1, size, size],
            got: [1, 1, 1, image.len()],
        });
    }
    let x = Tensor::from_vec([1, 1, size, size], image.to_vec());
    let probs: Vec<f64> = net.infer(&x)?.data.iter().map(|&p| p as f64).collect();
    Ok((argmax_class(&probs, |_| true), probs))
}

/// Inference-mode probabilities for every image, in chunks of `batch`.
pub fn predict_set(net: &Network<f32>, set: &ImageSet, batch: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let probs = net.infer(&set.batch_tensor(chunk))?;
        let k = probs.sample_len();
        out.extend(probs.data.chunks_exact(k).map(|r| r.iter().map(|&p| p as f64).collect()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_probabilities_pick_f() {
        assert_eq!(argmax_class(&[0.2; 5], |_| true), ClassLabel::F);
    }

    #[test]
    fn one_hot_picks_its_class() {
        let mut p = vec![0.0; 5];
        p[ClassLabel::V.ordinal()] = 1.0;
        assert_eq!(argmax_class(&p, |_| true), ClassLabel::V);
    }

    #[test]
    fn excluded_classes_are_skipped() {
        let mut p = vec![0.1; 5];
        p[ClassLabel::Q.ordinal()] = 0.6;
        p[ClassLabel::S.ordinal()] = 0.2;
        assert_eq!(argmax_class(&p, |c| c != ClassLabel::Q), ClassLabel::S);
    }
}
