//! Batches of transformed beats, and the tensor file exchanged with other
//! tools.
//!
//! Tensor file: raw little-endian `f32`, row-major `[count, rows, cols]`,
//! no header. The JSON sidecar `<file>.json` carries the shape, ramp
//! strength and one class code per image.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ClassLabel, Dataset};
use crate::model::{Scalar, Tensor};
use crate::tfr::BeatTransform;

pub const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ImagesError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("tensor format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("tensor blob has {found} bytes, sidecar implies {expected}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("sidecar lists {labels} labels for {count} images")]
    LabelCount { labels: usize, count: usize },
    #[error("bad class code in sidecar: {0}")]
    Label(String),
    #[error("png encoding failed: {0}")]
    Png(String),
}

/// Images stored contiguously in single precision, with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub labels: Vec<ClassLabel>,
    pub ramp_strength: f64,
}

impl ImageSet {
    pub fn empty(rows: usize, cols: usize, ramp_strength: f64) -> Self {
        Self {
            rows,
            cols,
            data: Vec::new(),
            labels: Vec::new(),
            ramp_strength,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32], label: ClassLabel) {
        assert_eq!(image.len(), self.pixels(), "image size");
        self.data.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Transforms every beat. Work is spread over the rayon pool; output
    /// order always follows `ds`.
    pub fn from_dataset(ds: &Dataset, transform: &BeatTransform) -> Self {
        let size = transform.config().size;
        let images: Vec<Vec<f32>> = ds
            .records
            .par_iter()
            .map(|r| transform.transform_f32(&r.samples))
            .collect();
        let mut set = Self::empty(size, size, transform.config().ramp_strength);
        for (img, r) in images.iter().zip(&ds.records) {
            set.push(img, r.label);
        }
        set
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.rows, self.cols, self.ramp_strength);
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    pub fn filter_labels(&self, keep: impl Fn(ClassLabel) -> bool) -> Self {
        let indices: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&indices)
    }

    /// `[n, 1, rows, cols]` network input for the given images.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::from_vec([indices.len(), 1, self.rows, self.cols], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub ramp_strength: f64,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    let mut name = tensor_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the tensor blob and its sidecar; returns the sidecar.
pub fn write_tensor(
    set: &ImageSet,
    path: &Path,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<TensorSidecar, ImagesError> {
    let io = |source| ImagesError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for v in &set.data {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)?;

    let sidecar = TensorSidecar {
        version: TENSOR_FORMAT_VERSION,
        dtype: "float32".into(),
        byte_order: "little".into(),
        count: set.len(),
        rows: set.rows,
        cols: set.cols,
        ramp_strength: set.ramp_strength,
        labels: set.labels.iter().map(|l| l.code().to_string()).collect(),
        extra,
    };
    let spath = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&spath, json + "\n").map_err(|source| ImagesError::Io { path: spath, source })?;
    Ok(sidecar)
}

pub fn read_tensor(path: &Path) -> Result<ImageSet, ImagesError> {
    let spath = sidecar_path(path);
    let text = std::fs::read_to_string(&spath).map_err(|source| ImagesError::Io {
        path: spath.clone(),
        source,
    })?;
    let sidecar: TensorSidecar =
        serde_json::from_str(&text).map_err(|source| ImagesError::Sidecar { path: spath, source })?;
    if sidecar.version != TENSOR_FORMAT_VERSION {
        return Err(ImagesError::Version {
            found: sidecar.version,
            expected: TENSOR_FORMAT_VERSION,
        });
    }
    if sidecar.labels.len() != sidecar.count {
        return Err(ImagesError::LabelCount {
            labels: sidecar.labels.len(),
            count: sidecar.count,
        });
    }
    let bytes = std::fs::read(path).map_err(|source| ImagesError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let expected = (sidecar.count * sidecar.rows * sidecar.cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(ImagesError::SizeMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let labels = sidecar
        .labels
        .iter()
        .map(|s| s.parse().map_err(ImagesError::Label))
        .collect::<Result<Vec<ClassLabel>, _>>()?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(ImageSet {
        rows: sidecar.rows,
        cols: sidecar.cols,
        data,
        labels,
        ramp_strength: sidecar.ramp_strength,
    })
}

/// 8-bit grayscale PNG of one image, min-max scaled. Row 0 (DC) is written
/// at the bottom so frequency increases upwards.
pub fn write_png(image: &[f32], rows: usize, cols: usize, path: &Path) -> Result<(), ImagesError> {
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in (0..rows).rev() {
        for &v in &image[r * cols..(r + 1) * cols] {
            pixels.push((((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let file = File::create(path).map_err(|source| ImagesError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| ImagesError::Png(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| ImagesError::Png(e.to_string()))
}
