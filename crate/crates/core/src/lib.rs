//! ECG beat classification from Wigner-Ville images.
//!
//! Beats are segmented from raw strips or loaded pre-segmented, turned into
//! 128×128 time-frequency images with an additive time ramp, and classified
//! by a small residual CNN into the AAMI classes N, S, V, F and Q.

pub mod augment;
pub mod eval;
pub mod images;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod segmentation;
pub mod synthetic;
pub mod tfr;
