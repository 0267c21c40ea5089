//! Thresholded inference with per-frame timing.

use std::time::Instant;

use crate::data::{crop_to_original, pad_to_multiple, VolumeRecord};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{forward, ModelParams};
use crate::tensor::{Shape, Tensor};

/// Foreground probabilities for a `(1,1,H,W)` frame of any size. The frame is
/// zero-padded to the network's size multiple and the output cropped back.
pub fn predict_probs(params: &ModelParams, frame: &Tensor) -> Result<Tensor> {
    let s = frame.shape();
    if s.n() != 1 || s.c() != params.config().in_channels {
        return Err(Error::shape(format!("expected a single {}-channel frame, got {s}", params.config().in_channels)));
    }
    let (padded, info) = pad_to_multiple(frame);
    let probs = forward(params, &padded)?;
    if probs.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    crop_to_original(&probs, &info)
}

/// Pixels with probability at or above `threshold`.
pub fn infer_frame(params: &ModelParams, frame: &Tensor, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let probs = predict_probs(params, frame)?;
    let s = probs.shape();
    BinaryMask::threshold(s.h(), s.w(), probs.data(), threshold)
}

/// Wall-clock seconds spent in forward pass plus thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingStats {
    pub per_frame: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub total: f64,
}

impl TimingStats {
    pub fn from_samples(per_frame: Vec<f64>) -> Self {
        let total: f64 = per_frame.iter().sum();
        let n = per_frame.len();
        let mut sorted = per_frame.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        let mean = if n == 0 { 0.0 } else { total / n as f64 };
        TimingStats { per_frame, mean, median, total }
    }
}

/// Segments every frame of a volume. Returns the `(F,1,h,w)` binary masks at
/// the volume's original (unpadded) size.
pub fn infer_volume(params: &ModelParams, volume: &VolumeRecord, threshold: f64) -> Result<(Tensor, TimingStats)> {
    let (h, w) = volume.pad.original_hw;
    let mut masks = Vec::with_capacity(volume.n_frames() * h * w);
    let mut times = Vec::with_capacity(volume.n_frames());
    for f in 0..volume.n_frames() {
        let frame = crop_to_original(&volume.frames.slice_batch(f..f + 1)?, &volume.pad)?;
        let start = Instant::now();
        let mask = infer_frame(params, &frame, threshold)?;
        times.push(start.elapsed().as_secs_f64());
        masks.extend(mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    let out = Tensor::new(Shape::new(volume.n_frames(), 1, h, w), masks)?;
    Ok((out, TimingStats::from_samples(times)))
}
