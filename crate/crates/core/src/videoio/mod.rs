//! Frames, frame sequences, resizing, clip sampling and synthetic videos.

mod io;
mod resize;
mod sample;
mod synth;

pub use io::{load_frames, save_frames_dir, save_raw, Manifest, ManifestEntry, RawHeader};
pub use resize::{resize_shorter_side, resize_to, shorter_side_dims};
pub use sample::{sample_frames, sample_indices, FrameStrategy};
pub use synth::{synth_video, Distortion, Pattern, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel `(x − mean) / std` applied to pixels before embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelNorm {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid channel normalization {self:?}")));
        }
        Ok(())
    }

    /// Normalizes interleaved RGB values.
    pub fn apply(&self, rgb: &[f32]) -> Vec<f64> {
        rgb.iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 - self.mean[i % 3]) / self.std[i % 3])
            .collect()
    }
}

/// Label range used when none is declared (LSVQ convention).
pub const DEFAULT_MOS_RANGE: (f64, f64) = (0.0, 100.0);

/// One RGB frame, values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("frame", format!("{height}x{width} frame")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "frame",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shorter_side(&self) -> usize {
        self.height.min(self.width)
    }

    pub fn longer_side(&self) -> usize {
        self.height.max(self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Builds a frame without range validation; callers guarantee `[0, 1]`.
    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self { height, width, data }
    }
}

/// Ordered frames sharing one size, with an optional quality label.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    pub frame_rate: Option<f64>,
    mos: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let (h, w) = (first.height, first.width);
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.height != h || f.width != w) {
                return Err(Error::InconsistentDimensions(format!(
                    "frame {i} is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
        }
        Ok(Self {
            frames,
            frame_rate: None,
            mos: None,
        })
    }

    /// Attaches a label, checked against the default `[0, 100]` range.
    pub fn with_mos(self, mos: f64) -> Result<Self> {
        self.with_mos_in(mos, DEFAULT_MOS_RANGE)
    }

    pub fn with_mos_in(mut self, mos: f64, range: (f64, f64)) -> Result<Self> {
        if !(range.0..=range.1).contains(&mos) {
            return Err(Error::OutOfRange(format!(
                "mos {mos} outside [{}, {}]",
                range.0, range.1
            )));
        }
        self.mos = Some(mos);
        Ok(self)
    }

    pub fn mos(&self) -> Option<f64> {
        self.mos
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the frames, if any.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height, f.width))
    }
}
