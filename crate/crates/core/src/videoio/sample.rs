use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};

/// How clip frames are picked from a longer video.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStrategy {
    /// Evenly spaced over the whole video.
    #[default]
    Uniform,
    /// The first `n` frames.
    Front,
    /// `n` contiguous frames centred on the middle frame.
    Center,
}

impl FromStr for FrameStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "front" => Ok(Self::Front),
            "center" => Ok(Self::Center),
            other => Err(Error::Config(format!("unknown frame strategy {other:?}"))),
        }
    }
}

impl fmt::Display for FrameStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Front => "front",
            Self::Center => "center",
        })
    }
}

/// Source indices for a clip of `n` frames out of `len`.
///
/// Videos shorter than `n` contribute every frame and are padded by repeating
/// the last one.
pub fn sample_indices(len: usize, n: usize, strategy: FrameStrategy) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Empty("cannot sample frames from an empty sequence".into()));
    }
    if n == 0 {
        return Err(Error::OutOfRange("sample count must be at least 1".into()));
    }
    if len < n {
        return Ok((0..n).map(|j| j.min(len - 1)).collect());
    }
    Ok(match strategy {
        FrameStrategy::Uniform if n == 1 => vec![0],
        // round(j·(len−1)/(n−1)) in integer arithmetic
        FrameStrategy::Uniform => (0..n).map(|j| (2 * j * (len - 1) + (n - 1)) / (2 * (n - 1))).collect(),
        FrameStrategy::Front => (0..n).collect(),
        FrameStrategy::Center => {
            let start = (len / 2).saturating_sub(n / 2).min(len - n);
            (start..start + n).collect()
        }
    })
}

pub fn sample_frames(seq: &FrameSequence, n: usize, strategy: FrameStrategy) -> Result<FrameSequence> {
    let idx = sample_indices(seq.len(), n, strategy)?;
    let frames = idx.iter().map(|&i| seq.frames()[i].clone()).collect();
    let mut out = FrameSequence::new(frames)?;
    out.frame_rate = seq.frame_rate;
    out.mos = seq.mos();
    Ok(out)
}
