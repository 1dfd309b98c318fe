//! Multi-resolution tokenization.
//!
//! Consecutive frames are grouped by `N` and resized into a pyramid whose
//! shorter sides are `L, …, 2L/N, L/N` (earliest frame largest). A `G×G` grid
//! of `P×P` patches is cut from every pyramid level around one shared
//! alignment centre. At level `i` the pitch between patch centres is
//! `(N − i + 1)·P`, so the grid always spans the level's full shorter side and
//! patch `(r, c)` sits at the same normalized position at every level. The
//! patches for one grid cell, stacked over levels, form a tube.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videoio::{resize_shorter_side, sample_frames, Frame, FrameSequence, FrameStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiResConfig {
    /// Frames per group, and pyramid levels (`N`).
    pub scales: usize,
    /// Shorter side of the largest level, in pixels (`L`).
    pub largest_side: usize,
    /// Patch side in pixels (`P`).
    pub patch_size: usize,
    /// Patches per grid side (`G`).
    pub grid_size: usize,
}

impl Default for MultiResConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            largest_side: 896,
            patch_size: 16,
            grid_size: 14,
        }
    }
}

impl MultiResConfig {
    pub fn validate(&self) -> Result<()> {
        let Self {
            scales: n,
            largest_side: l,
            patch_size: p,
            grid_size: g,
        } = *self;
        if n == 0 || p == 0 || g == 0 {
            return Err(Error::Config("scales, patch_size and grid_size must be at least 1".into()));
        }
        if l % n != 0 {
            return Err(Error::Config(format!("largest_side {l} is not divisible by scales {n}")));
        }
        if g * p != l / n {
            return Err(Error::Config(format!(
                "grid_size·patch_size = {} must equal largest_side/scales = {}",
                g * p,
                l / n
            )));
        }
        Ok(())
    }

    /// Tokens per group before the classification token (`M = G²`).
    pub fn tokens(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Values in one flattened tube, `N·P·P·3`.
    pub fn tube_len(&self) -> usize {
        self.scales * self.patch_len()
    }

    /// Values in one flattened patch, `P·P·3`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Shorter side of level `i` (1-based): `(N − i + 1)·L/N`.
    pub fn scale_side(&self, i: usize) -> usize {
        (self.scales - i + 1) * self.largest_side / self.scales
    }

    /// Distance between patch centres at level `i`: `(N − i + 1)·P`.
    pub fn pitch(&self, i: usize) -> usize {
        (self.scales - i + 1) * self.patch_size
    }

    /// Gap between adjacent patch edges at level `i`: `(N − i)·P`.
    pub fn gap(&self, i: usize) -> usize {
        (self.scales - i) * self.patch_size
    }

    /// `(shorter side, pitch)` per group frame for a sampling mode.
    pub fn layout(&self, mode: SamplingMode) -> Vec<ScaleLayout> {
        let n = self.scales;
        let small = self.largest_side / n;
        (1..=n)
            .map(|i| match mode {
                SamplingMode::Mret | SamplingMode::Random => ScaleLayout {
                    side: self.scale_side(i),
                    pitch: self.pitch(i),
                },
                SamplingMode::Fixed => ScaleLayout {
                    side: small,
                    pitch: self.patch_size,
                },
                SamplingMode::HighresLast if i == n => ScaleLayout {
                    side: self.largest_side,
                    pitch: self.patch_size,
                },
                SamplingMode::HighresLast => ScaleLayout {
                    side: small,
                    pitch: self.patch_size,
                },
            })
            .collect()
    }
}

/// Patch sampling scheme. Everything except `Mret` exists for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Centre-aligned grids over the multi-resolution pyramid.
    #[default]
    Mret,
    /// Same pyramid, patches drawn uniformly per level without alignment.
    Random,
    /// Low-resolution grids for the first `N − 1` frames, a high-resolution
    /// crop from the last frame.
    HighresLast,
    /// Every frame at `L/N` with a contiguous grid.
    Fixed,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mret" => Ok(Self::Mret),
            "random" => Ok(Self::Random),
            "highres_last" => Ok(Self::HighresLast),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown sampling mode {other:?}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mret => "mret",
            Self::Random => "random",
            Self::HighresLast => "highres_last",
            Self::Fixed => "fixed",
        })
    }
}

/// Whether the alignment centre is drawn at random or fixed at the middle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterMode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ScaleLayout {
    pub side: usize,
    pub pitch: usize,
}

/// The `N` resized frames of one group, in temporal order.
#[derive(Clone, Debug)]
pub struct PyramidGroup {
    pub frames: Vec<Frame>,
    pub layout: Vec<ScaleLayout>,
    pub mode: SamplingMode,
}

/// Splits a sequence into `⌈len/N⌉` groups of exactly `N` frames; the last
/// group is padded by repeating its final frame.
pub fn group_frames(seq: &FrameSequence, n: usize) -> Result<Vec<Vec<&Frame>>> {
    if seq.is_empty() {
        return Err(Error::Empty("cannot group an empty sequence".into()));
    }
    if n == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    Ok(seq
        .frames()
        .chunks(n)
        .map(|chunk| {
            let mut group: Vec<&Frame> = chunk.iter().collect();
            let last = *group.last().expect("chunks are non-empty");
            group.resize(n, last);
            group
        })
        .collect())
}

/// Multi-resolution pyramid: frame `i` gets shorter side `(N − i + 1)·L/N`.
pub fn build_pyramid(group: &[&Frame], cfg: &MultiResConfig) -> Result<PyramidGroup> {
    build_pyramid_for(group, cfg, SamplingMode::Mret)
}

/// Pyramid with the per-frame sizes a sampling mode needs.
pub fn build_pyramid_for(group: &[&Frame], cfg: &MultiResConfig, mode: SamplingMode) -> Result<PyramidGroup> {
    cfg.validate()?;
    if group.len() != cfg.scales {
        return Err(Error::Config(format!(
            "pyramid needs {} frames, got {}",
            cfg.scales,
            group.len()
        )));
    }
    let layout = cfg.layout(mode);
    let frames = group
        .iter()
        .zip(&layout)
        .map(|(f, l)| resize_shorter_side(f, l.side))
        .collect::<Result<Vec<_>>>()?;
    Ok(PyramidGroup { frames, layout, mode })
}

/// Square sampling window inside one pyramid frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub pitch: usize,
}

/// Shared alignment centre: `c` is the normalized position along the longer
/// axis (the shorter axis is always centred), `windows` its realization in
/// each pyramid frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignCenter {
    pub c: f64,
    pub windows: Vec<Window>,
}

/// Valid range for `c`: every window must fit inside its frame.
pub fn center_range(pyr: &PyramidGroup, grid: usize) -> (f64, f64) {
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 1.0;
    for (f, l) in pyr.frames.iter().zip(&pyr.layout) {
        let window = (grid * l.pitch) as f64;
        let long = f.longer_side() as f64;
        lo = lo.max(window / (2.0 * long));
        hi = hi.min(1.0 - window / (2.0 * long));
    }
    (lo, hi)
}

/// Picks the alignment centre: the middle for inference, uniform over the
/// valid range for training.
pub fn choose_center<R: Rng + ?Sized>(
    pyr: &PyramidGroup,
    grid: usize,
    mode: CenterMode,
    rng: &mut R,
) -> AlignCenter {
    let (lo, hi) = center_range(pyr, grid);
    let c = match mode {
        CenterMode::Train if hi > lo => rng.gen_range(lo..=hi),
        _ => 0.5,
    };
    realize_center(pyr, grid, c)
}

/// Places each frame's window for a given normalized centre.
pub fn realize_center(pyr: &PyramidGroup, grid: usize, c: f64) -> AlignCenter {
    let windows = pyr
        .frames
        .iter()
        .zip(&pyr.layout)
        .map(|(f, l)| {
            let side = grid * l.pitch;
            let (h, w) = (f.height(), f.width());
            let place = |extent: usize, pos: f64| -> usize {
                let max = extent.saturating_sub(side);
                let origin = (pos * extent as f64 - side as f64 / 2.0).round();
                (origin.max(0.0) as usize).min(max)
            };
            let (top, left) = if w >= h {
                (place(h, 0.5), place(w, c))
            } else {
                (place(h, c), place(w, 0.5))
            };
            Window {
                top,
                left,
                side,
                pitch: l.pitch,
            }
        })
        .collect();
    AlignCenter { c, windows }
}

/// Pixel centres `(y, x)` of the `G×G` patches at level `scale_index`
/// (1-based), row-major.
pub fn patch_centers(cfg: &MultiResConfig, center: &AlignCenter, scale_index: usize) -> Result<Vec<(f64, f64)>> {
    if scale_index == 0 || scale_index > cfg.scales || scale_index > center.windows.len() {
        return Err(Error::OutOfRange(format!(
            "scale index {scale_index} outside 1..={}",
            cfg.scales
        )));
    }
    let w = center.windows[scale_index - 1];
    let g = cfg.grid_size;
    let half = w.pitch as f64 / 2.0;
    Ok((0..g * g)
        .map(|k| {
            let (r, c) = (k / g, k % g);
            (
                w.top as f64 + (w.pitch * r) as f64 + half,
                w.left as f64 + (w.pitch * c) as f64 + half,
            )
        })
        .collect())
}

/// Top-left corner of one cut patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PatchBox {
    pub scale: usize,
    pub top: usize,
    pub left: usize,
}

/// `G²` tubes of `N` patches each, flattened as `[tube][scale][y][x][rgb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeBatch {
    pub grid: usize,
    pub scales: usize,
    pub patch: usize,
    pub data: Vec<f32>,
    /// Patch boxes per tube, `N` per tube in tube order.
    pub boxes: Vec<PatchBox>,
    pub center: f64,
}

impl TubeBatch {
    pub fn tube_count(&self) -> usize {
        self.grid * self.grid
    }

    pub fn tube_len(&self) -> usize {
        self.scales * self.patch * self.patch * 3
    }

    pub fn tube(&self, k: usize) -> &[f32] {
        let n = self.tube_len();
        &self.data[k * n..(k + 1) * n]
    }

    /// Pixels of the patch for `tube` at pyramid level `scale` (0-based).
    pub fn patch(&self, tube: usize, scale: usize) -> &[f32] {
        let p = self.patch * self.patch * 3;
        &self.tube(tube)[scale * p..(scale + 1) * p]
    }
}

fn cut_patch(frame: &Frame, top: usize, left: usize, p: usize, out: &mut Vec<f32>) {
    for y in top..top + p {
        let start = (y * frame.width() + left) * 3;
        out.extend_from_slice(&frame.data()[start..start + p * 3]);
    }
}

/// Cuts the tubes for one pyramid group.
pub fn sample_tubes<R: Rng + ?Sized>(
    pyr: &PyramidGroup,
    center: &AlignCenter,
    cfg: &MultiResConfig,
    rng: &mut R,
) -> Result<TubeBatch> {
    cfg.validate()?;
    let expected = cfg.layout(pyr.mode);
    if pyr.frames.len() != cfg.scales || pyr.layout != expected {
        return Err(Error::Config(format!(
            "pyramid does not match config ({} frames, layout {:?})",
            pyr.frames.len(),
            pyr.layout
        )));
    }
    for (f, l) in pyr.frames.iter().zip(&pyr.layout) {
        if f.shorter_side() != l.side {
            return Err(Error::Config(format!(
                "pyramid frame has shorter side {}, expected {}",
                f.shorter_side(),
                l.side
            )));
        }
    }
    if center.windows.len() != cfg.scales {
        return Err(Error::Config("alignment centre does not match pyramid".into()));
    }

    let (g, n, p) = (cfg.grid_size, cfg.scales, cfg.patch_size);
    let m = g * g;
    // per scale, the top-left of the patch for each tube
    let corners: Vec<Vec<(usize, usize)>> = match pyr.mode {
        SamplingMode::Random => pyr
            .frames
            .iter()
            .map(|f| {
                let mut cs: Vec<(usize, usize)> = (0..m)
                    .map(|_| (rng.gen_range(0..=f.height() - p), rng.gen_range(0..=f.width() - p)))
                    .collect();
                cs.shuffle(rng);
                cs
            })
            .collect(),
        _ => pyr
            .frames
            .iter()
            .zip(&center.windows)
            .map(|(f, w)| {
                // (pitch − P)/2, halves rounded up
                let inset = (w.pitch - p + 1) / 2;
                (0..m)
                    .map(|k| {
                        let (r, c) = (k / g, k % g);
                        let top = (w.top + w.pitch * r + inset).min(f.height() - p);
                        let left = (w.left + w.pitch * c + inset).min(f.width() - p);
                        (top, left)
                    })
                    .collect()
            })
            .collect(),
    };

    let mut data = Vec::with_capacity(m * cfg.tube_len());
    let mut boxes = Vec::with_capacity(m * n);
    for k in 0..m {
        for (s, frame) in pyr.frames.iter().enumerate() {
            let (top, left) = corners[s][k];
            cut_patch(frame, top, left, p, &mut data);
            boxes.push(PatchBox { scale: s + 1, top, left });
        }
    }
    Ok(TubeBatch {
        grid: g,
        scales: n,
        patch: p,
        data,
        boxes,
        center: center.c,
    })
}

/// How a clip is drawn from a video before tokenization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipOptions {
    pub frames: usize,
    pub strategy: FrameStrategy,
    pub mode: SamplingMode,
}

/// Tubes for every group of one clip; all groups share one alignment centre.
#[derive(Clone, Debug)]
pub struct ClipTubes {
    pub groups: Vec<TubeBatch>,
    pub center: AlignCenter,
    /// Frames drawn from the source video.
    pub frames: usize,
}

/// Frame sampling, grouping and pyramids for one clip.
pub fn clip_pyramids(seq: &FrameSequence, cfg: &MultiResConfig, opts: &ClipOptions) -> Result<Vec<PyramidGroup>> {
    let clip = sample_frames(seq, opts.frames, opts.strategy)?;
    group_frames(&clip, cfg.scales)?
        .iter()
        .map(|g| build_pyramid_for(g, cfg, opts.mode))
        .collect()
}

/// Centre choice and tube cutting over prepared pyramids.
pub fn tubes_from_pyramids<R: Rng + ?Sized>(
    pyramids: &[PyramidGroup],
    cfg: &MultiResConfig,
    center_mode: CenterMode,
    rng: &mut R,
) -> Result<ClipTubes> {
    let first = pyramids
        .first()
        .ok_or_else(|| Error::Empty("clip has no frame groups".into()))?;
    let center = choose_center(first, cfg.grid_size, center_mode, rng);
    let groups = pyramids
        .iter()
        .map(|pyr| sample_tubes(pyr, &center, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipTubes {
        frames: pyramids.len() * cfg.scales,
        groups,
        center,
    })
}

/// Frame sampling, grouping, pyramids, centre choice and tube cutting.
pub fn clip_tubes<R: Rng + ?Sized>(
    seq: &FrameSequence,
    cfg: &MultiResConfig,
    opts: &ClipOptions,
    center_mode: CenterMode,
    rng: &mut R,
) -> Result<ClipTubes> {
    let pyramids = clip_pyramids(seq, cfg, opts)?;
    let mut tubes = tubes_from_pyramids(&pyramids, cfg, center_mode, rng)?;
    tubes.frames = opts.frames;
    Ok(tubes)
}
