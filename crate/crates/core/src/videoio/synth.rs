//! Labelled synthetic videos for desk-scale training.
//!
//! A seeded base pattern is rendered per frame, one distortion is applied at a
//! given severity, and the label is `100·(1 − severity)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frame, FrameSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Gradient,
    Checker,
    MovingDisc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distortion {
    GaussianBlur,
    AdditiveNoise,
    BlockQuantization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub pattern: Pattern,
    pub distortion: Distortion,
    /// In `[0, 1]`; 0 leaves the pattern untouched.
    pub severity: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SynthSpec {
    pub fn mos(&self) -> f64 {
        100.0 * (1.0 - self.severity)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(format!("severity {} outside [0, 1]", self.severity)));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic video needs frames, height and width ≥ 1".into()));
        }
        Ok(())
    }
}

/// Maximum noise standard deviation, reached at severity 1.
const NOISE_SIGMA: f64 = 0.25;
/// Maximum blur standard deviation in pixels.
const BLUR_SIGMA: f64 = 3.0;
/// Disc speed in pixels per frame.
const DISC_SPEED: f64 = 2.0;

/// Renders a synthetic video. Deterministic for `(spec, seed)`.
pub fn synth_video(spec: &SynthSpec, seed: u64) -> Result<FrameSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::draw(spec, &mut rng);
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut img = scene.render(spec.height, spec.width, t);
        distort(&mut img, spec, &mut rng);
        frames.push(Frame::from_parts(spec.height, spec.width, img));
    }
    FrameSequence::new(frames)?.with_mos(spec.mos())
}

struct Scene {
    pattern: Pattern,
    colors: [[f64; 3]; 2],
    angle: f64,
    cell: usize,
    disc: (f64, f64, f64),
}

impl Scene {
    fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let colors = [color(), color()];
        let short = spec.height.min(spec.width) as f64;
        Self {
            pattern: spec.pattern,
            colors,
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
            cell: rng.gen_range(2..=6),
            disc: (
                rng.gen_range(0.0..spec.height as f64),
                rng.gen_range(0.0..spec.width as f64),
                (short / 4.0).max(1.0),
            ),
        }
    }

    fn render(&self, height: usize, width: usize, t: usize) -> Vec<f32> {
        let [c0, c1] = self.colors;
        let mix = |a: f64| -> [f64; 3] { std::array::from_fn(|c| c0[c] + a * (c1[c] - c0[c])) };
        let (ca, sa) = (self.angle.cos(), self.angle.sin());
        let norm = (height * height + width * width) as f64;
        let norm = norm.sqrt().max(1.0);
        let mut out = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let (yf, xf) = (y as f64, x as f64);
                let rgb = match self.pattern {
                    Pattern::Gradient => {
                        let a = (((xf + t as f64) * ca + yf * sa) / norm).rem_euclid(1.0);
                        mix(a)
                    }
                    Pattern::Checker => {
                        let parity = ((x + t) / self.cell + y / self.cell) % 2;
                        self.colors[parity]
                    }
                    Pattern::MovingDisc => {
                        let (cy, cx0, r) = self.disc;
                        let cx = (cx0 + DISC_SPEED * t as f64).rem_euclid(width as f64);
                        let dx = (xf - cx).abs().min(width as f64 - (xf - cx).abs());
                        let inside = (yf - cy).powi(2) + dx * dx <= r * r;
                        if inside {
                            c1
                        } else {
                            mix(0.3 * yf / height as f64)
                        }
                    }
                };
                out.extend(rgb.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
            }
        }
        out
    }
}

fn distort(img: &mut [f32], spec: &SynthSpec, rng: &mut ChaCha8Rng) {
    let s = spec.severity;
    if s == 0.0 {
        return;
    }
    match spec.distortion {
        Distortion::AdditiveNoise => {
            let normal = Normal::new(0.0, NOISE_SIGMA * s).expect("positive sigma");
            for v in img.iter_mut() {
                *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Distortion::GaussianBlur => gaussian_blur(img, spec.height, spec.width, BLUR_SIGMA * s),
        Distortion::BlockQuantization => {
            let block = 1 + (7.0 * s).round() as usize;
            block_average(img, spec.height, spec.width, block);
            let levels = ((255.0 * (1.0 - s)).round() as usize).max(1) as f64;
            for v in img.iter_mut() {
                *v = ((*v as f64 * levels).round() / levels) as f32;
            }
        }
    }
}

fn gaussian_blur(img: &mut [f32], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();

    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * src[(yy * w + xx) * 3 + c] as f64;
                    }
                    dst[(y * w + x) * 3 + c] = acc.clamp(0.0, 1.0) as f32;
                }
            }
        }
        dst
    };
    let tmp = pass(img, true);
    let out = pass(&tmp, false);
    img.copy_from_slice(&out);
}

fn block_average(img: &mut [f32], h: usize, w: usize, block: usize) {
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ys = by..(by + block).min(h);
            let xs = bx..(bx + block).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mut sum = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        sum += img[(y * w + x) * 3 + c] as f64;
                    }
                }
                let mean = (sum / count) as f32;
                for y in ys.clone() {
                    for x in xs.clone() {
                        img[(y * w + x) * 3 + c] = mean;
                    }
                }
            }
        }
    }
}
