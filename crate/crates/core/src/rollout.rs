//! Attention rollout: head-averaged attention matrices multiplied across
//! layers to attribute the classification output to input tokens.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::numerics::Tensor;
use crate::videoio::Frame;

/// Row-sum tolerance for attention inputs.
pub const STOCHASTIC_TOL: f64 = 1e-5;
/// Below this total mass a map falls back to uniform.
pub const MIN_MASS: f64 = 1e-9;

/// Elementwise mean over heads.
pub fn head_average(heads: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = heads.first().ok_or_else(|| Error::Empty("no attention heads".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for h in heads {
        if h.shape() != first.shape() {
            return Err(Error::shape("head_average", format!("{:?} vs {:?}", h.shape(), first.shape())));
        }
        for (a, &v) in acc.data_mut().iter_mut().zip(h.data()) {
            *a += v;
        }
    }
    let n = heads.len() as f64;
    Ok(acc.map(|v| v / n))
}

fn check_stochastic(a: &Tensor<f64>, s: usize, layer: usize) -> Result<()> {
    if a.shape() != [s, s] {
        return Err(Error::shape("rollout", format!("layer {layer} is {:?}, expected [{s}, {s}]", a.shape())));
    }
    for r in 0..s {
        let row = a.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= -STOCHASTIC_TOL) || !v.is_finite()) || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotStochastic(format!("layer {layer} row {r} sums to {sum}")));
        }
    }
    Ok(())
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for k in 0..s {
            let aik = a.data()[i * s + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..s {
                out[i * s + j] += aik * b.data()[k * s + j];
            }
        }
    }
    Tensor::new(vec![s, s], out).expect("square shape")
}

/// `0.5·A + 0.5·I`, rows renormalized to sum to one.
pub fn residual_correct(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (s, c) = a.dims2()?;
    if s != c {
        return Err(Error::shape("residual_correct", format!("{:?} is not square", a.shape())));
    }
    let mut out = a.map(|v| 0.5 * v);
    for r in 0..s {
        out.data_mut()[r * s + r] += 0.5;
        let total: f64 = out.row(r).iter().sum();
        for v in &mut out.data_mut()[r * s..(r + 1) * s] {
            *v /= total;
        }
    }
    Ok(out)
}

/// `Ā_L · … · Ā_1` over head-averaged layers (first layer first). With
/// `residual`, each layer is corrected by [`residual_correct`]; otherwise the
/// raw matrices are multiplied. No layers give the identity of size `size`.
pub fn rollout_matrix(layers: &[Tensor<f64>], residual: bool, size: usize) -> Result<Tensor<f64>> {
    let s = layers.first().map_or(size, |l| l.shape()[0]);
    let mut acc = Tensor::from_fn(&[s, s], |i| if i / s == i % s { 1.0 } else { 0.0 });
    for (l, a) in layers.iter().enumerate() {
        check_stochastic(a, s, l)?;
        let layer = if residual { residual_correct(a)? } else { a.clone() };
        acc = matmul(&layer, &acc, s);
    }
    Ok(acc)
}

/// Row 0 of the rollout restricted to positions `1..`, normalized to sum 1.
fn cls_distribution(layers: &[Vec<Tensor<f64>>], residual: bool, tokens: usize) -> Result<Vec<f64>> {
    let averaged = layers.iter().map(|h| head_average(h)).collect::<Result<Vec<_>>>()?;
    let r = rollout_matrix(&averaged, residual, tokens + 1)?;
    let mass: Vec<f64> = r.row(0)[1..].iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = mass.iter().sum();
    if total < MIN_MASS {
        return Ok(vec![1.0 / mass.len() as f64; mass.len()]);
    }
    Ok(mass.iter().map(|v| v / total).collect())
}

/// Grid attention map, row-major `grid × grid`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub grid: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// `(row, col)` of the largest entry.
    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.values[best] { i } else { best });
        (k / self.grid, k % self.grid)
    }
}

/// Spatial heatmap for one frame group of a retained trace.
pub fn spatial_heatmap(trace: &ForwardTrace, group_index: usize, residual: bool) -> Result<Heatmap> {
    if !trace.attention_retained {
        return Err(Error::AttentionNotRetained);
    }
    let layers = trace.spatial_attention.get(group_index).ok_or_else(|| {
        Error::OutOfRange(format!(
            "group {group_index} outside 0..{}",
            trace.spatial_attention.len()
        ))
    })?;
    let tokens = trace.tokens;
    let grid = (tokens as f64).sqrt().round() as usize;
    if grid * grid != tokens {
        return Err(Error::shape("spatial_heatmap", format!("{tokens} tokens do not form a square grid")));
    }
    Ok(Heatmap {
        grid,
        values: cls_distribution(layers, residual, tokens)?,
    })
}

/// Attention mass from the temporal classification output to each group.
pub fn temporal_profile(trace: &ForwardTrace, residual: bool) -> Result<Vec<f64>> {
    if !trace.attention_retained {
        return Err(Error::AttentionNotRetained);
    }
    cls_distribution(&trace.temporal_attention, residual, trace.groups)
}

/// Binary PGM (P5), values scaled so the maximum maps to 255.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} values for {width}×{height}", values.len())));
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour upsampling of a grid map onto `frame`: each pixel inside
/// the square of side `pitch` around a patch centre takes that cell's value,
/// blended in red over the frame.
pub fn write_overlay_png(
    path: &Path,
    frame: &Frame,
    map: &Heatmap,
    centers: &[(f64, f64)],
    pitch: usize,
) -> Result<()> {
    if centers.len() != map.values.len() {
        return Err(Error::shape(
            "write_overlay_png",
            format!("{} centres for {} cells", centers.len(), map.values.len()),
        ));
    }
    let (h, w) = (frame.height(), frame.width());
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    let half = pitch as f64 / 2.0;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let cell = centers
                .iter()
                .position(|&(cy, cx)| (py - cy).abs() <= half && (px - cx).abs() <= half);
            let a = match cell {
                Some(k) if max > 0.0 => 0.6 * map.values[k] / max,
                _ => 0.0,
            };
            let px_rgb: [u8; 3] = std::array::from_fn(|c| {
                let base = frame.get(y, x, c) as f64;
                let tint = if c == 0 { 1.0 } else { 0.0 };
                ((base * (1.0 - a) + tint * a) * 255.0).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px_rgb));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `t,attention` rows, `t` starting at 1.
pub fn write_profile_csv(path: &Path, profile: &[f64]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "t,attention").expect("writing to memory");
    for (t, a) in profile.iter().enumerate() {
        writeln!(out, "{},{a}", t + 1).expect("writing to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
