use super::Frame;
use crate::error::{Error, Result};

/// Output `(height, width)` when the shorter side becomes `target`.
///
/// The longer side is `round(longer · target / shorter)`, halves rounded away
/// from zero, and never below 1.
pub fn shorter_side_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let scale_long = |long: usize, short: usize| ((2 * long * target + short) / (2 * short)).max(1);
    if height <= width {
        (target, scale_long(width, height))
    } else {
        (scale_long(height, width), target)
    }
}

/// Aspect-preserving bilinear resize so the shorter side equals `target`.
pub fn resize_shorter_side(frame: &Frame, target: usize) -> Result<Frame> {
    if target == 0 {
        return Err(Error::OutOfRange("resize target must be at least 1".into()));
    }
    let (h, w) = shorter_side_dims(frame.height(), frame.width(), target);
    resize_to(frame, h, w)
}

/// Bilinear resize with half-pixel-centred sampling and no prefilter.
/// Same-size requests return an exact copy.
pub fn resize_to(frame: &Frame, height: usize, width: usize) -> Result<Frame> {
    if height == 0 || width == 0 {
        return Err(Error::OutOfRange(format!("cannot resize to {height}x{width}")));
    }
    if height == frame.height() && width == frame.width() {
        return Ok(frame.clone());
    }
    let ys = axis_taps(frame.height(), height);
    let xs = axis_taps(frame.width(), width);
    let mut data = Vec::with_capacity(height * width * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..3 {
                let top = lerp(frame.get(y0, x0, c), frame.get(y0, x1, c), tx);
                let bottom = lerp(frame.get(y1, x0, c), frame.get(y1, x1, c), tx);
                data.push(lerp(top, bottom, ty).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Frame::from_parts(height, width, data))
}

/// `a + t·(b − a)`; equal endpoints reproduce `a` exactly.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Per output index: the two neighbouring source indices and the blend weight.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}
