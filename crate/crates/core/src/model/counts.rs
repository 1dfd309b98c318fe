//! Closed-form parameter and compute counts.

use super::ModelConfig;

fn block_params(d: u64, mlp: u64) -> u64 {
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = mlp * d + mlp + d * mlp + d;
    2 * ln + attn + ffn
}

/// Number of learnable scalars.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.dim as u64;
    let mlp = cfg.mlp_dim as u64;
    let m = cfg.multires.tokens() as u64;
    let t = cfg.groups as u64;
    let hh = cfg.head_hidden() as u64;
    let embed = d * cfg.multires.tube_len() as u64 + d;
    let spatial = (m + 1) * d + d + cfg.spatial_layers as u64 * block_params(d, mlp) + 2 * d;
    let temporal = (t + 1) * d + d + cfg.temporal_layers as u64 * block_params(d, mlp) + 2 * d;
    let head = hh * d + hh + hh + 1;
    embed + spatial + temporal + head
}

/// Multiply-accumulates of one encoder block over `s` tokens: QKV and
/// output projections, attention logits, attention-weighted sum, both MLP
/// layers, and the affine part of the two layer norms.
fn block_macs(s: f64, d: f64, mlp: f64) -> f64 {
    let proj = 4.0 * s * d * d;
    let attn = 2.0 * s * s * d;
    let ffn = 2.0 * s * d * mlp;
    let ln = 2.0 * s * d;
    proj + attn + ffn + ln
}

/// Multiply-accumulates for one clip of `frames` frames.
pub fn count_macs(cfg: &ModelConfig, frames: usize) -> f64 {
    let d = cfg.dim as f64;
    let mlp = cfg.mlp_dim as f64;
    let m = cfg.multires.tokens() as f64;
    let groups = frames.div_ceil(cfg.multires.scales) as f64;
    let embed = m * d * cfg.multires.tube_len() as f64;
    let s = m + 1.0;
    let spatial = cfg.spatial_layers as f64 * block_macs(s, d, mlp) + d;
    let t = groups + 1.0;
    let temporal = cfg.temporal_layers as f64 * block_macs(t, d, mlp) + d;
    let hh = cfg.head_hidden() as f64;
    let head = hh * d + hh;
    groups * (embed + spatial) + temporal + head
}

/// Floating-point operations for one clip, two per multiply-accumulate.
pub fn count_flops(cfg: &ModelConfig, frames: usize) -> f64 {
    2.0 * count_macs(cfg, frames)
}
