//! Tube embedding, factorized spatial/temporal Transformer encoders and the
//! quality head.

pub mod checkpoint;
mod counts;
mod forward;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multires::MultiResConfig;
use crate::numerics::serialize::load_tensor_file;
use crate::numerics::{Real, Tensor};
use crate::videoio::ChannelNorm;

pub use checkpoint::Checkpoint;
pub use counts::{count_flops, count_macs, count_params};
pub use forward::{embed_group, predict, spatial_encode, temporal_encode, ForwardTrace, Graph, PredictOptions, Prediction};

/// Standard deviation of the truncated normal used for weights.
pub const INIT_STD: f64 = 0.02;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Frame groups per clip (`T`); a clip holds `T·N` frames.
    pub groups: usize,
    /// Hidden width of the quality head; defaults to `dim`.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default)]
    pub multires: MultiResConfig,
    /// Multiplier applied to the head output, e.g. 100 when trained on
    /// normalized scores.
    #[serde(default = "one")]
    pub output_scale: f64,
    /// Optional pixel normalization before the tube projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<ChannelNorm>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            spatial_layers: 12,
            temporal_layers: 8,
            heads: 12,
            mlp_dim: 3072,
            groups: 32,
            head_hidden: None,
            multires: MultiResConfig::default(),
            output_scale: 1.0,
            input_norm: None,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration exercised in the test suite.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            spatial_layers: 2,
            temporal_layers: 1,
            heads: 2,
            mlp_dim: 16,
            groups: 2,
            head_hidden: None,
            multires: MultiResConfig {
                scales: 2,
                largest_side: 16,
                patch_size: 4,
                grid_size: 2,
            },
            output_scale: 1.0,
            input_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.multires.validate()?;
        if self.dim == 0 || self.heads == 0 || self.mlp_dim == 0 || self.groups == 0 {
            return Err(Error::Config("dim, heads, mlp_dim and groups must be at least 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("head_hidden must be at least 1".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config(format!("output_scale must be positive, got {}", self.output_scale)));
        }
        if let Some(n) = &self.input_norm {
            n.validate()?;
        }
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.dim)
    }

    /// Frames consumed per clip, `T·N`.
    pub fn clip_frames(&self) -> usize {
        self.groups * self.multires.scales
    }

    /// Name, shape and initializer of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.dim;
        let m = self.multires.tokens();
        let mut out = vec![
            ("embed.weight".to_string(), vec![d, self.multires.tube_len()], Init::Normal),
            ("embed.bias".to_string(), vec![d], Init::Zeros),
        ];
        let mut encoder = |prefix: &str, positions: usize, layers: usize| {
            out.push((format!("{prefix}.pos"), vec![positions, d], Init::Normal));
            out.push((format!("{prefix}.cls"), vec![d], Init::Zeros));
            for k in 0..layers {
                let p = format!("{prefix}.layers.{k}");
                let mut push = |name: &str, shape: Vec<usize>, init| out.push((format!("{p}.{name}"), shape, init));
                push("ln1.gamma", vec![d], Init::Ones);
                push("ln1.beta", vec![d], Init::Zeros);
                for w in ["q", "k", "v", "o"] {
                    push(&format!("attn.w{w}"), vec![d, d], Init::Normal);
                    push(&format!("attn.b{w}"), vec![d], Init::Zeros);
                }
                push("ln2.gamma", vec![d], Init::Ones);
                push("ln2.beta", vec![d], Init::Zeros);
                push("mlp.w1", vec![self.mlp_dim, d], Init::Normal);
                push("mlp.b1", vec![self.mlp_dim], Init::Zeros);
                push("mlp.w2", vec![d, self.mlp_dim], Init::Normal);
                push("mlp.b2", vec![d], Init::Zeros);
            }
            out.push((format!("{prefix}.ln.gamma"), vec![d], Init::Ones));
            out.push((format!("{prefix}.ln.beta"), vec![d], Init::Zeros));
        };
        encoder("spatial", m + 1, self.spatial_layers);
        encoder("temporal", self.groups + 1, self.temporal_layers);
        let hh = self.head_hidden();
        out.push(("head.w1".to_string(), vec![hh, d], Init::Normal));
        out.push(("head.b1".to_string(), vec![hh], Init::Zeros));
        out.push(("head.w2".to_string(), vec![1, hh], Init::Normal));
        out.push(("head.b2".to_string(), vec![1], Init::Zeros));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every learnable tensor, keyed by name, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    /// Truncated normal (±2σ) weights and positional embeddings, zero biases
    /// and classification tokens, unit layer-norm gains.
    pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let tensors = cfg
            .layout()
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, T::one()),
                    Init::Normal => Tensor::from_fn(&shape, |_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break T::from_f64_lossy(v);
                        }
                    }),
                };
                (name, t)
            })
            .collect();
        Self::from_tensors(cfg.clone(), tensors)
    }

    /// Assembles parameters, checking names and shapes against the config.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut by_name: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut ordered = Vec::new();
        for (name, shape, _) in config.layout() {
            let t = by_name.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: expected {shape:?}, found {:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: name });
            }
            ordered.push((name, t));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        let index = ordered.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Self {
            config,
            tensors: ordered,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn set_output_scale(&mut self, scale: f64) {
        self.config.output_scale = scale;
    }

    pub fn tensors(&self) -> &[(String, Tensor<T>)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i].1)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self.index.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(&mut self.tensors[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the tube projection with a central-frame expansion of a 2-D
    /// patch projection.
    pub fn set_image_embedding(&mut self, e_image: &Tensor<T>) -> Result<()> {
        let e = init_central_frame(e_image, self.config.multires.scales)?;
        let slot = self.get_mut("embed.weight")?;
        if slot.shape() != e.shape() {
            return Err(Error::shape(
                "set_image_embedding",
                format!("expected {:?}, found {:?}", slot.shape(), e.shape()),
            ));
        }
        *slot = e;
        Ok(())
    }
}

/// Expands a `d × (P·P·3)` image projection to `d × (N·P·P·3)`: zeros
/// everywhere except the block for scale `⌊N/2⌋`.
pub fn init_central_frame<T: Real>(e_image: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (d, k) = e_image.dims2()?;
    if n == 0 {
        return Err(Error::shape("init_central_frame", "scale count must be at least 1"));
    }
    let center = n / 2;
    let mut out = Tensor::zeros(&[d, n * k]);
    let data = out.data_mut();
    for r in 0..d {
        let start = r * n * k + center * k;
        data[start..start + k].copy_from_slice(e_image.row(r));
    }
    Ok(out)
}

/// Reads the `patch_embedding` tensor (`dim × P·P·3`) from a tensor file.
pub fn load_image_embedding(path: &Path, dim: usize, patch: usize) -> Result<Tensor<f32>> {
    let tensors = load_tensor_file::<f32>(path)?;
    let (_, t) = tensors
        .into_iter()
        .find(|(n, _)| n == "patch_embedding")
        .ok_or_else(|| Error::MissingTensor("patch_embedding".into()))?;
    let expected = [dim, patch * patch * 3];
    if t.shape() != expected {
        return Err(Error::shape(
            "load_image_embedding",
            format!("expected {expected:?}, found {:?}", t.shape()),
        ));
    }
    Ok(t)
}
