use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::multires::{clip_tubes, CenterMode, ClipOptions, ClipTubes, SamplingMode, TubeBatch};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::videoio::{FrameSequence, FrameStrategy};

/// Attention probabilities and encoder outputs recorded during a forward pass.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ForwardTrace {
    /// `[group][layer][head]`, each `(M+1)×(M+1)`; empty unless retained.
    #[serde(skip)]
    pub spatial_attention: Vec<Vec<Vec<Tensor<f64>>>>,
    /// `[layer][head]`, each `(T+1)×(T+1)`; empty unless retained.
    #[serde(skip)]
    pub temporal_attention: Vec<Vec<Tensor<f64>>>,
    /// Per-group spatial representations `h_t`.
    pub group_features: Vec<Vec<f64>>,
    /// Clip representation `v`.
    pub clip_feature: Vec<f64>,
    pub attention_retained: bool,
    /// Spatial tokens per group, excluding the classification token.
    pub tokens: usize,
    pub frames: usize,
    pub groups: usize,
    pub center: f64,
    pub mode: Option<SamplingMode>,
    pub strategy: Option<FrameStrategy>,
}

/// One forward pass recorded on a tape, with every parameter bound to a leaf.
pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ModelParams<T>,
    vars: Vec<Var>,
    retain: bool,
    pub trace: ForwardTrace,
}

impl<'p, T: Real> Graph<'p, T> {
    /// `tracking` records gradient information; `retain` keeps attention maps.
    pub fn new(params: &'p ModelParams<T>, tracking: bool, retain: bool) -> Self {
        let mut tape = if tracking { Tape::new() } else { Tape::inference() };
        let vars = params
            .tensors()
            .iter()
            .map(|(_, t)| if tracking { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self {
            tape,
            params,
            vars,
            retain,
            trace: ForwardTrace {
                attention_retained: retain,
                tokens: params.config().multires.tokens(),
                ..ForwardTrace::default()
            },
        }
    }

    /// Tape variables of the parameters, in parameter order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn row(&mut self, name: &str) -> Result<Var> {
        let v = self.p(name)?;
        let d = self.tape.shape(v)[0];
        self.tape.reshape(v, &[1, d])
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.tape.matmul_t(x, w)?;
        self.tape.add(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, b) = (self.p(&format!("{prefix}.gamma"))?, self.p(&format!("{prefix}.beta"))?);
        let n = self.tape.layer_norm(x)?;
        let n = self.tape.mul(n, g)?;
        self.tape.add(n, b)
    }

    fn attention(&mut self, x: Var, prefix: &str) -> Result<(Var, Vec<Tensor<f64>>)> {
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let cfg = self.params.config();
        let (heads, dh) = (cfg.heads, cfg.dim / cfg.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut maps = Vec::new();
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = self.tape.slice(q, 1, lo, hi)?;
            let kh = self.tape.slice(k, 1, lo, hi)?;
            let vh = self.tape.slice(v, 1, lo, hi)?;
            let logits = self.tape.matmul_t(qh, kh)?;
            let logits = self.tape.scale(logits, scale)?;
            let a = self.tape.softmax(logits)?;
            if self.retain {
                maps.push(self.tape.value(a).cast());
            }
            outs.push(self.tape.matmul(a, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { self.tape.concat(&outs, 1)? };
        let out = self.linear(joined, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok((out, maps))
    }

    /// Pre-norm block; returns the output and the retained attention maps.
    fn block(&mut self, x: Var, prefix: &str) -> Result<(Var, Vec<Tensor<f64>>)> {
        let n1 = self.norm(x, &format!("{prefix}.ln1"))?;
        let (a, maps) = self.attention(n1, &format!("{prefix}.attn"))?;
        let x = self.tape.add(x, a)?;
        let n2 = self.norm(x, &format!("{prefix}.ln2"))?;
        let hidden = self.linear(n2, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
        let hidden = self.tape.gelu(hidden)?;
        let m = self.linear(hidden, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
        Ok((self.tape.add(x, m)?, maps))
    }

    /// Runs `layers` blocks, then the final norm on the classification row.
    fn encode(&mut self, mut x: Var, prefix: &str, layers: usize) -> Result<(Var, Vec<Vec<Tensor<f64>>>)> {
        let mut maps = Vec::new();
        for k in 0..layers {
            let (y, m) = self.block(x, &format!("{prefix}.layers.{k}"))?;
            x = y;
            if self.retain {
                maps.push(m);
            }
        }
        let cls = self.tape.slice(x, 0, 0, 1)?;
        Ok((self.norm(cls, &format!("{prefix}.ln"))?, maps))
    }

    /// `[z_cls; E·x_1 + b; …; E·x_M + b] + p`, shape `(M+1)×d`.
    pub fn embed_group(&mut self, tubes: &TubeBatch) -> Result<Var> {
        let mr = &self.params.config().multires;
        if tubes.tube_count() != mr.tokens() || tubes.tube_len() != mr.tube_len() {
            return Err(Error::shape(
                "embed_group",
                format!(
                    "expected {} tubes of {}, got {} of {}",
                    mr.tokens(),
                    mr.tube_len(),
                    tubes.tube_count(),
                    tubes.tube_len()
                ),
            ));
        }
        let values: Vec<T> = match &self.params.config().input_norm {
            Some(n) => n.apply(&tubes.data).into_iter().map(T::from_f64_lossy).collect(),
            None => tubes.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        };
        let x = Tensor::new(vec![tubes.tube_count(), tubes.tube_len()], values)?;
        let x = self.tape.constant(x);
        let tokens = self.linear(x, "embed.weight", "embed.bias")?;
        let cls = self.row("spatial.cls")?;
        let seq = self.tape.concat(&[cls, tokens], 0)?;
        let pos = self.p("spatial.pos")?;
        self.tape.add(seq, pos)
    }

    /// Spatial encoder on one embedded group; returns `h_t` as `1×d`.
    pub fn spatial_encode(&mut self, z0: Var) -> Result<Var> {
        let expected = self.params.config().multires.tokens() + 1;
        if self.tape.shape(z0)[0] != expected {
            return Err(Error::shape(
                "spatial_encode",
                format!("expected {expected} tokens, got {}", self.tape.shape(z0)[0]),
            ));
        }
        let layers = self.params.config().spatial_layers;
        let (h, maps) = self.encode(z0, "spatial", layers)?;
        if self.retain {
            self.trace.spatial_attention.push(maps);
        }
        self.trace.group_features.push(value_vec(self.tape.value(h)));
        Ok(h)
    }

    /// Temporal encoder over `h_1..h_T'` (`T' ≤ T`); returns `v` as `1×d`.
    pub fn temporal_encode(&mut self, hs: &[Var]) -> Result<Var> {
        let t_max = self.params.config().groups;
        if hs.is_empty() || hs.len() > t_max {
            return Err(Error::shape(
                "temporal_encode",
                format!("expected 1..={t_max} group features, got {}", hs.len()),
            ));
        }
        let cls = self.row("temporal.cls")?;
        let mut parts = vec![cls];
        parts.extend_from_slice(hs);
        let seq = self.tape.concat(&parts, 0)?;
        let pos = self.p("temporal.pos")?;
        let pos = self.tape.slice(pos, 0, 0, hs.len() + 1)?;
        let x = self.tape.add(seq, pos)?;
        let layers = self.params.config().temporal_layers;
        let (v, maps) = self.encode(x, "temporal", layers)?;
        if self.retain {
            self.trace.temporal_attention = maps;
        }
        self.trace.clip_feature = value_vec(self.tape.value(v));
        Ok(v)
    }

    /// Quality head on `v`; returns a `1×1` raw score before output scaling.
    pub fn head(&mut self, v: Var) -> Result<Var> {
        let h = self.linear(v, "head.w1", "head.b1")?;
        let h = self.tape.gelu(h)?;
        self.linear(h, "head.w2", "head.b2")
    }

    /// Raw score for pre-cut tubes of one clip.
    pub fn clip(&mut self, clip: &ClipTubes) -> Result<Var> {
        let mut hs = Vec::with_capacity(clip.groups.len());
        for g in &clip.groups {
            let z0 = self.embed_group(g)?;
            hs.push(self.spatial_encode(z0)?);
        }
        self.trace.groups = clip.groups.len();
        self.trace.frames = clip.frames;
        self.trace.center = clip.center.c;
        let v = self.temporal_encode(&hs)?;
        self.head(v)
    }
}

fn value_vec<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Embeds one group of tubes: `(M+1)×d`.
pub fn embed_group<T: Real>(tubes: &TubeBatch, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(params, false, false);
    let z = g.embed_group(tubes)?;
    Ok(g.tape.value(z).clone())
}

/// Spatial encoder on an embedded token sequence; returns `h_t` (`1×d`).
pub fn spatial_encode<T: Real>(z0: &Tensor<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(params, false, false);
    let z = g.tape.constant(z0.clone());
    let h = g.spatial_encode(z)?;
    Ok(g.tape.value(h).clone())
}

/// Temporal encoder over group features (`1×d` each); returns `v` (`1×d`).
pub fn temporal_encode<T: Real>(hs: &[Tensor<T>], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(params, false, false);
    let vars: Vec<Var> = hs.iter().map(|h| g.tape.constant(h.clone())).collect();
    let v = g.temporal_encode(&vars)?;
    Ok(g.tape.value(v).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    /// Clip length in frames; defaults to `T·N`.
    pub frames: Option<usize>,
    pub strategy: FrameStrategy,
    pub mode: SamplingMode,
    pub retain_attention: bool,
    /// Seed for the random ablation sampler.
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            frames: None,
            strategy: FrameStrategy::Uniform,
            mode: SamplingMode::Mret,
            retain_attention: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub score: f64,
    pub trace: ForwardTrace,
}

/// Scores one video in inference mode (alignment centre at the middle).
pub fn predict<T: Real>(seq: &FrameSequence, params: &ModelParams<T>, opts: &PredictOptions) -> Result<Prediction> {
    let cfg = params.config();
    let frames = opts.frames.unwrap_or(cfg.clip_frames());
    if frames == 0 || frames.div_ceil(cfg.multires.scales) > cfg.groups {
        return Err(Error::Config(format!(
            "clip of {frames} frames does not fit {} groups of {}",
            cfg.groups, cfg.multires.scales
        )));
    }
    let clip_opts = ClipOptions {
        frames,
        strategy: opts.strategy,
        mode: opts.mode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let clip = clip_tubes(seq, &cfg.multires, &clip_opts, CenterMode::Infer, &mut rng)?;
    let mut g = Graph::new(params, false, opts.retain_attention);
    let out = g.clip(&clip)?;
    let score = g.tape.value(out).item()?.to_f64_lossy() * cfg.output_scale;
    let mut trace = g.trace;
    trace.mode = Some(opts.mode);
    trace.strategy = Some(opts.strategy);
    Ok(Prediction { score, trace })
}
