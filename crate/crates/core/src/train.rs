//! L2 regression training with SGD momentum and cosine learning-rate decay.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{plcc, srcc};
use crate::model::{predict, Checkpoint, Graph, ModelConfig, ModelParams, PredictOptions};
use crate::multires::{clip_pyramids, tubes_from_pyramids, CenterMode, ClipOptions, ClipTubes, PyramidGroup};
use crate::numerics::{Real, Tensor};
use crate::seed;
use crate::videoio::{FrameSequence, DEFAULT_MOS_RANGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Processes clips of a batch sequentially.
    pub deterministic: bool,
    /// Trains on `mos / 100` and scales predictions back up.
    pub mos_normalization: bool,
    /// Optional clip-by-global-norm threshold.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.3,
            momentum: 0.9,
            batch_size: 256,
            epochs: 10,
            seed: 0,
            deterministic: false,
            mos_normalization: false,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_len)
    }
}

/// Mean of `(pred − mos)²`.
pub fn l2_loss(pred: &[f64], mos: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    if pred.len() != mos.len() {
        return Err(Error::shape("l2_loss", format!("{} predictions vs {} labels", pred.len(), mos.len())));
    }
    Ok(pred.iter().zip(mos).map(|(p, m)| (p - m) * (p - m)).sum::<f64>() / pred.len() as f64)
}

/// `0.5·base·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    if step == total {
        return 0.0;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Momentum buffers mirroring the parameters, plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            velocity: params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }
}

/// Classical momentum: `v ← m·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut OptState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.tensors().len() || state.velocity.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), params.tensors().len()),
        ));
    }
    for ((name, p), g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {name}"),
            });
        }
    }
    let (lr, m) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for (((_, p), g), v) in params.tensors_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// One row per optimizer step; validation columns are filled on the last
/// step of each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_srcc: Option<f64>,
    pub val_plcc: Option<f64>,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labelled training and validation videos.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<FrameSequence>,
    pub val: Vec<FrameSequence>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Squared error of one clip and its gradient per parameter.
fn clip_gradient_from(
    params: &ModelParams<f32>,
    clip: &ClipTubes,
    target: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new(params, true, false);
    let out = g.clip(clip)?;
    let t = g.tape.constant(Tensor::new(vec![1, 1], vec![target as f32])?);
    let diff = g.tape.sub(out, t)?;
    let sq = g.tape.mul(diff, diff)?;
    let loss = g.tape.sum(sq)?;
    let value = g.tape.value(loss).item()? as f64;
    let mut grads = g.tape.backward(loss)?;
    let vars = g.param_vars().to_vec();
    Ok((value, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Validation SRCC and PLCC; `None` when undefined.
pub fn evaluate(params: &ModelParams<f32>, videos: &[FrameSequence], opts: &PredictOptions) -> Result<(Option<f64>, Option<f64>)> {
    if videos.len() < 2 {
        return Ok((None, None));
    }
    let scores = videos
        .iter()
        .map(|v| predict(v, params, opts).map(|p| p.score))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = videos.iter().map(|v| v.mos().unwrap_or(f64::NAN)).collect();
    Ok((srcc(&scores, &labels).ok(), plcc(&scores, &labels).ok()))
}

/// Trains `params` on `data.train`; when `out_dir` is given, writes
/// `ckpt_best`, `ckpt_final` and `history.csv` there.
pub fn train_loop(
    data: &Dataset,
    mut params: ModelParams<f32>,
    tcfg: &TrainConfig,
    clip: &ClipOptions,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let targets: Vec<f64> = data
        .train
        .iter()
        .enumerate()
        .map(|(i, v)| v.mos().ok_or_else(|| Error::Config(format!("training video {i} has no MOS label"))))
        .collect::<Result<_>>()?;
    let scale = if tcfg.mos_normalization { DEFAULT_MOS_RANGE.1 } else { 1.0 };
    params.set_output_scale(scale);
    let mcfg: ModelConfig = params.config().clone();
    if clip.frames.div_ceil(mcfg.multires.scales) > mcfg.groups {
        return Err(Error::Config(format!(
            "clip of {} frames does not fit {} groups",
            clip.frames, mcfg.groups
        )));
    }
    let pyramids: Vec<Vec<PyramidGroup>> = data
        .train
        .iter()
        .map(|v| clip_pyramids(v, &mcfg.multires, clip))
        .collect::<Result<_>>()?;

    let mut shuffle_rng = seed::stream(tcfg.seed, seed::DATA_SHUFFLE);
    let mut center_rng = seed::stream(tcfg.seed, seed::CENTER_DRAW);
    let eval_opts = PredictOptions {
        frames: Some(clip.frames),
        strategy: clip.strategy,
        mode: clip.mode,
        ..PredictOptions::default()
    };
    let total = tcfg.total_steps(data.train.len());
    let mut state = OptState::new(&params);
    let mut history: Vec<HistoryRow> = Vec::with_capacity(total);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let step = state.step;
            let lr = cosine_lr(step, total, tcfg.base_lr);
            // tubes are cut sequentially so the centre stream is order-stable
            let clips = batch
                .iter()
                .map(|&i| {
                    tubes_from_pyramids(&pyramids[i], &mcfg.multires, CenterMode::Train, &mut center_rng)
                        .map(|c| (c, targets[i] / scale))
                })
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = if tcfg.deterministic {
                clips.iter().map(|(c, t)| clip_gradient_from(&params, c, *t)).collect()
            } else {
                clips.par_iter().map(|(c, t)| clip_gradient_from(&params, c, *t)).collect()
            };
            let mut loss = 0.0;
            let mut grads: Vec<Tensor<f32>> = params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            let inv = 1.0 / batch.len() as f32;
            for r in results {
                let (l, g) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite { op }) => {
                        return diverged(&params, &state, &history, out_dir, step, format!("non-finite {op}"));
                    }
                    Err(e) => return Err(e),
                };
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b * inv;
                    }
                }
            }
            loss /= batch.len() as f64;
            if !loss.is_finite() {
                return diverged(&params, &state, &history, out_dir, step, "loss is not finite".into());
            }
            if let Some(max_norm) = tcfg.clip_grad_norm {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let k = (max_norm / norm) as f32;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
                }
            }
            let before = params.clone();
            if let Err(e) = sgd_step(&mut params, &grads, &mut state, lr, tcfg.momentum) {
                return diverged(&before, &state, &history, out_dir, step, e.to_string());
            }
            epoch_loss += loss * batch.len() as f64;
            history.push(HistoryRow {
                epoch,
                step,
                lr,
                train_loss: loss,
                val_srcc: None,
                val_plcc: None,
            });
        }

        let (vs, vp) = evaluate(&params, &data.val, &eval_opts)?;
        let last = history.last_mut().expect("each epoch has at least one step");
        last.val_srcc = vs;
        last.val_plcc = vp;
        // without a usable validation split, the lowest epoch loss wins
        let merit = vs.unwrap_or(-epoch_loss / data.train.len() as f64);
        if best.as_ref().is_none_or(|(m, _)| merit > *m) {
            let ck = snapshot(&params, &state, &history);
            if let Some(dir) = out_dir {
                ck.save(&dir.join("ckpt_best.json"))?;
            }
            best = Some((merit, ck));
        }
    }

    let final_checkpoint = snapshot(&params, &state, &history);
    if let Some(dir) = out_dir {
        final_checkpoint.save(&dir.join("ckpt_final.json"))?;
        write_history(&dir.join("history.csv"), &history)?;
    }
    let best_checkpoint = best.map(|(_, c)| c).expect("at least one epoch ran");
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        history,
    })
}

fn snapshot(params: &ModelParams<f32>, state: &OptState<f32>, history: &[HistoryRow]) -> Checkpoint {
    Checkpoint {
        params: params.clone(),
        optimizer: Some(state.clone()),
        history: history.to_vec(),
    }
}

/// Saves the last good state as `ckpt_last_good` and reports divergence.
fn diverged(
    params: &ModelParams<f32>,
    state: &OptState<f32>,
    history: &[HistoryRow],
    out_dir: Option<&Path>,
    step: usize,
    reason: String,
) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        snapshot(params, state, history).save(&dir.join("ckpt_last_good.json"))?;
        write_history(&dir.join("history.csv"), history)?;
    }
    Err(Error::Divergence { step, reason })
}

/// Random initialization from the `init` stream of `tcfg.seed`, then training.
pub fn train_from_scratch(
    data: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    clip: &ClipOptions,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let params = ModelParams::init_random(mcfg, seed::derive(tcfg.seed, seed::INIT))?;
    train_loop(data, params, tcfg, clip, out_dir)
}
