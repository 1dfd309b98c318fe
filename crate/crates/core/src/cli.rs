//! The `mret` command line: training, scoring, evaluation, geometry
//! inspection and analytic counters.
//!
//! Every command prints one JSON document on stdout. Failures print a single
//! JSON line `{"error": kind, "message": text}` on stderr and exit with 1, or
//! with 2 when training diverged.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::{plcc, srcc};
use crate::model::{
    count_flops, count_macs, count_params, load_image_embedding, predict, Checkpoint, ModelConfig, ModelParams,
    PredictOptions,
};
use crate::multires::{
    center_range, choose_center, clip_pyramids, patch_centers, sample_tubes, CenterMode, ClipOptions,
    MultiResConfig, SamplingMode,
};
use crate::rollout::{spatial_heatmap, temporal_profile, write_overlay_png, write_pgm, write_profile_csv};
use crate::seed;
use crate::train::{train_loop, Dataset, TrainConfig};
use crate::videoio::{load_frames, ChannelNorm, save_raw, synth_video, Distortion, FrameSequence, FrameStrategy, Manifest, ManifestEntry, Pattern, SynthSpec};

/// Name of the resolved configuration written next to training outputs.
pub const LOCK_FILE: &str = "config.lock.json";

/// Model hyperparameters; the pyramid lives in its own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub groups: usize,
    pub head_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<ChannelNorm>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            spatial_layers: m.spatial_layers,
            temporal_layers: m.temporal_layers,
            heads: m.heads,
            mlp_dim: m.mlp_dim,
            groups: m.groups,
            head_hidden: m.head_hidden,
            input_norm: m.input_norm,
        }
    }
}

/// Dataset manifests; relative paths resolve against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Tensor file holding a `patch_embedding` for central-frame init.
    pub image_embedding: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    /// Clip length; defaults to `groups · scales`.
    pub frames: Option<usize>,
    pub strategy: FrameStrategy,
    pub mode: SamplingMode,
}

/// Seeds of the named random streams, recorded for reproducibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedLog {
    pub root: u64,
    pub data_shuffle: u64,
    pub center_draw: u64,
    pub init: u64,
}

impl SeedLog {
    pub fn from_root(root: u64) -> Self {
        Self {
            root,
            data_shuffle: seed::derive(root, seed::DATA_SHUFFLE),
            center_draw: seed::derive(root, seed::CENTER_DRAW),
            init: seed::derive(root, seed::INIT),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub multires: MultiResConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedLog>,
}

impl RunConfig {
    /// Parses a config file and makes data paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let Some(log) = &cfg.seeds {
            if *log != SeedLog::from_root(log.root) || log.root != cfg.train.seed {
                return Err(Error::Config("seeds section does not match train.seed".into()));
            }
        }
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.image_embedding]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            dim: m.dim,
            spatial_layers: m.spatial_layers,
            temporal_layers: m.temporal_layers,
            heads: m.heads,
            mlp_dim: m.mlp_dim,
            groups: m.groups,
            head_hidden: m.head_hidden,
            multires: self.multires,
            output_scale: 1.0,
            input_norm: m.input_norm,
        }
    }

    pub fn clip_options(&self) -> ClipOptions {
        ClipOptions {
            frames: self.sampling.frames.unwrap_or(self.model.groups * self.multires.scales),
            strategy: self.sampling.strategy,
            mode: self.sampling.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if self.clip_options().frames == 0 {
            return Err(Error::Config("sampling.frames must be at least 1".into()));
        }
        Ok(())
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if o.deterministic {
            self.train.deterministic = true;
        }
        if let Some(f) = o.sampling.frames {
            self.sampling.frames = Some(f);
        }
        if let Some(m) = o.sampling.mode {
            self.sampling.mode = m;
        }
        if let Some(s) = o.sampling.strategy {
            self.sampling.strategy = s;
        }
        self.seeds = Some(SeedLog::from_root(self.train.seed));
    }
}

#[derive(Debug, Parser)]
#[command(name = "mret", version, about = "Multi-resolution Transformer video quality model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score one video with a checkpoint.
    Score(ScoreArgs),
    /// Score a labelled manifest and report SRCC/PLCC.
    Eval(EvalArgs),
    /// Dump the patch geometry for one frame group of a video.
    Inspect(InspectArgs),
    /// Analytic parameter and FLOP counts.
    Counts(CountsArgs),
    /// Write a manifest of labelled synthetic videos.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct SamplingFlags {
    /// Clip length in frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Patch sampling: mret, random, highres_last or fixed.
    #[arg(long)]
    pub mode: Option<SamplingMode>,
    /// Clip frame selection: uniform, front or center.
    #[arg(long)]
    pub strategy: Option<FrameStrategy>,
}

#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub video: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Seed for the random sampling mode.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for attention rollout maps and trace metadata.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Multiply raw attention without the identity correction.
    #[arg(long)]
    pub no_residual: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub group: usize,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CountsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Manifest path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Severity levels, evenly spaced over [0, 0.9].
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Videos per level.
    #[arg(long, default_value_t = 1)]
    pub per_level: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 20)]
    pub width: usize,
    #[arg(long, default_value = "checker")]
    pub pattern: String,
    #[arg(long, default_value = "gaussian-blur")]
    pub distortion: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render each video to a raw file next to the manifest.
    #[arg(long)]
    pub render: bool,
}

/// Parses `std::env::args`, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("{}", json!({ "error": e.kind(), "message": message }));
            ExitCode::from(if matches!(e, Error::Divergence { .. }) { 2 } else { 1 })
        }
    }
}

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Counts(a) => cmd_counts(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn load_manifest(path: &Path) -> Result<Vec<FrameSequence>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest does not exist"),
        ));
    }
    let m = Manifest::load(path)?;
    (0..m.videos.len()).into_par_iter().map(|i| m.materialize_one(i)).collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&a.overrides);
    cfg.validate()?;
    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let data = Dataset {
        train: load_manifest(&train_path)?,
        val: match &cfg.data.val {
            Some(p) => load_manifest(p)?,
            None => Vec::new(),
        },
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let lock = a.out.join(LOCK_FILE);
    fs::write(&lock, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&lock, e))?;

    let mcfg = cfg.model_config();
    let mut params = ModelParams::<f32>::init_random(&mcfg, seed::derive(cfg.train.seed, seed::INIT))?;
    if let Some(p) = &cfg.data.image_embedding {
        params.set_image_embedding(&load_image_embedding(p, mcfg.dim, mcfg.multires.patch_size)?)?;
    }
    let outcome = train_loop(&data, params, &cfg.train, &cfg.clip_options(), Some(&a.out))?;
    let last = outcome.history.last();
    Ok(json!({
        "steps": outcome.history.len(),
        "final_loss": last.map(|r| r.train_loss),
        "val_srcc": last.and_then(|r| r.val_srcc),
        "out": a.out,
    }))
}

fn predict_options(params: &ModelParams<f32>, flags: &SamplingFlags, seed: u64, retain: bool) -> PredictOptions {
    PredictOptions {
        frames: flags.frames.or(Some(params.config().clip_frames())),
        strategy: flags.strategy.unwrap_or_default(),
        mode: flags.mode.unwrap_or_default(),
        retain_attention: retain,
        seed,
    }
}

pub fn cmd_score(a: &ScoreArgs) -> Result<Value> {
    let params = Checkpoint::load(&a.ckpt)?.params;
    let video = load_frames(&a.video)?;
    let opts = predict_options(&params, &a.sampling, a.seed, a.trace.is_some());
    let pred = predict(&video, &params, &opts)?;
    if let Some(dir) = &a.trace {
        write_trace(dir, &video, &params, &opts, &pred.trace, !a.no_residual)?;
    }
    Ok(json!({ "score": pred.score }))
}

fn write_trace(
    dir: &Path,
    video: &FrameSequence,
    params: &ModelParams<f32>,
    opts: &PredictOptions,
    trace: &crate::model::ForwardTrace,
    residual: bool,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &params.config().multires;
    let clip = ClipOptions {
        frames: opts.frames.unwrap_or(params.config().clip_frames()),
        strategy: opts.strategy,
        mode: opts.mode,
    };
    let pyramids = clip_pyramids(video, cfg, &clip)?;
    let g = cfg.grid_size;
    for (i, pyr) in pyramids.iter().enumerate() {
        let map = spatial_heatmap(trace, i, residual)?;
        write_pgm(&dir.join(format!("spatial_{:03}.pgm", i + 1)), &map.values, g, g)?;
        let center = choose_center(pyr, g, CenterMode::Infer, &mut ChaCha8Rng::seed_from_u64(0));
        let centers = patch_centers(cfg, &center, 1)?;
        let overlay = dir.join(format!("overlay_{:03}.png", i + 1));
        write_overlay_png(&overlay, &pyr.frames[0], &map, &centers, center.windows[0].pitch)?;
    }
    write_profile_csv(&dir.join("temporal.csv"), &temporal_profile(trace, residual)?)?;
    let meta = dir.join("trace.json");
    let doc = json!({ "trace": trace, "residual": residual });
    fs::write(&meta, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&meta, e))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let params = Checkpoint::load(&a.ckpt)?.params;
    let videos = load_manifest(&a.manifest)?;
    let labels: Vec<f64> = videos
        .iter()
        .enumerate()
        .map(|(i, v)| v.mos().ok_or_else(|| Error::Config(format!("video {i} has no MOS label"))))
        .collect::<Result<_>>()?;
    if videos.len() < 2 {
        return Err(Error::Empty(format!("need ≥ 2 labelled videos, got {}", videos.len())));
    }
    let opts = predict_options(&params, &a.sampling, a.seed, false);
    let scores: Vec<f64> = videos
        .par_iter()
        .map(|v| predict(v, &params, &opts).map(|p| p.score))
        .collect::<Result<_>>()?;
    Ok(json!({
        "srcc": srcc(&scores, &labels)?,
        "plcc": plcc(&scores, &labels)?,
        "n": videos.len(),
    }))
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<Value> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: None,
        deterministic: false,
        sampling: SamplingFlags {
            frames: a.sampling.frames,
            mode: a.sampling.mode,
            strategy: a.sampling.strategy,
        },
    });
    cfg.multires.validate()?;
    let mr = cfg.multires;
    let video = load_frames(&a.video)?;
    let pyramids = clip_pyramids(&video, &mr, &cfg.clip_options())?;
    let pyr = pyramids.get(a.group).ok_or_else(|| {
        Error::OutOfRange(format!("group {} outside 0..{}", a.group, pyramids.len()))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let center = choose_center(pyr, mr.grid_size, CenterMode::Infer, &mut rng);
    let tubes = sample_tubes(pyr, &center, &mr, &mut rng)?;
    let centers = (1..=mr.scales)
        .map(|s| patch_centers(&mr, &center, s))
        .collect::<Result<Vec<_>>>()?;
    let normalized: Vec<Vec<(f64, f64)>> = centers
        .iter()
        .zip(&center.windows)
        .map(|(cs, w)| {
            cs.iter()
                .map(|&(y, x)| ((y - w.top as f64) / w.side as f64, (x - w.left as f64) / w.side as f64))
                .collect()
        })
        .collect();
    let (lo, hi) = center_range(pyr, mr.grid_size);
    Ok(json!({
        "group": a.group,
        "groups": pyramids.len(),
        "mode": pyr.mode,
        "pitches": pyr.layout.iter().map(|l| l.pitch).collect::<Vec<_>>(),
        "sides": pyr.layout.iter().map(|l| l.side).collect::<Vec<_>>(),
        "frame_dims": pyr.frames.iter().map(|f| [f.height(), f.width()]).collect::<Vec<_>>(),
        "center": center.c,
        "center_range": [lo, hi],
        "windows": center.windows,
        "patch_centers": centers,
        "normalized_centers": normalized,
        "boxes": tubes.boxes,
    }))
}

pub fn cmd_counts(a: &CountsArgs) -> Result<Value> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mcfg = cfg.model_config();
    mcfg.validate()?;
    let frames = a.frames.unwrap_or(mcfg.clip_frames());
    if frames == 0 || frames.div_ceil(mcfg.multires.scales) > mcfg.groups {
        return Err(Error::Config(format!(
            "{frames} frames do not fit {} groups of {}",
            mcfg.groups, mcfg.multires.scales
        )));
    }
    Ok(json!({
        "params": count_params(&mcfg),
        "gflops": count_flops(&mcfg, frames) / 1e9,
        "gmacs": count_macs(&mcfg, frames) / 1e9,
        "frames": frames,
    }))
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Value> {
    if a.levels == 0 || a.per_level == 0 {
        return Err(Error::Config("levels and per_level must be at least 1".into()));
    }
    let pattern: Pattern = parse_enum(&a.pattern, "pattern")?;
    let distortion: Distortion = parse_enum(&a.distortion, "distortion")?;
    let mut manifest = Manifest::synthetic(a.seed, Vec::new());
    for level in 0..a.levels {
        let severity = if a.levels == 1 { 0.0 } else { 0.9 * level as f64 / (a.levels - 1) as f64 };
        for _ in 0..a.per_level {
            let spec = SynthSpec {
                pattern,
                distortion,
                severity,
                frames: a.frames,
                height: a.height,
                width: a.width,
            };
            manifest.videos.push(ManifestEntry::Synth { synth: spec, seed: None });
        }
    }
    if a.render {
        let dir = a.out.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(manifest.videos.len());
        for (i, entry) in manifest.videos.iter().enumerate() {
            let ManifestEntry::Synth { synth, .. } = entry else { unreachable!() };
            let seq = synth_video(synth, manifest.entry_seed(i))?;
            let name = format!("video_{:03}.json", i + 1);
            save_raw(&seq, &dir.join(&name))?;
            files.push(ManifestEntry::File {
                path: name.into(),
                mos: None,
            });
        }
        manifest.videos = files;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&a.out, e))?;
    Ok(json!({ "videos": manifest.videos.len(), "manifest": a.out }))
}
