use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{synth_video, SynthSpec};
use super::{Frame, FrameSequence};
use crate::error::{Error, Result};
use crate::seed;

const IMAGE_EXTENSIONS: &[&str] = &["ppm", "pnm", "png"];
const RAW_HEADER: &str = "video.json";
const RAW_BLOB: &str = "video.rgb8";

/// Header of a raw `rgb8` blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Labels {
    mos: f64,
}

/// Loads a frame directory, a raw blob (`.rgb8` or its `.json` header), or a
/// directory holding `video.json` + `video.rgb8`.
pub fn load_frames(path: &Path) -> Result<FrameSequence> {
    if path.is_dir() {
        let header = path.join(RAW_HEADER);
        if header.is_file() {
            return load_raw(&header);
        }
        return load_image_dir(path);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => load_raw(path),
        Some("rgb8") => load_raw(&path.with_extension("json")),
        _ => Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a frame directory or raw video"),
        )),
    }
}

fn load_image_dir(dir: &Path) -> Result<FrameSequence> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no frames in {}", dir.display())));
    }
    let frames = files.iter().map(|p| decode_image(p)).collect::<Result<Vec<_>>>()?;
    let mut seq = FrameSequence::new(frames)?;
    let labels = dir.join("labels.json");
    if labels.is_file() {
        let text = fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?;
        let l: Labels = serde_json::from_str(&text)?;
        seq = seq.with_mos(l.mos)?;
    }
    Ok(seq)
}

fn decode_image(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Frame::new(h as usize, w as usize, data)
}

fn load_raw(header_path: &Path) -> Result<FrameSequence> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: RawHeader = serde_json::from_str(&text)?;
    let blob_path = if header_path.file_name().is_some_and(|n| n == RAW_HEADER) {
        header_path.with_file_name(RAW_BLOB)
    } else {
        header_path.with_extension("rgb8")
    };
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let per_frame = header.height * header.width * 3;
    if header.frames == 0 || per_frame == 0 {
        return Err(Error::Empty(format!("raw video {} has no pixels", blob_path.display())));
    }
    if bytes.len() != per_frame * header.frames {
        return Err(Error::InconsistentDimensions(format!(
            "{} holds {} bytes, header needs {}",
            blob_path.display(),
            bytes.len(),
            per_frame * header.frames
        )));
    }
    let frames = bytes
        .chunks_exact(per_frame)
        .map(|chunk| {
            let data = chunk.iter().map(|&b| b as f32 / 255.0).collect();
            Frame::new(header.height, header.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seq = FrameSequence::new(frames)?;
    seq.frame_rate = header.frame_rate;
    if let Some(m) = header.mos {
        seq = seq.with_mos(m)?;
    }
    Ok(seq)
}

fn to_bytes(frame: &Frame) -> Vec<u8> {
    frame.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
}

/// Writes `frame_000001.ppm`, … and `labels.json` when a label is present.
pub fn save_frames_dir(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        let path = dir.join(format!("frame_{:06}.ppm", i + 1));
        let mut bytes = format!("P6\n{} {}\n255\n", f.width(), f.height()).into_bytes();
        bytes.extend(to_bytes(f));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(mos) = seq.mos() {
        let path = dir.join("labels.json");
        fs::write(&path, serde_json::json!({ "mos": mos }).to_string()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes a raw blob at `header_path` (`.json`) and its `.rgb8` sibling.
pub fn save_raw(seq: &FrameSequence, header_path: &Path) -> Result<()> {
    let (height, width) = seq.dims().ok_or_else(|| Error::Empty("no frames to save".into()))?;
    let header = RawHeader {
        height,
        width,
        frames: seq.len(),
        mos: seq.mos(),
        frame_rate: seq.frame_rate,
    };
    let blob: Vec<u8> = seq.frames().iter().flat_map(to_bytes).collect();
    let blob_path = header_path.with_extension("rgb8");
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(header_path, e))
}

/// One dataset item: a synthetic recipe or a video on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestEntry {
    Synth {
        synth: SynthSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mos: Option<f64>,
    },
}

/// A list of videos plus the seed that synthetic entries derive from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: u64,
    pub videos: Vec<ManifestEntry>,
    /// Directory relative file paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    pub fn synthetic(seed: u64, specs: Vec<(SynthSpec, Option<u64>)>) -> Self {
        Self {
            seed,
            videos: specs.into_iter().map(|(synth, seed)| ManifestEntry::Synth { synth, seed }).collect(),
            base_dir: None,
        }
    }

    /// Seed used for the synthetic entry at `index`.
    pub fn entry_seed(&self, index: usize) -> u64 {
        match &self.videos[index] {
            ManifestEntry::Synth { seed: Some(s), .. } => *s,
            _ => seed::derive(self.seed, &format!("video-{index}")),
        }
    }

    /// Renders or loads every entry, in manifest order.
    pub fn materialize(&self) -> Result<Vec<FrameSequence>> {
        (0..self.videos.len()).map(|i| self.materialize_one(i)).collect()
    }

    pub fn materialize_one(&self, index: usize) -> Result<FrameSequence> {
        match &self.videos[index] {
            ManifestEntry::Synth { synth, .. } => synth_video(synth, self.entry_seed(index)),
            ManifestEntry::File { path, mos } => {
                let full = match &self.base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                if !full.exists() {
                    return Err(Error::io(
                        &full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "video path does not exist"),
                    ));
                }
                let seq = load_frames(&full)?;
                match mos {
                    Some(m) => seq.with_mos(*m),
                    None => Ok(seq),
                }
            }
        }
    }
}
