//! C ABI for scoring videos with a trained checkpoint.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns an [`MretStatus`];
//! on failure the message is available from [`mret_last_error_message`] on
//! the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mret::model::{count_flops, count_params, predict, Checkpoint, ModelParams, PredictOptions};
use mret::multires::SamplingMode;
use mret::videoio::{load_frames, Frame, FrameSequence, FrameStrategy};
use mret::Error;

/// A loaded checkpoint.
pub struct MretModel {
    params: ModelParams<f32>,
}

/// A decoded frame sequence.
pub struct MretVideo {
    seq: FrameSequence,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MretStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Shape = 5,
    NonFinite = 6,
    UndefinedCorrelation = 7,
    Format = 8,
    Panic = 9,
    Internal = 10,
}

pub const MRET_MODE_MRET: i32 = 0;
pub const MRET_MODE_RANDOM: i32 = 1;
pub const MRET_MODE_HIGHRES_LAST: i32 = 2;
pub const MRET_MODE_FIXED: i32 = 3;

pub const MRET_STRATEGY_UNIFORM: i32 = 0;
pub const MRET_STRATEGY_FRONT: i32 = 1;
pub const MRET_STRATEGY_CENTER: i32 = 2;

/// Scoring options. Zero-initialized options select the defaults.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MretScoreOptions {
    /// Clip length in frames; 0 uses the model's full clip.
    pub frames: usize,
    /// One of the `MRET_MODE_*` constants.
    pub mode: i32,
    /// One of the `MRET_STRATEGY_*` constants.
    pub strategy: i32,
    /// Seed for the random sampling mode.
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> MretStatus {
    match e {
        Error::Io { .. } => MretStatus::Io,
        Error::Config(_) | Error::OutOfRange(_) | Error::MissingTensor(_) => MretStatus::Config,
        Error::Shape { .. } | Error::InconsistentDimensions(_) | Error::Empty(_) => MretStatus::Shape,
        Error::NonFinite { .. } => MretStatus::NonFinite,
        Error::UndefinedCorrelation(_) => MretStatus::UndefinedCorrelation,
        Error::Json(_) | Error::Image { .. } | Error::Csv(_) => MretStatus::Format,
        _ => MretStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (MretStatus, String)>) -> MretStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MretStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mret");
            MretStatus::Panic
        }
    }
}

fn lift(e: Error) -> (MretStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MretStatus, String) {
    (MretStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (MretStatus, String) {
    (MretStatus::InvalidArgument, msg)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (MretStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8".into()))
}

/// Loads a checkpoint manifest (and its sibling blob) into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mret_model_load(path: *const c_char, out: *mut *mut MretModel) -> MretStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let params = Checkpoint::load(&path).map_err(lift)?.params;
        *out = Box::into_raw(Box::new(MretModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mret_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mret_model_free(model: *mut MretModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a frame directory or raw video into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mret_video_load(path: *const c_char, out: *mut *mut MretVideo) -> MretStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let seq = load_frames(&path).map_err(lift)?;
        *out = Box::into_raw(Box::new(MretVideo { seq }));
        Ok(())
    })
}

/// Builds a video from `frames × height × width × 3` interleaved RGB bytes.
///
/// # Safety
/// `data` must point to `frames·height·width·3` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn mret_video_from_rgb8(
    data: *const u8,
    frames: usize,
    height: usize,
    width: usize,
    out: *mut *mut MretVideo,
) -> MretStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() {
            return Err(null("data"));
        }
        let per_frame = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| invalid("frame size overflows".into()))?;
        let total = per_frame
            .checked_mul(frames)
            .ok_or_else(|| invalid("video size overflows".into()))?;
        if total == 0 {
            return Err(invalid("frames, height and width must be at least 1".into()));
        }
        let bytes = std::slice::from_raw_parts(data, total);
        let list = bytes
            .chunks(per_frame)
            .map(|c| Frame::new(height, width, c.iter().map(|&b| b as f32 / 255.0).collect()))
            .collect::<mret::Result<Vec<_>>>()
            .map_err(lift)?;
        let seq = FrameSequence::new(list).map_err(lift)?;
        *out = Box::into_raw(Box::new(MretVideo { seq }));
        Ok(())
    })
}

/// # Safety
/// `video` must come from a `mret_video_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mret_video_free(video: *mut MretVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

fn decode_options(o: &MretScoreOptions) -> Result<PredictOptions, (MretStatus, String)> {
    let mode = match o.mode {
        MRET_MODE_MRET => SamplingMode::Mret,
        MRET_MODE_RANDOM => SamplingMode::Random,
        MRET_MODE_HIGHRES_LAST => SamplingMode::HighresLast,
        MRET_MODE_FIXED => SamplingMode::Fixed,
        m => return Err(invalid(format!("unknown sampling mode {m}"))),
    };
    let strategy = match o.strategy {
        MRET_STRATEGY_UNIFORM => FrameStrategy::Uniform,
        MRET_STRATEGY_FRONT => FrameStrategy::Front,
        MRET_STRATEGY_CENTER => FrameStrategy::Center,
        s => return Err(invalid(format!("unknown frame strategy {s}"))),
    };
    Ok(PredictOptions {
        frames: (o.frames > 0).then_some(o.frames),
        strategy,
        mode,
        retain_attention: false,
        seed: o.seed,
    })
}

/// Scores `video`; `options` may be null for defaults.
///
/// # Safety
/// `model` and `video` must be live handles, `options` null or valid, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mret_model_score(
    model: *const MretModel,
    video: *const MretVideo,
    options: *const MretScoreOptions,
    out: *mut f64,
) -> MretStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let video = video.as_ref().ok_or_else(|| null("video"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = decode_options(&options.as_ref().copied().unwrap_or_default())?;
        *out = predict(&video.seq, &model.params, &opts).map_err(lift)?.score;
        Ok(())
    })
}

/// Analytic parameter count and GFLOPs for a clip of `frames` frames
/// (0 = the model's full clip).
///
/// # Safety
/// `model` must be a live handle; `params` and `gflops` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mret_model_counts(
    model: *const MretModel,
    frames: usize,
    params: *mut u64,
    gflops: *mut f64,
) -> MretStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if params.is_null() || gflops.is_null() {
            return Err(null("out"));
        }
        let cfg = model.params.config();
        let frames = if frames == 0 { cfg.clip_frames() } else { frames };
        *params = count_params(cfg);
        *gflops = count_flops(cfg, frames) / 1e9;
        Ok(())
    })
}

unsafe fn pair<'a>(a: *const f64, b: *const f64, n: usize) -> Result<(&'a [f64], &'a [f64]), (MretStatus, String)> {
    if n == 0 {
        return Ok((&[], &[]));
    }
    if a.is_null() || b.is_null() {
        return Err(null("input"));
    }
    Ok((std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n)))
}

/// Spearman rank correlation of two length-`n` arrays.
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mret_srcc(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> MretStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = pair(a, b, n)?;
        *out = mret::metrics::srcc(a, b).map_err(lift)?;
        Ok(())
    })
}

/// Pearson linear correlation of two length-`n` arrays.
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mret_plcc(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> MretStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = pair(a, b, n)?;
        *out = mret::metrics::plcc(a, b).map_err(lift)?;
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mret_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mret_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
