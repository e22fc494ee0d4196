//! Signal containers and temporal operations.
//!
//! Poses, precomputed features and video frames live in small custom
//! little-endian binary containers (magic, shape header, payload) with a
//! JSON fallback for hand-written fixtures. Loaders reject non-finite
//! values. Clipping and frame-skipping are pure and keep the frame-rate
//! metadata consistent.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use serde::Deserialize;
use thiserror::Error;

pub const POSE_MAGIC: &[u8; 8] = b"MMHPOSE1";
pub const FEATURE_MAGIC: &[u8; 8] = b"MMHFEAT1";
pub const VIDEO_MAGIC: &[u8; 8] = b"MMHVID1\0";

/// Frame rate assumed when a JSON fallback file omits `fps`.
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{path:?}: unrecognized container magic {found:?}")]
    BadMagic { path: PathBuf, found: String },
    #[error("{path:?}: truncated file ({detail})")]
    TruncatedFile { path: PathBuf, detail: String },
    #[error("{path:?}: non-finite value in payload")]
    NonFiniteValue { path: PathBuf },
    #[error("{path:?}: invalid shape ({detail})")]
    InvalidShape { path: PathBuf, detail: String },
    #[error("{path:?}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("clip [{start_ms}ms, {end_ms}ms) selects no frames (signal: {frames} frames at {fps} fps)")]
    EmptyClip {
        start_ms: u64,
        end_ms: u64,
        frames: usize,
        fps: f64,
    },
}

/// Keypoint sequence: `[T, K, C]` (frames, keypoints, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Array3<f64>,
    pub fps: f64,
}

/// Precomputed per-frame feature vectors: `[T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Array2<f64>,
    pub fps: f64,
}

/// Raw frames: `[T, H, W, C]` with `C` of 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Array4<u8>,
    pub fps: f64,
}

/// Rendered word images: `[N, H, W]` grayscale, one per source token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub images: Array3<u8>,
    pub source_tokens: Vec<String>,
}

/// Frame-indexed containers that support clipping and subsampling.
pub trait Temporal: Sized {
    fn num_frames(&self) -> usize;
    fn fps(&self) -> f64;
    /// Keeps frames `[start, end)`; `fps` is unchanged.
    fn slice_frames(&self, start: usize, end: usize) -> Self;
    /// Keeps frames `0, stride, 2·stride, …` and divides `fps` by `stride`.
    fn take_every(&self, stride: usize) -> Self;
}

macro_rules! impl_temporal {
    ($ty:ty, $field:ident) => {
        impl Temporal for $ty {
            fn num_frames(&self) -> usize {
                self.$field.shape()[0]
            }
            fn fps(&self) -> f64 {
                self.fps
            }
            fn slice_frames(&self, start: usize, end: usize) -> Self {
                let mut out = self.clone();
                out.$field = self
                    .$field
                    .slice_axis(Axis(0), ndarray::Slice::from(start..end))
                    .to_owned();
                out
            }
            fn take_every(&self, stride: usize) -> Self {
                let mut out = self.clone();
                out.$field = self
                    .$field
                    .slice_axis(Axis(0), ndarray::Slice::from(..).step_by(stride as isize))
                    .to_owned();
                out.fps = self.fps / stride as f64;
                out
            }
        }
    };
}

impl_temporal!(PoseSequence, frames);
impl_temporal!(FeatureSequence, features);
impl_temporal!(FrameSequence, frames);

/// Clips a sequence to `[start_ms, end_ms)`.
///
/// The clip covers the requested interval: the start frame is
/// `floor(start_ms/1000 · fps)` and the end frame `ceil(end_ms/1000 · fps)`,
/// both clamped to `[0, T]`. `end_ms == 0` means "until the end of the
/// signal", so `(0, 0)` returns the sequence unchanged.
pub fn clip_temporal<S: Temporal>(seq: &S, start_ms: u64, end_ms: u64) -> Result<S, SignalError> {
    if start_ms == 0 && end_ms == 0 {
        return Ok(seq.slice_frames(0, seq.num_frames()));
    }
    let t = seq.num_frames();
    let fps = seq.fps();
    let start = ((start_ms as f64 / 1000.0) * fps).floor() as usize;
    let end = if end_ms == 0 {
        t
    } else {
        (((end_ms as f64 / 1000.0) * fps).ceil() as usize).min(t)
    };
    let start = start.min(t);
    if start >= end {
        return Err(SignalError::EmptyClip {
            start_ms,
            end_ms,
            frames: t,
            fps,
        });
    }
    Ok(seq.slice_frames(start, end))
}

/// Keeps every `stride`-th frame; the new length is `ceil(T / stride)`.
pub fn skip_frames<S: Temporal>(seq: &S, stride: usize) -> S {
    assert!(stride >= 1, "stride must be >= 1");
    if stride == 1 {
        return seq.slice_frames(0, seq.num_frames());
    }
    seq.take_every(stride)
}

// ---------------------------------------------------------------------------
// Binary containers
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SignalError> {
        if self.pos + n > self.bytes.len() {
            return Err(SignalError::TruncatedFile {
                path: self.path.to_path_buf(),
                detail: format!(
                    "needed {n} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SignalError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32, SignalError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_slice(&mut self, n: usize, what: &str) -> Result<Vec<f64>, SignalError> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, SignalError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf)
}

fn check_finite(values: &[f64], path: &Path) -> Result<(), SignalError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFiniteValue {
            path: path.to_path_buf(),
        });
    }
    Ok(())
}

fn check_fps(fps: f64, path: &Path) -> Result<(), SignalError> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(SignalError::InvalidShape {
            path: path.to_path_buf(),
            detail: format!("fps must be positive, got {fps}"),
        });
    }
    Ok(())
}

fn looks_like_json(bytes: &[u8]) -> bool {
    bytes
        .iter()
        .find(|b| !b.is_ascii_whitespace())
        .is_some_and(|b| *b == b'{')
}

fn bad_magic(path: &Path, bytes: &[u8]) -> SignalError {
    let found = bytes
        .get(..8)
        .map(|m| String::from_utf8_lossy(m).into_owned())
        .unwrap_or_else(|| format!("{} bytes", bytes.len()));
    SignalError::BadMagic {
        path: path.to_path_buf(),
        found,
    }
}

#[derive(Deserialize)]
struct PoseJson {
    fps: Option<f64>,
    frames: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct FeatureJson {
    fps: Option<f64>,
    features: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct VideoJson {
    fps: Option<f64>,
    frames: Vec<Vec<Vec<Vec<u8>>>>,
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T, SignalError> {
    serde_json::from_slice(bytes).map_err(|source| SignalError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a pose container (binary `MMHPOSE1` or JSON fallback).
pub fn load_pose(path: impl AsRef<Path>) -> Result<PoseSequence, SignalError> {
    load_pose_opts(path, DEFAULT_FPS)
}

/// [`load_pose`] with a configurable fps for JSON files that omit it.
pub fn load_pose_opts(
    path: impl AsRef<Path>,
    json_default_fps: f64,
) -> Result<PoseSequence, SignalError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(POSE_MAGIC) {
        let mut r = Reader::new(&bytes[8..], path);
        let t = r.u32("T")? as usize;
        let k = r.u32("K")? as usize;
        let c = r.u32("C")? as usize;
        let fps = r.f32("fps")? as f64;
        if t < 1 || k < 1 || c < 2 {
            return Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: format!("T={t}, K={k}, C={c} (need T>=1, K>=1, C>=2)"),
            });
        }
        check_fps(fps, path)?;
        let values = r.f32_slice(t * k * c, "pose payload")?;
        check_finite(&values, path)?;
        let frames = Array3::from_shape_vec((t, k, c), values).expect("shape checked");
        return Ok(PoseSequence { frames, fps });
    }
    if looks_like_json(&bytes) {
        let json: PoseJson = parse_json(&bytes, path)?;
        let t = json.frames.len();
        let k = json.frames.first().map_or(0, |f| f.len());
        let c = json
            .frames
            .first()
            .and_then(|f| f.first())
            .map_or(0, |p| p.len());
        if t < 1 || k < 1 || c < 2 {
            return Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: format!("T={t}, K={k}, C={c} (need T>=1, K>=1, C>=2)"),
            });
        }
        let mut values = Vec::with_capacity(t * k * c);
        for frame in &json.frames {
            if frame.len() != k {
                return Err(SignalError::InvalidShape {
                    path: path.to_path_buf(),
                    detail: "ragged keypoint dimension".to_string(),
                });
            }
            for point in frame {
                if point.len() != c {
                    return Err(SignalError::InvalidShape {
                        path: path.to_path_buf(),
                        detail: "ragged channel dimension".to_string(),
                    });
                }
                values.extend_from_slice(point);
            }
        }
        check_finite(&values, path)?;
        let fps = json.fps.unwrap_or(json_default_fps);
        check_fps(fps, path)?;
        let frames = Array3::from_shape_vec((t, k, c), values).expect("shape checked");
        return Ok(PoseSequence { frames, fps });
    }
    Err(bad_magic(path, &bytes))
}

/// Loads a feature container (binary `MMHFEAT1` or JSON fallback).
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence, SignalError> {
    load_features_opts(path, DEFAULT_FPS)
}

/// [`load_features`] with a configurable fps for JSON files that omit it.
pub fn load_features_opts(
    path: impl AsRef<Path>,
    json_default_fps: f64,
) -> Result<FeatureSequence, SignalError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(FEATURE_MAGIC) {
        let mut r = Reader::new(&bytes[8..], path);
        let t = r.u32("T")? as usize;
        let d = r.u32("D")? as usize;
        let fps = r.f32("fps")? as f64;
        if t < 1 || d < 1 {
            return Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: format!("T={t}, D={d} (need T>=1, D>=1)"),
            });
        }
        check_fps(fps, path)?;
        let values = r.f32_slice(t * d, "feature payload")?;
        check_finite(&values, path)?;
        let features = Array2::from_shape_vec((t, d), values).expect("shape checked");
        return Ok(FeatureSequence { features, fps });
    }
    if looks_like_json(&bytes) {
        let json: FeatureJson = parse_json(&bytes, path)?;
        let t = json.features.len();
        let d = json.features.first().map_or(0, |f| f.len());
        if t < 1 || d < 1 {
            return Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: format!("T={t}, D={d} (need T>=1, D>=1)"),
            });
        }
        let mut values = Vec::with_capacity(t * d);
        for row in &json.features {
            if row.len() != d {
                return Err(SignalError::InvalidShape {
                    path: path.to_path_buf(),
                    detail: "ragged feature dimension".to_string(),
                });
            }
            values.extend_from_slice(row);
        }
        check_finite(&values, path)?;
        let fps = json.fps.unwrap_or(json_default_fps);
        check_fps(fps, path)?;
        let features = Array2::from_shape_vec((t, d), values).expect("shape checked");
        return Ok(FeatureSequence { features, fps });
    }
    Err(bad_magic(path, &bytes))
}

/// Loads a video container (binary `MMHVID1\0` or JSON fallback).
pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameSequence, SignalError> {
    load_frames_opts(path, DEFAULT_FPS)
}

/// [`load_frames`] with a configurable fps for JSON files that omit it.
pub fn load_frames_opts(
    path: impl AsRef<Path>,
    json_default_fps: f64,
) -> Result<FrameSequence, SignalError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(VIDEO_MAGIC) {
        let mut r = Reader::new(&bytes[8..], path);
        let t = r.u32("T")? as usize;
        let h = r.u32("H")? as usize;
        let w = r.u32("W")? as usize;
        let c = r.u32("C")? as usize;
        let fps = r.f32("fps")? as f64;
        if t < 1 || h < 1 || w < 1 || !(c == 1 || c == 3) {
            return Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: format!("T={t}, H={h}, W={w}, C={c} (need T,H,W>=1, C in {{1,3}})"),
            });
        }
        check_fps(fps, path)?;
        let payload = r.take(t * h * w * c, "video payload")?.to_vec();
        let frames = Array4::from_shape_vec((t, h, w, c), payload).expect("shape checked");
        return Ok(FrameSequence { frames, fps });
    }
    if looks_like_json(&bytes) {
        let json: VideoJson = parse_json(&bytes, path)?;
        let t = json.frames.len();
        let h = json.frames.first().map_or(0, |f| f.len());
        let w = json.frames.first().and_then(|f| f.first()).map_or(0, |r| r.len());
        let c = json
            .frames
            .first()
            .and_then(|f| f.first())
            .and_then(|r| r.first())
            .map_or(0, |p| p.len());
        if t < 1 || h < 1 || w < 1 || !(c == 1 || c == 3) {
            return Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: format!("T={t}, H={h}, W={w}, C={c} (need T,H,W>=1, C in {{1,3}})"),
            });
        }
        let mut values = Vec::with_capacity(t * h * w * c);
        for frame in &json.frames {
            for row in frame {
                for px in row {
                    if frame.len() != h || row.len() != w || px.len() != c {
                        return Err(SignalError::InvalidShape {
                            path: path.to_path_buf(),
                            detail: "ragged frame dimensions".to_string(),
                        });
                    }
                    values.extend_from_slice(px);
                }
            }
        }
        let fps = json.fps.unwrap_or(json_default_fps);
        check_fps(fps, path)?;
        let frames = Array4::from_shape_vec((t, h, w, c), values).expect("shape checked");
        return Ok(FrameSequence { frames, fps });
    }
    Err(bad_magic(path, &bytes))
}

/// Writes a pose container in the binary format.
pub fn save_pose(seq: &PoseSequence, path: impl AsRef<Path>) -> Result<(), SignalError> {
    let path = path.as_ref();
    let (t, k, c) = seq.frames.dim();
    let mut out = Vec::with_capacity(8 + 16 + t * k * c * 4);
    out.extend_from_slice(POSE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    for v in seq.frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a feature container in the binary format.
pub fn save_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<(), SignalError> {
    let path = path.as_ref();
    let (t, d) = seq.features.dim();
    let mut out = Vec::with_capacity(8 + 12 + t * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    for v in seq.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a video container in the binary format.
pub fn save_frames(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<(), SignalError> {
    let path = path.as_ref();
    let (t, h, w, c) = seq.frames.dim();
    let mut out = Vec::with_capacity(8 + 20 + t * h * w * c);
    out.extend_from_slice(VIDEO_MAGIC);
    for dim in [t, h, w, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    out.extend(seq.frames.iter().copied());
    std::fs::write(path, out).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads only the frame count of a container (cheap filter probe).
pub fn probe_num_frames(path: impl AsRef<Path>) -> Result<usize, SignalError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = |magic: &[u8]| -> Result<usize, SignalError> {
        let mut r = Reader::new(&bytes[magic.len()..], path);
        Ok(r.u32("T")? as usize)
    };
    if bytes.starts_with(POSE_MAGIC) {
        header(POSE_MAGIC)
    } else if bytes.starts_with(FEATURE_MAGIC) {
        header(FEATURE_MAGIC)
    } else if bytes.starts_with(VIDEO_MAGIC) {
        header(VIDEO_MAGIC)
    } else if looks_like_json(&bytes) {
        #[derive(Deserialize)]
        struct AnyFrames {
            frames: Option<serde_json::Value>,
            features: Option<serde_json::Value>,
        }
        let any: AnyFrames = parse_json(&bytes, path)?;
        let arr = any.frames.or(any.features);
        match arr {
            Some(serde_json::Value::Array(a)) => Ok(a.len()),
            _ => Err(SignalError::InvalidShape {
                path: path.to_path_buf(),
                detail: "json fallback without frames/features array".to_string(),
            }),
        }
    } else {
        Err(bad_magic(path, &bytes))
    }
}
