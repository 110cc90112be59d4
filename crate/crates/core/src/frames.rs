//! Frame ingestion: decoding, resizing, normalization, clip sampling and labels.
//!
//! Frames are stored planar (`C x H x W`) with intensities mapped from 8-bit
//! values by `x / 127.5 - 1`, so every element lies in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use ffad_autograd::Tensor;
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("no frame images found in {0}")]
    EmptyDirectory(PathBuf),
    #[error("failed to decode frame {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("frame {path} is {found}, expected {expected} like the rest of the video")]
    ShapeMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("sequence of {len} frames is too short for clips of {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: line {line}: label {value} is not 0 or 1")]
    Value {
        path: PathBuf,
        line: usize,
        value: i64,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Maps an 8-bit intensity into `[-1, 1]`.
#[inline]
pub fn normalize_intensity(x: u8) -> f32 {
    x as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_intensity`], rounded and clamped to 8 bits.
#[inline]
pub fn denormalize_intensity(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decoded 8-bit image, interleaved `H x W x C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub source_path: PathBuf,
}

impl RawFrame {
    pub fn new(pixels: Vec<u8>, height: usize, width: usize, channels: usize, source_path: PathBuf) -> Result<Self, IngestError> {
        if height == 0 || width == 0 {
            return Err(IngestError::InvalidFrame(format!("empty raw frame {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(IngestError::InvalidFrame(format!("{channels} channels (expected 1 or 3)")));
        }
        if pixels.len() != height * width * channels {
            return Err(IngestError::InvalidFrame(format!(
                "{} bytes for a {height}x{width}x{channels} frame",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            height,
            width,
            channels,
            source_path,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), IngestError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &self.pixels, self.width as u32, self.height as u32, color).map_err(|e| IngestError::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// A normalized frame, planar `C x H x W`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Vec<f32>,
    channels: usize,
    height: usize,
    width: usize,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, IngestError> {
        if channels != 1 && channels != 3 {
            return Err(IngestError::InvalidFrame(format!("{channels} channels (expected 1 or 3)")));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(IngestError::InvalidFrame(format!(
                "{} values for a {channels}x{height}x{width} frame",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(IngestError::InvalidFrame(format!("value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
        })
    }

    /// Frame filled with one value in every channel.
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self, IngestError> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Normalizes a raw frame, resizing bilinearly to `target x target` when given.
    pub fn from_raw(raw: &RawFrame, target: Option<usize>) -> Self {
        let (c, h, w) = (raw.channels, raw.height, raw.width);
        let mut planar = vec![0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    planar[(ch * h + y) * w + x] = normalize_intensity(raw.pixels[(y * w + x) * c + ch]);
                }
            }
        }
        let (oh, ow) = target.map_or((h, w), |t| (t, t));
        let data = if (oh, ow) == (h, w) {
            planar
        } else {
            resize_bilinear(&planar, c, h, w, oh, ow)
        };
        debug_assert!(data.iter().all(|v| (-1.0..=1.0).contains(v)));
        Self {
            data,
            channels: c,
            height: oh,
            width: ow,
        }
    }

    /// Converts a `[1, C, H, W]` (or `[C, H, W]`) tensor, clamping into range.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, IngestError> {
        let (c, h, w) = match t.shape() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            other => return Err(IngestError::InvalidFrame(format!("tensor shape {other:?} is not a single frame"))),
        };
        Self::new(c, h, w, t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn to_raw(&self) -> RawFrame {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut pixels = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[(y * w + x) * c + ch] = denormalize_intensity(self.data[(ch * h + y) * w + x]);
                }
            }
        }
        RawFrame {
            pixels,
            height: h,
            width: w,
            channels: c,
            source_path: PathBuf::new(),
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone()).unwrap()
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let pos = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, pos - i0 as f32)
            })
            .collect()
    };
    let ys = taps(oh, h);
    let xs = taps(ow, w);
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = (top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestConfig {
    /// Square output resolution; `None` keeps the decoded size.
    pub resize_target: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { resize_target: Some(256) }
    }
}

/// The ordered frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub video_id: String,
    pub frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.frames.first().map(Frame::channels)
    }
}

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_frame_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn decode_frame(path: &Path) -> Result<RawFrame, IngestError> {
    let img = image::open(path).map_err(|e| IngestError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (pixels, channels) = match img.color() {
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16 => (img.into_luma8().into_raw(), 1),
        _ => (img.into_rgb8().into_raw(), 3),
    };
    RawFrame::new(pixels, h, w, channels, path.to_path_buf())
}

/// Loads every frame image in `dir`, ordered by file name.
pub fn load_video_frames(dir: &Path, config: &IngestConfig) -> Result<FrameSequence, IngestError> {
    let io = |source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| is_frame_file(p));
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(IngestError::EmptyDirectory(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut reference: Option<(usize, usize, usize)> = None;
    for path in &paths {
        let raw = decode_frame(path)?;
        let dims = (raw.height, raw.width, raw.channels);
        match reference {
            None => reference = Some(dims),
            Some(r) if r != dims => {
                return Err(IngestError::ShapeMismatch {
                    path: path.clone(),
                    found: format!("{}x{}x{}", dims.0, dims.1, dims.2),
                    expected: format!("{}x{}x{}", r.0, r.1, r.2),
                })
            }
            Some(_) => {}
        }
        frames.push(Frame::from_raw(&raw, config.resize_target));
    }
    let video_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FrameSequence { video_id, frames })
}

/// `history_len + 1` consecutive frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub video_id: String,
    pub start_index: usize,
}

impl Clip {
    /// The frames fed to the generator (all but the last).
    pub fn history(&self) -> &[Frame] {
        &self.frames[..self.frames.len() - 1]
    }

    /// The frame to be predicted.
    pub fn target(&self) -> &Frame {
        self.frames.last().expect("clip is never empty")
    }
}

/// Picks `history_len + 1` consecutive frames with a uniformly random start.
pub fn sample_clip<R: Rng + ?Sized>(seq: &FrameSequence, history_len: usize, rng: &mut R) -> Result<Clip, IngestError> {
    let needed = history_len + 1;
    if seq.len() < needed {
        return Err(IngestError::TooShort { len: seq.len(), needed });
    }
    let start = rng.random_range(0..=seq.len() - needed);
    Ok(Clip {
        frames: seq.frames[start..start + needed].to_vec(),
        video_id: seq.video_id.clone(),
        start_index: start,
    })
}

/// Per-frame ground truth, 1 = abnormal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeries {
    pub video_id: String,
    pub labels: Vec<u8>,
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One label per line, as read by [`load_labels`].
    pub fn to_text(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Parses label text: one `0`/`1` per line, or `frame_index,label` rows.
pub fn parse_labels(text: &str, path: &Path, video_id: &str) -> Result<LabelSeries, IngestError> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| IngestError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let value_field = match line.split_once(',') {
            Some((idx, value)) => {
                let idx = idx.trim();
                let Ok(idx) = idx.parse::<usize>() else {
                    // tolerate a `frame_index,label` header row
                    if labels.is_empty() && idx.chars().any(|c| c.is_alphabetic()) {
                        continue;
                    }
                    return Err(parse_err(format!("bad frame index {idx:?}")));
                };
                if idx != labels.len() {
                    return Err(parse_err(format!("frame index {idx} out of order, expected {}", labels.len())));
                }
                value.trim()
            }
            None => line,
        };
        let value: i64 = value_field.parse().map_err(|_| parse_err(format!("not an integer: {value_field:?}")))?;
        if value != 0 && value != 1 {
            return Err(IngestError::Value {
                path: path.to_path_buf(),
                line: lineno,
                value,
            });
        }
        labels.push(value as u8);
    }
    Ok(LabelSeries {
        video_id: video_id.to_string(),
        labels,
    })
}

pub fn load_labels(path: &Path) -> Result<LabelSeries, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let video_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_labels(&text, path, &video_id)
}

/// Loads every video directory under `<root>/<split>/`, sorted by video id.
pub fn load_split(root: &Path, split: &str, config: &IngestConfig) -> Result<Vec<FrameSequence>, IngestError> {
    let dir = root.join(split);
    let io = |source| IngestError::Io { path: dir.clone(), source };
    let mut videos: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(IngestError::EmptyDirectory(dir));
    }
    videos.iter().map(|v| load_video_frames(v, config)).collect()
}

/// Labels for `video_id` from `<root>/labels/<video_id>.txt`.
pub fn labels_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("labels").join(format!("{video_id}.txt"))
}
