//! Per-frame regularity scores: PSNR of the prediction against the true
//! frame, min-max normalized within each video.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::frames::{Frame, FrameSequence};
use crate::predictor::{stack_history, Generator, ModelError};

pub const PSNR_EPSILON: f64 = 1e-10;
/// Below this PSNR range a series counts as constant.
pub const DEGENERATE_RANGE: f64 = 1e-9;
pub const CSV_HEADER: &str = "frame_index,psnr_db,score";

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("video {video_id} has {len} frames, scoring needs more than {history}")]
    TooShort { video_id: String, len: usize, history: usize },
    #[error("cannot normalize an empty series")]
    EmptySeries,
    #[error("non-finite PSNR {value} at position {index}")]
    NonFinite { index: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

/// PSNR in dB with both frames mapped from [-1, 1] to [0, 1] and peak 1.
pub fn psnr(gt: &Frame, pred: &Frame) -> Result<f64, ScoreError> {
    if gt.dims() != pred.dims() {
        return Err(ScoreError::ShapeMismatch(gt.dims(), pred.dims()));
    }
    let sum: f64 = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| {
            let d = 0.5 * (a as f64 - b as f64);
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sum / gt.data().len() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (1.0 / (mse + PSNR_EPSILON)).log10()
}

/// Min-max normalization to [0, 1]; a constant series maps to all ones.
pub fn normalize_scores(psnr: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if psnr.is_empty() {
        return Err(ScoreError::EmptySeries);
    }
    if let Some((index, &value)) = psnr.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(ScoreError::NonFinite { index, value });
    }
    let lo = psnr.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < DEGENERATE_RANGE {
        return Ok(vec![1.0; psnr.len()]);
    }
    Ok(psnr.iter().map(|p| ((p - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// Scores of one video. Entry `i` belongs to frame `i + frame_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub psnr: Vec<f64>,
    pub s: Vec<f64>,
    pub frame_offset: usize,
}

impl ScoreSeries {
    pub fn from_psnr(video_id: &str, psnr: Vec<f64>, frame_offset: usize) -> Result<Self, ScoreError> {
        let s = normalize_scores(&psnr)?;
        Ok(Self {
            video_id: video_id.to_string(),
            psnr,
            s,
            frame_offset,
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (i, (p, s)) in self.psnr.iter().zip(&self.s).enumerate() {
            let _ = writeln!(out, "{},{p:.6},{s:.9}", i + self.frame_offset);
        }
        out
    }

    pub fn from_csv(video_id: &str, text: &str, path: &Path) -> Result<Self, ScoreError> {
        let bad = |reason: String| ScoreError::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(bad(format!("missing header {CSV_HEADER}")));
        }
        let (mut idx, mut psnr, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let row = || bad(format!("malformed row {}: {line:?}", n + 2));
            if f.len() != 3 {
                return Err(row());
            }
            idx.push(f[0].parse::<usize>().map_err(|_| row())?);
            psnr.push(f[1].parse::<f64>().map_err(|_| row())?);
            s.push(f[2].parse::<f64>().map_err(|_| row())?);
        }
        let frame_offset = *idx.first().ok_or_else(|| bad("no rows".into()))?;
        if idx.iter().enumerate().any(|(i, &k)| k != frame_offset + i) {
            return Err(bad("frame indices are not consecutive".into()));
        }
        Ok(Self {
            video_id: video_id.to_string(),
            psnr,
            s,
            frame_offset,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        fs::write(path, self.to_csv()).map_err(|source| ScoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn check_length(generator: &Generator, seq: &FrameSequence) -> Result<usize, ScoreError> {
    let t = generator.config.input_frames;
    if seq.len() <= t {
        return Err(ScoreError::TooShort {
            video_id: seq.video_id.clone(),
            len: seq.len(),
            history: t,
        });
    }
    Ok(t)
}

/// Prediction of every frame `k >= t` from frames `k-t..k`.
pub fn predict_video(generator: &Generator, seq: &FrameSequence) -> Result<Vec<Frame>, ScoreError> {
    let t = check_length(generator, seq)?;
    (t..seq.len())
        .map(|k| {
            let input = stack_history(&seq.frames[k - t..k])?;
            Ok(Frame::from_tensor(&generator.predict_batch(&input)?).expect("generator output is a frame"))
        })
        .collect()
}

/// Scores from predictions of frames `t..`, as returned by [`predict_video`].
pub fn score_predictions(seq: &FrameSequence, predictions: &[Frame], t: usize) -> Result<ScoreSeries, ScoreError> {
    let values = seq.frames[t..]
        .iter()
        .zip(predictions)
        .map(|(gt, pred)| psnr(gt, pred))
        .collect::<Result<Vec<_>, _>>()?;
    ScoreSeries::from_psnr(&seq.video_id, values, t)
}

/// PSNR of each frame `k >= t` against the prediction from frames `k-t..k`.
pub fn score_video(generator: &Generator, seq: &FrameSequence) -> Result<ScoreSeries, ScoreError> {
    let predictions = predict_video(generator, seq)?;
    score_predictions(seq, &predictions, generator.config.input_frames)
}

pub fn score_videos(generator: &Generator, videos: &[FrameSequence]) -> Result<Vec<ScoreSeries>, ScoreError> {
    videos.iter().map(|v| score_video(generator, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Frame::filled(3, 4, 4, 0.3).unwrap();
        assert!((psnr(&a, &a).unwrap() - 100.0).abs() < 1e-9);
        // a gap of 0.2 in [-1,1] is 0.1 in [0,1], so MSE = 0.01
        let b = Frame::filled(3, 4, 4, 0.1).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        let (lo, hi) = (Frame::filled(1, 2, 2, -1.0).unwrap(), Frame::filled(1, 2, 2, 1.0).unwrap());
        assert!(psnr(&lo, &hi).unwrap().abs() < 1e-8);
        assert!(matches!(psnr(&a, &lo), Err(ScoreError::ShapeMismatch(..))));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_scores(&[10.0, 20.0, 30.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[30.0, 10.0, 20.0]).unwrap(), vec![1.0, 0.0, 0.5]);
        assert_eq!(normalize_scores(&[7.0; 4]).unwrap(), vec![1.0; 4]);
        assert!(matches!(normalize_scores(&[]), Err(ScoreError::EmptySeries)));
        assert!(matches!(normalize_scores(&[1.0, f64::NAN]), Err(ScoreError::NonFinite { index: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let s = ScoreSeries::from_psnr("v", vec![30.0, 10.0, 20.0], 4).unwrap();
        let back = ScoreSeries::from_csv("v", &s.to_csv(), Path::new("x.csv")).unwrap();
        assert_eq!(back.frame_offset, 4);
        assert_eq!(back.s, s.s);
        assert!(s.to_csv().starts_with("frame_index,psnr_db,score\n4,30.000000,1.000000000\n"));
    }
}
