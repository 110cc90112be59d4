//! Frame-level ROC/AUC, score gap, reports and the loss-ablation harness.
//!
//! Scores from all videos are normalized per video and then concatenated
//! into one frame-level AUC. The anomaly score is `1 - S` and abnormal
//! frames are the positive class; ties earn half credit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::flow::{FlowError, FlowEstimator, FlowEstimatorSpec};
use crate::frames::{FrameSequence, LabelSeries};
use crate::losses::LossWeights;
use crate::scorer::{self, ScoreError, ScoreSeries};
use crate::trainer::{self, TrainConfig, TrainError, TrainOutputs};

pub const AGGREGATION_NOTE: &str =
    "scores min-max normalized per video, then concatenated into one frame-level AUC; the first t frames of each video are unscored";
pub const NO_FLOW_LABEL: &str = "without motion constraint";
pub const WITH_FLOW_LABEL: &str = "with motion constraint";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("labels contain only class {0}; AUC needs both normal and abnormal frames")]
    SingleClass(u8),
    #[error("{what}: {scores} scores vs {labels} labels")]
    LengthMismatch { what: String, scores: usize, labels: usize },
    #[error("no labels for video {0}")]
    MissingLabels(String),
    #[error("label {value} at position {index} is not 0 or 1")]
    BadLabel { index: usize, value: u8 },
    #[error("invalid ablation grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            what: "frame_auc".into(),
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(EvalError::BadLabel { index, value });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass(if pos == 0 { 0 } else { 1 }));
    }
    Ok((pos, neg))
}

/// Area under the ROC of anomaly score `1 - S`, via midranks.
pub fn frame_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    // rank by descending S, which is ascending anomaly score
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j share midrank (i + 1 + j) / 2
        let midrank = (i + 1 + j) as f64 / 2.0;
        let p = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += midrank * p as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Frames with anomaly score `>= threshold` are flagged.
    pub threshold: f64,
}

/// ROC from `(0, 0)` to `(1, 1)`, one point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: 1.0 - s,
        });
    }
    Ok(points)
}

pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Mean normal score minus mean abnormal score.
pub fn score_gap(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = check_inputs(scores, labels).map_err(|e| match e {
        EvalError::LengthMismatch { scores, labels, .. } => EvalError::LengthMismatch {
            what: "score_gap".into(),
            scores,
            labels,
        },
        e => e,
    })?;
    let (mut sn, mut sa) = (0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            sa += s;
        } else {
            sn += s;
        }
    }
    Ok(sn / neg as f64 - sa / pos as f64)
}

/// The labels of the scored frames of one video.
pub fn align_labels(series: &ScoreSeries, labels: &LabelSeries) -> Result<LabelSeries, EvalError> {
    let expected = series.frame_offset + series.len();
    if labels.len() != expected {
        return Err(EvalError::LengthMismatch {
            what: format!("video {} has {expected} frames but its label file", series.video_id),
            scores: expected,
            labels: labels.len(),
        });
    }
    Ok(LabelSeries {
        video_id: labels.video_id.clone(),
        labels: labels.labels[series.frame_offset..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Loss variant, e.g. `int+gd+op+adv`.
    pub variant: String,
    /// Free-form run label such as [`NO_FLOW_LABEL`].
    pub label: Option<String>,
    pub auc: f64,
    pub delta_s: f64,
    /// Mean squared difference between the flow of (prediction, previous) and (truth, previous).
    pub flow_mse: Option<f64>,
    pub per_video: Vec<(ScoreSeries, LabelSeries)>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn concatenated(&self) -> (Vec<f64>, Vec<u8>) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (series, labels) in &self.per_video {
            s.extend_from_slice(&series.s);
            l.extend_from_slice(&labels.labels);
        }
        (s, l)
    }

    pub fn roc(&self) -> Result<Vec<RocPoint>, EvalError> {
        let (s, l) = self.concatenated();
        roc_curve(&s, &l)
    }

    pub const CSV_HEADER: &'static str = "variant,label,auc,delta_s,flow_mse,frames,config_hash,checkpoint_id";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{},{}",
            self.variant,
            self.label.as_deref().unwrap_or(""),
            self.auc,
            self.delta_s,
            self.flow_mse.map_or(String::new(), |m| format!("{m:.6e}")),
            self.per_video.iter().map(|(s, _)| s.len()).sum::<usize>(),
            self.config_hash,
            self.checkpoint_id
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant       {}", self.variant);
        if let Some(l) = &self.label {
            let _ = writeln!(out, "label         {l}");
        }
        let _ = writeln!(out, "AUC={:.4}", self.auc);
        let _ = writeln!(out, "delta_s={:.4}", self.delta_s);
        if let Some(m) = self.flow_mse {
            let _ = writeln!(out, "flow_mse={m:.6e}");
        }
        for (s, l) in &self.per_video {
            let abnormal = l.labels.iter().filter(|&&x| x == 1).count();
            let _ = writeln!(out, "video {}: {} scored frames, {abnormal} abnormal", s.video_id, s.len());
        }
        let _ = writeln!(out, "config_hash   {}", self.config_hash);
        let _ = writeln!(out, "checkpoint    {}", self.checkpoint_id);
        let _ = writeln!(out, "aggregation   {AGGREGATION_NOTE}");
        out
    }

    /// Writes `report.txt`, `report.csv` and one `scores_<video>.csv` per video.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.to_text()).map_err(io(txt.clone()))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())).map_err(io(csv.clone()))?;
        for (s, _) in &self.per_video {
            s.save(&dir.join(format!("scores_{}.csv", s.video_id)))?;
        }
        Ok(())
    }
}

/// Builds a report from scored videos and their full-length labels.
pub fn evaluate_series(series: Vec<ScoreSeries>, labels: &[LabelSeries]) -> Result<(f64, f64, Vec<(ScoreSeries, LabelSeries)>), EvalError> {
    let mut per_video = Vec::with_capacity(series.len());
    for s in series {
        let l = labels
            .iter()
            .find(|l| l.video_id == s.video_id)
            .ok_or_else(|| EvalError::MissingLabels(s.video_id.clone()))?;
        let aligned = align_labels(&s, l)?;
        per_video.push((s, aligned));
    }
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (series, labels) in &per_video {
        s.extend_from_slice(&series.s);
        l.extend_from_slice(&labels.labels);
    }
    Ok((frame_auc(&s, &l)?, score_gap(&s, &l)?, per_video))
}

/// Mean over frames and pixels of the squared flow difference.
pub fn flow_mse(
    estimator: &FlowEstimator,
    videos: &[FrameSequence],
    predictions: &[Vec<crate::frames::Frame>],
    t: usize,
) -> Result<f64, EvalError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (seq, preds) in videos.iter().zip(predictions) {
        for (k, pred) in (t..seq.len()).zip(preds) {
            let prev = &seq.frames[k - 1];
            let fp = estimator.estimate(pred, prev)?;
            let fg = estimator.estimate(&seq.frames[k], prev)?;
            for (a, b) in fp.uv.data().iter().zip(fg.uv.data()) {
                let d = (*a - *b) as f64;
                sum += d * d;
            }
            n += fp.uv.numel();
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Also measure [`flow_mse`] with this estimator.
    pub flow: Option<FlowEstimatorSpec>,
    pub label: Option<String>,
}

/// Scores `videos` with the checkpoint's generator and evaluates against `labels`.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    videos: &[FrameSequence],
    labels: &[LabelSeries],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let (generator, config) = trainer::load_generator(ckpt)?;
    let t = generator.config.input_frames;
    let predictions = videos
        .iter()
        .map(|v| scorer::predict_video(&generator, v))
        .collect::<Result<Vec<_>, _>>()?;
    let series = videos
        .iter()
        .zip(&predictions)
        .map(|(v, p)| scorer::score_predictions(v, p, t))
        .collect::<Result<Vec<_>, _>>()?;
    let (auc, delta_s, per_video) = evaluate_series(series, labels)?;
    let flow_mse = match &opts.flow {
        Some(spec) => Some(flow_mse(&FlowEstimator::from_spec(spec)?, videos, &predictions, t)?),
        None => None,
    };
    Ok(EvalReport {
        variant: config.weights.variant_name(),
        label: opts.label.clone(),
        auc,
        delta_s,
        flow_mse,
        per_video,
        config_hash: config.hash(),
        checkpoint_id: ckpt.id(),
    })
}

/// Named loss-weight variants that differ only in which terms are zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub base: LossWeights,
    pub variants: Vec<(String, LossWeights)>,
}

impl AblationGrid {
    /// `int`, `int+gd`, `int+gd+adv`, `int+gd+adv+op` over `base`.
    pub fn standard(base: LossWeights) -> Self {
        let z = LossWeights {
            intensity: base.intensity,
            gradient: 0.0,
            flow: 0.0,
            adversarial: 0.0,
        };
        let gd = LossWeights { gradient: base.gradient, ..z };
        let adv = LossWeights {
            adversarial: base.adversarial,
            ..gd
        };
        Self {
            base,
            variants: vec![
                ("int".into(), z),
                ("int+gd".into(), gd),
                ("int+gd+adv".into(), adv),
                ("int+gd+adv+op".into(), base),
            ],
        }
    }

    pub fn single(name: &str, weights: LossWeights) -> Self {
        Self {
            base: weights,
            variants: vec![(name.to_string(), weights)],
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.variants.is_empty() {
            return Err(EvalError::Grid("no variants".into()));
        }
        let base = self.base.named();
        for (name, w) in &self.variants {
            for ((term, v), (_, b)) in w.named().iter().zip(base) {
                if *v != 0.0 && *v != b {
                    return Err(EvalError::Grid(format!("variant {name} changes {term} to {v} instead of zeroing {b}")));
                }
            }
        }
        Ok(())
    }
}

/// Trains and evaluates one model per variant with shared seed and steps.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &TrainConfig,
    train_videos: &[FrameSequence],
    test_videos: &[FrameSequence],
    labels: &[LabelSeries],
    out_dir: Option<&Path>,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>, EvalError> {
    grid.validate()?;
    let mut reports = Vec::with_capacity(grid.variants.len());
    for (name, weights) in &grid.variants {
        let cfg = TrainConfig {
            weights: *weights,
            ..base.clone()
        };
        let outputs = TrainOutputs {
            dir: out_dir.map(|d| d.join(name)),
        };
        let (ckpt, _) = trainer::train(&cfg, train_videos, &outputs)?;
        let mut report = evaluate_checkpoint(&ckpt, test_videos, labels, opts)?;
        report.variant = name.clone();
        if let Some(dir) = &outputs.dir {
            report.write(dir)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Variant comparison table, one row per report in grid order.
pub fn ablation_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>8} {:>9} {:>12}  config", "variant", "AUC", "delta_s", "flow_mse");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>8.4} {:>9.4} {:>12}  {}",
            r.variant,
            r.auc,
            r.delta_s,
            r.flow_mse.map_or("-".into(), |m| format!("{m:.4e}")),
            r.config_hash
        );
    }
    out
}

pub fn ablation_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
