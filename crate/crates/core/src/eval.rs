//! Tip-localization metrics and evaluation of the model and the baseline.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::dataset::{Dataset, DatasetError, PartMask, Point, Split, TipPair};
use crate::model::{ModelError, ToolTipNet};

pub const DEFAULT_THRESHOLD: f64 = 10.0;
/// Frames per forward pass during model evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no frames to evaluate")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Root-mean-square tip distance, minimized over the two left/right
/// assignments.
pub fn frame_rmse(pred: &TipPair, gt: &TipPair) -> f64 {
    let rmse = |a: &TipPair| {
        let d1 = a.left.dist(gt.left);
        let d2 = a.right.dist(gt.right);
        ((d1 * d1 + d2 * d2) / 2.0).sqrt()
    };
    rmse(pred).min(rmse(&pred.swapped()))
}

/// Fraction of frames with RMSE strictly below `threshold`.
pub fn accuracy(rmses: &[f64], threshold: f64) -> Result<f64, EvalError> {
    if rmses.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(rmses.iter().filter(|&&r| r < threshold).count() as f64 / rmses.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One evaluation frame held in memory.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub mask: PartMask,
    pub tips: TipPair,
    /// `None` when the manifest carries no pose.
    pub closed: Option<bool>,
}

pub fn load_frames(dataset: &Dataset, split: Split) -> Result<Vec<Frame>, EvalError> {
    dataset
        .split(split)
        .par_iter()
        .map(|r| {
            Ok(Frame {
                id: r.id.clone(),
                mask: dataset.load_mask(r)?,
                tips: r.tips,
                closed: r.pose.as_ref().map(|p| p.is_closed()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a ToolTipNet<f32>),
    Baseline,
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(_) => "model",
            Predictor::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameResult {
    pub id: String,
    pub pred: TipPair,
    pub gt: TipPair,
    pub rmse: f64,
    pub closed: Option<bool>,
    /// Baseline only: fewer than two usable jaw components, or no answer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub frames: usize,
    pub mean_rmse: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub threshold: f64,
    pub frame_count: usize,
    pub mean_rmse: f64,
    pub accuracy: f64,
    /// Baseline only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_rate: Option<f64>,
    pub open: Option<SubsetStats>,
    pub closed: Option<SubsetStats>,
    pub unknown: Option<SubsetStats>,
}

fn subset(results: &[&FrameResult], threshold: f64) -> Option<SubsetStats> {
    if results.is_empty() {
        return None;
    }
    let rmses: Vec<f64> = results.iter().map(|r| r.rmse).collect();
    let flags: Option<Vec<bool>> = results.iter().map(|r| r.degenerate).collect();
    Some(SubsetStats {
        frames: results.len(),
        mean_rmse: mean(&rmses),
        accuracy: accuracy(&rmses, threshold).expect("non-empty"),
        degenerate_rate: flags.map(|f| f.iter().filter(|&&d| d).count() as f64 / f.len() as f64),
    })
}

pub fn summarize(method: &str, results: &[FrameResult], threshold: f64) -> Result<EvalReport, EvalError> {
    let pick = |want: Option<bool>| results.iter().filter(|r| r.closed == want).collect::<Vec<_>>();
    let all = subset(&results.iter().collect::<Vec<_>>(), threshold).ok_or(EvalError::Empty)?;
    Ok(EvalReport {
        method: method.to_string(),
        threshold,
        frame_count: all.frames,
        mean_rmse: all.mean_rmse,
        accuracy: all.accuracy,
        degenerate_rate: all.degenerate_rate,
        open: subset(&pick(Some(false)), threshold),
        closed: subset(&pick(Some(true)), threshold),
        unknown: subset(&pick(None), threshold),
    })
}

/// Baseline answer for one mask. Masks it cannot handle yield the image
/// center for both tips and count as degenerate.
pub fn baseline_predict(mask: &PartMask) -> (TipPair, bool) {
    match baseline::detect_tips(mask) {
        Ok(r) => (r.tips, r.degenerate),
        Err(_) => {
            let c = Point::new((mask.width() as f64 - 1.0) / 2.0, (mask.height() as f64 - 1.0) / 2.0);
            (TipPair::new(c, c), true)
        }
    }
}

/// Per-frame predictions in frame order.
pub fn predict_frames(frames: &[Frame], predictor: Predictor<'_>) -> Result<Vec<FrameResult>, EvalError> {
    let result = |f: &Frame, pred: TipPair, degenerate: Option<bool>| FrameResult {
        id: f.id.clone(),
        pred,
        gt: f.tips,
        rmse: frame_rmse(&pred, &f.tips),
        closed: f.closed,
        degenerate,
    };
    match predictor {
        Predictor::Baseline => Ok(frames
            .par_iter()
            .map(|f| {
                let (pred, degenerate) = baseline_predict(&f.mask);
                result(f, pred, Some(degenerate))
            })
            .collect()),
        Predictor::Model(net) => {
            let mut out = Vec::with_capacity(frames.len());
            for chunk in frames.chunks(EVAL_BATCH) {
                let masks: Vec<&PartMask> = chunk.iter().map(|f| &f.mask).collect();
                let preds = net.predict_batch(&masks)?;
                out.extend(chunk.iter().zip(preds).map(|(f, p)| result(f, p.tips, None)));
            }
            Ok(out)
        }
    }
}

pub fn evaluate(frames: &[Frame], predictor: Predictor<'_>, threshold: f64) -> Result<EvalReport, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::Empty);
    }
    summarize(predictor.name(), &predict_frames(frames, predictor)?, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: EvalReport,
    pub baseline: EvalReport,
}

/// Fixed-width table; numbers are rounded to two decimals exactly as the
/// JSON values would print with `{:.2}`.
pub fn format_comparison(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<8} {:>6} {:>10} {:>10} {:>10}",
        "method", "subset", "frames", "mean_rmse", "acc@thr", "degen"
    );
    for r in [&c.model, &c.baseline] {
        let all = SubsetStats {
            frames: r.frame_count,
            mean_rmse: r.mean_rmse,
            accuracy: r.accuracy,
            degenerate_rate: r.degenerate_rate,
        };
        let rows = [
            ("all", Some(&all)),
            ("open", r.open.as_ref()),
            ("closed", r.closed.as_ref()),
            ("unknown", r.unknown.as_ref()),
        ];
        for (name, st) in rows {
            let Some(st) = st else { continue };
            let degen = st.degenerate_rate.map_or("-".to_string(), |d| format!("{d:.2}"));
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:>6} {:>10.2} {:>10.2} {:>10}",
                r.method, name, st.frames, st.mean_rmse, st.accuracy, degen
            );
        }
    }
    let _ = write!(
        s,
        "accuracy counts frames with RMSE < {:.2} px at native mask resolution",
        c.model.threshold
    );
    s
}
