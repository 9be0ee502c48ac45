//! Evaluation: scale/shift alignment of predicted pointmaps against ground
//! truth, robust two-level medians, and the strided multi-frame protocol.
//! All metric arithmetic runs in f64 regardless of model precision.

use std::collections::BTreeMap;

use crate::data::{Clip, ClipStore};
use crate::decoder::{forward_window, points_from_tokens, DecoderW, Mode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenize::Frame;

/// Clip positions sampled by one evaluation window: w frames, `stride`
/// apart, starting at the slice origin.
pub fn strided_indices(w: usize, stride: usize) -> Result<Vec<usize>> {
    if w == 0 {
        return Err(Error::Config("window must cover at least one frame".into()));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok((0..w).map(|k| k * stride).collect())
}

/// One evaluation configuration: window size and frame stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSetting {
    pub frames: usize,
    pub stride: usize,
}

impl EvalSetting {
    pub fn label(&self) -> String {
        format!("M@{}", self.frames)
    }

    /// Frames a slice must contain to fit this setting.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.stride + 1
    }

    /// Parses "w:stride" pairs separated by commas, e.g. "2:6,4:3,6:2".
    pub fn parse_list(text: &str) -> Result<Vec<EvalSetting>> {
        text.split(',')
            .map(|part| {
                let (w, s) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad setting {part:?}, want w:stride")))?;
                let frames = w
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad window count {w:?}")))?;
                let stride = s
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad stride {s:?}")))?;
                if frames < 2 {
                    return Err(Error::Config(format!("window {frames} too small, need >= 2")));
                }
                if stride == 0 {
                    return Err(Error::Config("stride must be at least 1".into()));
                }
                Ok(EvalSetting { frames, stride })
            })
            .collect()
    }
}

/// Default protocol: three settings trading window size against stride.
pub fn default_settings() -> Vec<EvalSetting> {
    vec![
        EvalSetting { frames: 2, stride: 6 },
        EvalSetting { frames: 4, stride: 3 },
        EvalSetting { frames: 6, stride: 2 },
    ]
}

/// Least-squares scale and shift mapping a prediction onto ground truth.
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub scale: f64,
    pub shift: [f64; 3],
    pub degenerate: bool,
}

fn column_means(t: &Tensor<f64>) -> [f64; 3] {
    let n = t.rows() as f64;
    let mut m = [0.0; 3];
    for row in t.data().chunks(3) {
        m[0] += row[0];
        m[1] += row[1];
        m[2] += row[2];
    }
    [m[0] / n, m[1] / n, m[2] / n]
}

/// Closed-form minimizer of sum ||s * pred + t - gt||^2 over scalar s and
/// 3-vector t. A non-positive or vanishing scale marks the alignment
/// degenerate and clamps s to 1e-8 so residuals stay finite.
pub fn align_scale_shift(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<Alignment> {
    if pred.shape() != gt.shape() || pred.rank() != 2 || pred.cols() != 3 || pred.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "align_scale_shift",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let pm = column_means(pred);
    let gm = column_means(gt);
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, g) in pred.data().chunks(3).zip(gt.data().chunks(3)) {
        for a in 0..3 {
            let pc = p[a] - pm[a];
            num += pc * (g[a] - gm[a]);
            den += pc * pc;
        }
    }
    let raw = if den < 1e-24 { 0.0 } else { num / den };
    let (scale, degenerate) = if den < 1e-24 || raw <= 0.0 {
        (1e-8, true)
    } else {
        (raw, false)
    };
    let shift = [
        gm[0] - scale * pm[0],
        gm[1] - scale * pm[1],
        gm[2] - scale * pm[2],
    ];
    Ok(Alignment { scale, shift, degenerate })
}

/// Per-pixel Euclidean errors after aligning the prediction.
pub fn aligned_residuals(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<(Vec<f64>, Alignment)> {
    let al = align_scale_shift(pred, gt)?;
    let res = pred
        .data()
        .chunks(3)
        .zip(gt.data().chunks(3))
        .map(|(p, g)| {
            let mut s2 = 0.0;
            for a in 0..3 {
                let d = al.scale * p[a] + al.shift[a] - g[a];
                s2 += d * d;
            }
            s2.sqrt()
        })
        .collect();
    Ok((res, al))
}

/// Lower median: the sorted element at index (len - 1) / 2.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Numeric("median of an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("median input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Anything that maps a frame window to per-pair target pointmaps, keyed
/// (camera frame, subject frame), pixel-major [H*W, 3]. The clip name is
/// along for models that look predictions up rather than compute them.
pub trait PointmapModel<S: Scalar> {
    fn predict_targets(
        &self,
        clip: &str,
        frames: &[Frame<S>],
    ) -> Result<BTreeMap<(usize, usize), Tensor<S>>>;
}

/// Decoder weights run as a fresh forward pass per window.
pub struct WindowPredictor<'a, S: Scalar> {
    pub weights: &'a DecoderW<S>,
    pub mode: Mode,
}

impl<S: Scalar> PointmapModel<S> for WindowPredictor<'_, S> {
    fn predict_targets(
        &self,
        _clip: &str,
        frames: &[Frame<S>],
    ) -> Result<BTreeMap<(usize, usize), Tensor<S>>> {
        let mut g = Graph::new();
        let (nodes, _) = self.weights.register(&mut g)?;
        let fwd = forward_window(&mut g, &nodes, &self.weights.cfg, frames, self.mode)?;
        let grid = self.weights.cfg.grid()?;
        let mut out = BTreeMap::new();
        for (&key, pair) in &fwd.pairs {
            let pts = points_from_tokens(&mut g, &grid, pair.tgt_map)?;
            out.insert(key, g.value(pts).clone());
        }
        Ok(out)
    }
}

/// Serves stored ground truth back as the prediction: the zero-error
/// reference point for the evaluation pipeline.
pub struct GtOracle<'a, S: Scalar> {
    pub store: &'a dyn ClipStore<S>,
}

impl<S: Scalar> PointmapModel<S> for GtOracle<'_, S> {
    fn predict_targets(
        &self,
        clip: &str,
        frames: &[Frame<S>],
    ) -> Result<BTreeMap<(usize, usize), Tensor<S>>> {
        let clip = self.store.load(clip)?;
        let mut out = BTreeMap::new();
        for cam in frames {
            for subj in frames {
                if cam.index == subj.index {
                    continue;
                }
                let key = (cam.index, subj.index);
                let gt = clip.gt_target.get(&key).ok_or_else(|| {
                    Error::Dataset(format!(
                        "clip {} lacks ground truth for pair {key:?}",
                        clip.name
                    ))
                })?;
                out.insert(key, gt.clone());
            }
        }
        Ok(out)
    }
}

/// Evaluation tally: the final two-level median plus bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct EvalOutcome {
    pub median_error: f64,
    pub pairs: usize,
    pub windows: usize,
    pub degenerate: usize,
}

fn pair_medians_for_window<S: Scalar, M: PointmapModel<S>>(
    model: &M,
    clip: &Clip<S>,
    positions: &[usize],
) -> Result<(Vec<f64>, usize)> {
    let frames = clip.window(positions)?;
    let preds = model.predict_targets(&clip.name, &frames)?;
    let mut medians = Vec::with_capacity(preds.len());
    let mut degenerate = 0usize;
    for (key, pred) in &preds {
        let gt = clip.gt_target.get(key).ok_or_else(|| {
            Error::Dataset(format!("clip {} lacks ground truth for pair {key:?}", clip.name))
        })?;
        let (res, al) = aligned_residuals(&pred.cast::<f64>(), &gt.cast::<f64>())?;
        if al.degenerate {
            degenerate += 1;
        }
        medians.push(lower_median(&res)?);
    }
    Ok((medians, degenerate))
}

/// Runs one setting over every clip of a store: clips are cut into
/// non-overlapping `slice_len`-frame slices, each slice contributes one
/// strided window, pixel errors reduce to a median per target cloud, and
/// those medians reduce to the reported median.
pub fn evaluate<S: Scalar, M: PointmapModel<S>>(
    model: &M,
    store: &dyn ClipStore<S>,
    setting: EvalSetting,
    slice_len: usize,
) -> Result<EvalOutcome> {
    if setting.span() > slice_len {
        return Err(Error::Config(format!(
            "setting {}:{} spans {} frames, more than the slice length {}",
            setting.frames,
            setting.stride,
            setting.span(),
            slice_len
        )));
    }
    let base = strided_indices(setting.frames, setting.stride)?;
    let mut all_medians = Vec::new();
    let mut degenerate = 0usize;
    let mut windows = 0usize;
    for name in store.names() {
        let clip = store.load(name)?;
        let mut start = 0usize;
        while start + slice_len <= clip.len() {
            let positions: Vec<usize> = base.iter().map(|&k| start + k).collect();
            let (medians, dg) = pair_medians_for_window(model, &clip, &positions)?;
            all_medians.extend(medians);
            degenerate += dg;
            windows += 1;
            start += slice_len;
        }
    }
    if all_medians.is_empty() {
        return Err(Error::Dataset(format!(
            "no clip is long enough for {slice_len}-frame slices"
        )));
    }
    Ok(EvalOutcome {
        median_error: lower_median(&all_medians)?,
        pairs: all_medians.len(),
        windows,
        degenerate,
    })
}
