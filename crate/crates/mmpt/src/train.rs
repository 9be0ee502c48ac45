//! Training: the scale-invariant pointmap loss, an AdamW optimizer with
//! warmup-cosine learning rate, curriculum schedules over the two data
//! styles, and the single-threaded training loop itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Clip, ClipStore};
use crate::decoder::{forward_window, points_from_tokens, save_checkpoint, DecoderW, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{evaluate, EvalSetting, WindowPredictor};
use crate::scalar::Scalar;
use crate::synth::Style;
use crate::tensor::Tensor;

/// Guard below which a cloud's mean origin distance counts as collapsed.
pub const SCALE_GUARD: f64 = 1e-8;

/// Scale-invariant distance between one predicted cloud and its ground
/// truth: both are divided by their own mean distance to the origin, then
/// the per-pixel Euclidean distances are averaged. The prediction's
/// normalizer stays inside the graph so its gradient flows.
pub fn cloud_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    gt: &Tensor<S>,
) -> Result<NodeId> {
    let pv = g.value(pred);
    if pv.shape() != gt.shape() || pv.rank() != 2 || pv.cols() != 3 {
        return Err(Error::ShapeMismatch {
            op: "cloud_loss_graph",
            lhs: pv.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let m_gt = gt
        .data()
        .chunks(3)
        .map(|p| (p[0].as_f64().powi(2) + p[1].as_f64().powi(2) + p[2].as_f64().powi(2)).sqrt())
        .sum::<f64>()
        / gt.rows() as f64;
    if m_gt < SCALE_GUARD {
        return Err(Error::Numeric(format!(
            "ground-truth cloud collapsed onto the origin (mean distance {m_gt:e})"
        )));
    }
    let gt_scaled = g.constant(gt.scale(S::from_f64(1.0 / m_gt)))?;
    let norms = g.row_norms(pred)?;
    let m_pred = g.mean_all(norms)?;
    let inv = g.recip_scalar(m_pred, SCALE_GUARD)?;
    let pred_scaled = g.mul_scalar_node(pred, inv)?;
    let diff = g.sub(pred_scaled, gt_scaled)?;
    let dists = g.row_norms(diff)?;
    g.mean_all(dists)
}

/// Average of per-cloud losses over every supplied (prediction, truth) pair.
pub fn pointmap_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    items: &[(NodeId, &Tensor<S>)],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::Config("loss needs at least one cloud".into()));
    }
    let mut acc: Option<NodeId> = None;
    for &(pred, gt) in items {
        let term = cloud_loss_graph(g, pred, gt)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    g.scale(acc.unwrap(), 1.0 / items.len() as f64)
}

/// AdamW with decoupled weight decay. Epsilon sits outside the square
/// root, so the very first step moves each weight by lr * g / (|g| + eps).
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over (name, parameter, gradient) triples. Layer-scale
    /// vectors (names ending in ".ls") never receive weight decay. All
    /// gradients are checked before any state or parameter mutates.
    pub fn step<S: Scalar>(
        &mut self,
        lr: f64,
        entries: &mut [(String, &mut Tensor<S>, Tensor<S>)],
    ) -> Result<()> {
        for (name, p, g) in entries.iter() {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p, g) in entries.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let decay = if name.ends_with(".ls") {
                0.0
            } else {
                self.cfg.weight_decay
            };
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i].as_f64();
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                let theta = pd[i].as_f64();
                let updated = theta - lr * (mh / (vh.sqrt() + self.cfg.eps)) - lr * decay * theta;
                pd[i] = S::from_f64(updated);
            }
        }
        Ok(())
    }
}

/// Warmup-cosine schedule: linear ramp over the first max(1, ceil(5% of
/// total)) steps, then a cosine decay that reaches zero at `total`.
pub fn lr_at(step: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warm = ((0.05 * total as f64).ceil() as usize).max(1);
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        let t = (step - warm) as f64 / (total - warm).max(1) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

/// Curriculum over the two rendering styles; flat stands in for broad
/// synthetic coverage and textured for the target distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    SyntheticOnly,
    RealThenSynthetic,
    SyntheticThenReal,
    Joint,
}

impl Schedule {
    pub fn name(&self) -> &'static str {
        match self {
            Schedule::SyntheticOnly => "synthetic_only",
            Schedule::RealThenSynthetic => "real_then_synthetic",
            Schedule::SyntheticThenReal => "synthetic_then_real",
            Schedule::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic_only" => Ok(Schedule::SyntheticOnly),
            "real_then_synthetic" => Ok(Schedule::RealThenSynthetic),
            "synthetic_then_real" => Ok(Schedule::SyntheticThenReal),
            "joint" => Ok(Schedule::Joint),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

/// What an epoch draws from: one style, or both interleaved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Synthetic,
    Real,
    Joint,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Synthetic => "synthetic",
            Phase::Real => "real",
            Phase::Joint => "joint",
        }
    }
}

/// Phase of a 1-based epoch. `switch` is the length of the real phase:
/// real-first schedules start with `switch` real epochs, real-last
/// schedules end with them.
pub fn epoch_phase(schedule: Schedule, epoch: usize, total: usize, switch: usize) -> Phase {
    match schedule {
        Schedule::SyntheticOnly => Phase::Synthetic,
        Schedule::Joint => Phase::Joint,
        Schedule::RealThenSynthetic => {
            if epoch <= switch.min(total) {
                Phase::Real
            } else {
                Phase::Synthetic
            }
        }
        Schedule::SyntheticThenReal => {
            if epoch <= total.saturating_sub(switch) {
                Phase::Synthetic
            } else {
                Phase::Real
            }
        }
    }
}

/// Style of draw `draw` (0-based) within an epoch of the given phase;
/// joint epochs alternate starting from flat.
pub fn draw_style(phase: Phase, draw: usize) -> Style {
    match phase {
        Phase::Synthetic => Style::Flat,
        Phase::Real => Style::Textured,
        Phase::Joint => {
            if draw % 2 == 0 {
                Style::Flat
            } else {
                Style::Textured
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub draws_per_epoch: usize,
    /// Contiguous frames per training window.
    pub window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// Length of the real phase, in epochs.
    pub switch_epoch: usize,
    pub mode: Mode,
    /// Zeroes every layer-scale vector and keeps it out of the optimizer.
    pub freeze_layerscale: bool,
    pub val_settings: Vec<EvalSetting>,
    pub slice_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            draws_per_epoch: 16,
            window: 5,
            lr: 3e-4,
            weight_decay: 0.05,
            seed: 0,
            schedule: Schedule::Joint,
            switch_epoch: 2,
            mode: Mode::Trajectory,
            freeze_layerscale: false,
            val_settings: vec![
                EvalSetting { frames: 2, stride: 6 },
                EvalSetting { frames: 4, stride: 3 },
            ],
            slice_len: 12,
        }
    }
}

/// One sampled training window, for the data-order log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrawRecord {
    pub epoch: usize,
    pub draw: usize,
    pub style: Style,
    pub clip: String,
    pub start: usize,
}

impl DrawRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} draw={} style={} clip={} start={}",
            self.epoch,
            self.draw,
            self.style.name(),
            self.clip,
            self.start
        )
    }
}

/// One metrics-log row: epoch loss plus validation medians.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val: Vec<(String, f64)>,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let mut s = format!("{}, {}, {:.6e}", self.epoch, self.phase.name(), self.train_loss);
        for (_, v) in &self.val {
            s.push_str(&format!(", {v:.6e}"));
        }
        s
    }
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub draws: Vec<DrawRecord>,
    pub best_val: f64,
    pub final_train_loss: f64,
}

fn window_loss<S: Scalar>(
    w: &DecoderW<S>,
    clip: &Clip<S>,
    start: usize,
    window: usize,
    mode: Mode,
) -> Result<(f64, BTreeMap<String, Tensor<S>>)> {
    let positions: Vec<usize> = (start..start + window).collect();
    let frames = clip.window(&positions)?;
    let mut g = Graph::new();
    let (nodes, names) = w.register(&mut g)?;
    let fwd = forward_window(&mut g, &nodes, &w.cfg, &frames, mode)?;
    let grid = w.cfg.grid()?;
    let mut items_nodes = Vec::new();
    for (&(i, j), pair) in &fwd.pairs {
        let ego_pts = points_from_tokens(&mut g, &grid, pair.ego_map)?;
        let tgt_pts = points_from_tokens(&mut g, &grid, pair.tgt_map)?;
        let gt_ego = clip.gt_ego.get(i).ok_or_else(|| {
            Error::Dataset(format!("clip {} lacks ego truth for frame {i}", clip.name))
        })?;
        let gt_tgt = clip.gt_target.get(&(i, j)).ok_or_else(|| {
            Error::Dataset(format!("clip {} lacks target truth for pair ({i},{j})", clip.name))
        })?;
        items_nodes.push((ego_pts, gt_ego));
        items_nodes.push((tgt_pts, gt_tgt));
    }
    let loss = pointmap_loss_graph(&mut g, &items_nodes)?;
    let loss_val = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for (name, id) in names {
        if let Some(gt) = grads.get(id) {
            by_name.insert(name, gt.clone());
        }
    }
    Ok((loss_val, by_name))
}

struct StyleCycle {
    order: Vec<String>,
    cursor: usize,
}

impl StyleCycle {
    fn next(&mut self) -> &str {
        let name = &self.order[self.cursor % self.order.len()];
        self.cursor += 1;
        name
    }
}

/// Single-threaded training over two style stores. Every epoch reshuffles
/// each store with an epoch-derived seed and cycles through it; windows
/// are contiguous with a uniformly drawn start. A draw whose loss or
/// gradients go non-finite is retried once with a fresh sample before the
/// error propagates.
pub fn train<S: Scalar>(
    w: &mut DecoderW<S>,
    flat: &dyn ClipStore<S>,
    textured: &dyn ClipStore<S>,
    val: &dyn ClipStore<S>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: Option<&mut dyn FnMut(&MetricsRow)>,
) -> Result<TrainOutcome> {
    if cfg.window < 2 {
        return Err(Error::Config("training window needs at least two frames".into()));
    }
    if cfg.draws_per_epoch == 0 && cfg.epochs > 0 {
        return Err(Error::Config("draws_per_epoch must be positive".into()));
    }
    if cfg.freeze_layerscale {
        for (name, t) in w.visit_mut() {
            if name.ends_with(".ls") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let total_steps = cfg.epochs * cfg.draws_per_epoch;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut draw_log: Vec<DrawRecord> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut final_train_loss = f64::NAN;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=cfg.epochs {
        let phase = epoch_phase(cfg.schedule, epoch, cfg.epochs, cfg.switch_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut cycles: BTreeMap<&'static str, StyleCycle> = BTreeMap::new();
        for (tag, store) in [("flat", flat), ("textured", textured)] {
            let mut order = store.names().to_vec();
            order.shuffle(&mut rng);
            cycles.insert(tag, StyleCycle { order, cursor: 0 });
        }

        let mut epoch_loss = 0.0;
        for draw in 0..cfg.draws_per_epoch {
            let style = draw_style(phase, draw);
            let store: &dyn ClipStore<S> = match style {
                Style::Flat => flat,
                Style::Textured => textured,
            };
            let cycle = cycles.get_mut(style.name()).unwrap();
            // An empty store only matters once the schedule draws from it.
            if cycle.order.is_empty() {
                return Err(Error::Dataset(format!("{} store has no clips", style.name())));
            }

            let mut attempt = 0;
            let loss_val = loop {
                let clip_name = cycle.next().to_string();
                let clip = store.load(&clip_name)?;
                if clip.len() < cfg.window {
                    return Err(Error::Dataset(format!(
                        "clip {clip_name} has {} frames, window needs {}",
                        clip.len(),
                        cfg.window
                    )));
                }
                let start = rng.gen_range(0..=clip.len() - cfg.window);
                match window_loss(w, &clip, start, cfg.window, cfg.mode) {
                    Ok((loss_val, grads)) => {
                        let step = opt.steps_taken();
                        let lr = lr_at(step, total_steps, cfg.lr);
                        let mut entries: Vec<(String, &mut Tensor<S>, Tensor<S>)> = Vec::new();
                        for (name, t) in w.visit_mut() {
                            if cfg.freeze_layerscale && name.ends_with(".ls") {
                                continue;
                            }
                            if let Some(gt) = grads.get(&name) {
                                entries.push((name, t, gt.clone()));
                            }
                        }
                        opt.step(lr, &mut entries)?;
                        draw_log.push(DrawRecord {
                            epoch,
                            draw,
                            style,
                            clip: clip_name,
                            start,
                        });
                        break loss_val;
                    }
                    Err(e @ (Error::Numeric(_) | Error::NonFinite(_))) if attempt == 0 => {
                        attempt = 1;
                        let _ = e;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            };
            epoch_loss += loss_val;
        }
        let train_loss = epoch_loss / cfg.draws_per_epoch as f64;
        final_train_loss = train_loss;

        let predictor = WindowPredictor { weights: w, mode: cfg.mode };
        let mut val_cols = Vec::new();
        for setting in &cfg.val_settings {
            let out = evaluate(&predictor, val, *setting, cfg.slice_len)?;
            val_cols.push((setting.label(), out.median_error));
        }
        let row = MetricsRow {
            epoch,
            phase,
            train_loss,
            val: val_cols,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&row);
        }

        let epoch_val = if row.val.is_empty() {
            train_loss
        } else {
            row.val.iter().map(|(_, v)| v).sum::<f64>() / row.val.len() as f64
        };
        if epoch_val < best_val {
            best_val = epoch_val;
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best"), w)?;
            }
        }
        rows.push(row);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("last"), w)?;
        if !dir.join("best").exists() {
            save_checkpoint(&dir.join("best"), w)?;
        }
        let mut metrics_text = String::from("epoch, phase, train_loss");
        for s in &cfg.val_settings {
            metrics_text.push_str(&format!(", val_{}", s.label()));
        }
        metrics_text.push('\n');
        for row in &rows {
            metrics_text.push_str(&row.to_line());
            metrics_text.push('\n');
        }
        let mpath = dir.join("metrics.txt");
        fs::write(&mpath, metrics_text).map_err(|e| Error::io(&mpath, e))?;
        let dpath = dir.join("draws.txt");
        let draws_text: String = draw_log.iter().map(|d| d.to_line() + "\n").collect();
        fs::write(&dpath, draws_text).map_err(|e| Error::io(&dpath, e))?;
    }

    Ok(TrainOutcome {
        rows,
        draws: draw_log,
        best_val,
        final_train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{clip_from_raw, MemStore};
    use crate::decoder::ModelConfig;
    use crate::synth::{generate_clip, CameraSpec, ObjectSpec, SceneSpec};

    fn loss_of(pred_rows: &[[f64; 3]], gt_rows: &[[f64; 3]]) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let flat: Vec<f64> = pred_rows.iter().flatten().copied().collect();
        let pred = g.param(Tensor::new(vec![pred_rows.len(), 3], flat)?)?;
        let gflat: Vec<f64> = gt_rows.iter().flatten().copied().collect();
        let gt = Tensor::new(vec![gt_rows.len(), 3], gflat)?;
        let loss = pointmap_loss_graph(&mut g, &[(pred, &gt)])?;
        Ok(g.value(loss).data()[0])
    }

    #[test]
    fn two_pixel_hand_value() {
        // pred normalizes by 1, gt by 2; both pixels then sit 0.5 apart.
        let v = loss_of(
            &[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            &[[0.0, 0.0, 1.0], [0.0, 0.0, 3.0]],
        )
        .unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn doubled_prediction_costs_nothing() {
        let gt = [[0.1, -0.4, 1.2], [0.7, 0.2, 2.0], [-0.3, 0.5, 0.8]];
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect();
        let v = loss_of(&pred, &gt).unwrap();
        assert!(v.abs() < 1e-15, "{v}");
    }

    #[test]
    fn loss_survives_global_rescaling_of_both_clouds() {
        // Both sides self-normalize, so scaling the world does nothing.
        // Powers of two keep every f64 multiply exact, hence bit equality.
        let pred = [[0.3, -0.2, 1.4], [0.9, 0.1, 2.2], [-0.5, 0.6, 0.7]];
        let gt = [[0.1, -0.4, 1.2], [0.7, 0.2, 2.0], [-0.3, 0.5, 0.8]];
        let scale = |pts: &[[f64; 3]], s: f64| -> Vec<[f64; 3]> {
            pts.iter().map(|p| [s * p[0], s * p[1], s * p[2]]).collect()
        };
        let base = loss_of(&pred, &gt).unwrap();
        let pow2 = loss_of(&scale(&pred, 4.0), &scale(&gt, 4.0)).unwrap();
        assert_eq!(base.to_bits(), pow2.to_bits());
        let odd = loss_of(&scale(&pred, 1.7), &scale(&gt, 1.7)).unwrap();
        assert!((base - odd).abs() <= 1e-12, "{base} vs {odd}");
    }

    #[test]
    fn collapsed_clouds_error_instead_of_dividing_by_zero() {
        let gt_zero = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let ok_pred = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        assert!(matches!(loss_of(&ok_pred, &gt_zero), Err(Error::Numeric(_))));
        assert!(matches!(loss_of(&gt_zero, &ok_pred), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let gt = Tensor::new(
            vec![4, 3],
            vec![0.2, -0.1, 1.0, 0.5, 0.3, 1.5, -0.4, 0.2, 0.9, 0.1, -0.6, 1.1],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = Tensor::<f64>::randn(&[4, 3], 0.5, &mut rng);
        let gt_ref = &gt;
        let f = |params: &[Tensor<f64>], want_grads: bool| {
            let mut g = Graph::<f64>::new();
            let p = g.param(params[0].clone())?;
            let loss = pointmap_loss_graph(&mut g, &[(p, gt_ref)])?;
            let val = g.value(loss).data()[0];
            if !want_grads {
                return Ok((val, None));
            }
            let grads = g.backward(loss)?;
            Ok((val, Some(vec![grads.get(p).unwrap().clone()])))
        };
        let err = crate::gradcheck::grad_check(
            f,
            &[start],
            &crate::gradcheck::FdSettings {
                step: 1e-6,
                max_samples_per_tensor: 0,
                seed: 0,
                floor: 1e-8,
            },
        )
        .unwrap();
        assert!(err < 1e-7, "fd mismatch {err}");
    }

    #[test]
    fn first_adamw_step_is_signed_unit_scaled() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.4f64, -0.01, 0.0]).unwrap();
        let before = p.clone();
        let lr = 1e-2;
        opt.step(lr, &mut [("w".to_string(), &mut p, g.clone())]).unwrap();
        for i in 0..3 {
            let gi: f64 = g.data()[i];
            let expect = before.data()[i] - lr * gi / (gi.abs() + 1e-8);
            assert!((p.data()[i] - expect).abs() < 1e-15, "component {i}");
        }
    }

    #[test]
    fn ten_steps_match_reference_transcription() {
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(cfg);
        let mut p = Tensor::new(vec![2], vec![0.7f64, -1.3]).unwrap();
        let mut reference = [0.7f64, -1.3];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 1..=10 {
            let gr: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lr = 5e-3;
            opt.step(
                lr,
                &mut [(
                    "w".to_string(),
                    &mut p,
                    Tensor::new(vec![2], gr.clone()).unwrap(),
                )],
            )
            .unwrap();
            for i in 0..2 {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr[i] * gr[i];
                let mh = m[i] / (1.0 - cfg.beta1.powi(t));
                let vh = v[i] / (1.0 - cfg.beta2.powi(t));
                reference[i] -= lr * (mh / (vh.sqrt() + cfg.eps)) + lr * 0.1 * reference[i];
            }
            for i in 0..2 {
                assert!(
                    (p.data()[i] - reference[i]).abs() < 1e-15,
                    "step {t} component {i}: {} vs {}",
                    p.data()[i],
                    reference[i]
                );
            }
        }
    }

    #[test]
    fn layer_scale_is_exempt_from_decay() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut ls = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let mut w = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let zero = Tensor::<f64>::zeros(&[2]);
        opt.step(
            0.1,
            &mut [
                ("block.ls".to_string(), &mut ls, zero.clone()),
                ("block.w1".to_string(), &mut w, zero.clone()),
            ],
        )
        .unwrap();
        assert_eq!(ls.data(), &[1.0, 1.0]);
        assert!(w.data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
    }

    #[test]
    fn non_finite_gradient_rejected_before_any_mutation() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut a = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut b = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let good = Tensor::new(vec![1], vec![0.5f64]).unwrap();
        let bad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let err = opt.step(
            0.1,
            &mut [
                ("a".to_string(), &mut a, good),
                ("b".to_string(), &mut b, bad),
            ],
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(b.data(), &[2.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn warmup_then_cosine_to_zero() {
        let base = 1e-3;
        let total = 100;
        // ceil(5) = 5 warmup steps, linear.
        assert!((lr_at(0, total, base) - base / 5.0).abs() < 1e-18);
        assert!((lr_at(4, total, base) - base).abs() < 1e-18);
        assert!((lr_at(5, total, base) - base).abs() < 1e-18);
        assert!(lr_at(6, total, base) < base);
        for s in 5..99 {
            assert!(lr_at(s + 1, total, base) < lr_at(s, total, base));
        }
        assert!((lr_at(100, total, base)).abs() < 1e-18);
        // Tiny runs still warm up for one step.
        assert!((lr_at(0, 3, base) - base).abs() < 1e-18);
    }

    #[test]
    fn schedule_phases_hand_checked() {
        use Phase::{Real, Synthetic};
        let run = |s, total, switch| -> Vec<Phase> {
            (1..=total).map(|e| epoch_phase(s, e, total, switch)).collect()
        };
        assert_eq!(run(Schedule::SyntheticOnly, 4, 2), vec![Synthetic; 4]);
        assert_eq!(
            run(Schedule::RealThenSynthetic, 8, 5),
            vec![Real, Real, Real, Real, Real, Synthetic, Synthetic, Synthetic]
        );
        assert_eq!(
            run(Schedule::SyntheticThenReal, 8, 5),
            vec![Synthetic, Synthetic, Synthetic, Real, Real, Real, Real, Real]
        );
        assert_eq!(run(Schedule::Joint, 3, 1), vec![Phase::Joint; 3]);
        assert_eq!(draw_style(Phase::Joint, 0), Style::Flat);
        assert_eq!(draw_style(Phase::Joint, 1), Style::Textured);
        assert_eq!(draw_style(Synthetic, 7), Style::Flat);
        assert_eq!(draw_style(Real, 0), Style::Textured);
    }

    fn style_store(style: Style, clips: usize, frames: usize, seed: u64) -> MemStore<f64> {
        let mut list = Vec::new();
        for k in 0..clips {
            let spec = SceneSpec {
                image_size: 8,
                frames,
                style,
                camera: CameraSpec::Orbit,
                objects: ObjectSpec::Random { count: 1, motion: 0.02 },
            };
            let raw = generate_clip(&spec, seed + k as u64).unwrap();
            list.push(clip_from_raw::<f64>(&format!("clip_{k:05}"), &raw).unwrap());
        }
        MemStore::new(list)
    }

    fn tiny_model() -> DecoderW<f64> {
        let cfg = ModelConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            layers: 1,
            head_hidden: 16,
            ..Default::default()
        };
        DecoderW::init(&cfg, 3).unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            draws_per_epoch: 4,
            window: 3,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 11,
            schedule: Schedule::Joint,
            switch_epoch: 1,
            mode: Mode::Trajectory,
            freeze_layerscale: false,
            val_settings: vec![EvalSetting { frames: 2, stride: 2 }],
            slice_len: 4,
        }
    }

    #[test]
    fn training_runs_logs_and_checkpoints_deterministically() {
        let flat = style_store(Style::Flat, 2, 4, 100);
        let tex = style_store(Style::Textured, 2, 4, 200);
        let val = style_store(Style::Textured, 1, 4, 300);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg();

        let mut w1 = tiny_model();
        let out1 = train(&mut w1, &flat, &tex, &val, &cfg, Some(dir.path()), None).unwrap();
        assert_eq!(out1.rows.len(), 2);
        assert_eq!(out1.draws.len(), 8);
        assert!(out1.final_train_loss.is_finite() && out1.final_train_loss > 0.0);
        assert!(out1.best_val.is_finite());

        // Joint schedule alternates styles within every epoch.
        for d in &out1.draws {
            let want = if d.draw % 2 == 0 { Style::Flat } else { Style::Textured };
            assert_eq!(d.style, want, "draw {:?}", d);
        }

        let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
        assert!(metrics.starts_with("epoch, phase, train_loss, val_M@2\n"));
        assert_eq!(metrics.lines().count(), 3);
        let draws = std::fs::read_to_string(dir.path().join("draws.txt")).unwrap();
        assert_eq!(draws.lines().count(), 8);
        assert!(dir.path().join("best/config.txt").exists());
        assert!(dir.path().join("last/config.txt").exists());

        // Same seed, fresh weights: identical history and identical weights.
        let mut w2 = tiny_model();
        let out2 = train(&mut w2, &flat, &tex, &val, &cfg, None, None).unwrap();
        assert_eq!(out1.draws, out2.draws);
        assert_eq!(out1.final_train_loss, out2.final_train_loss);
        for ((n1, t1), (n2, t2)) in w1.visit().into_iter().zip(w2.visit()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2, "{n1}");
        }
    }

    #[test]
    fn frozen_layerscale_stays_zero_through_training() {
        let flat = style_store(Style::Flat, 1, 4, 400);
        let tex = style_store(Style::Textured, 1, 4, 500);
        let val = style_store(Style::Textured, 1, 4, 600);
        let mut w = tiny_model();
        let cfg = TrainConfig {
            freeze_layerscale: true,
            epochs: 1,
            ..tiny_train_cfg()
        };
        train(&mut w, &flat, &tex, &val, &cfg, None, None).unwrap();
        for (name, t) in w.visit() {
            if name.ends_with(".ls") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} moved");
            }
        }
    }

    #[test]
    fn zero_epochs_is_a_valid_noop() {
        let flat = style_store(Style::Flat, 1, 4, 700);
        let tex = style_store(Style::Textured, 1, 4, 800);
        let val = style_store(Style::Textured, 1, 4, 900);
        let mut w = tiny_model();
        let before: Vec<Tensor<f64>> = w.visit().into_iter().map(|(_, t)| t.clone()).collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny_train_cfg() };
        let out = train(&mut w, &flat, &tex, &val, &cfg, Some(dir.path()), None).unwrap();
        assert!(out.rows.is_empty());
        assert!(out.draws.is_empty());
        for ((_, t), b) in w.visit().into_iter().zip(&before) {
            assert_eq!(t, b);
        }
        assert!(dir.path().join("last/config.txt").exists());
        assert!(dir.path().join("best/config.txt").exists());
    }

    #[test]
    fn real_then_synthetic_draw_log_matches_contract() {
        let flat = style_store(Style::Flat, 2, 4, 150);
        let tex = style_store(Style::Textured, 2, 4, 250);
        let val = style_store(Style::Textured, 1, 4, 350);
        let mut w = tiny_model();
        let cfg = TrainConfig {
            epochs: 3,
            draws_per_epoch: 2,
            schedule: Schedule::RealThenSynthetic,
            switch_epoch: 2,
            ..tiny_train_cfg()
        };
        let out = train(&mut w, &flat, &tex, &val, &cfg, None, None).unwrap();
        for d in &out.draws {
            let want = if d.epoch <= 2 { Style::Textured } else { Style::Flat };
            assert_eq!(d.style, want, "epoch {} draw {}", d.epoch, d.draw);
        }
        assert_eq!(out.rows[0].phase, Phase::Real);
        assert_eq!(out.rows[2].phase, Phase::Synthetic);
    }
}
