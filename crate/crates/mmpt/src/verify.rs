//! One-shot invariant suite: every structural property the architecture
//! promises, runnable on demand. Each check carries a stable name so a
//! failure can be reported (and faults injected) precisely.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    mha_core, stack_perm, trajectory_encode, trajectory_mask, AttentionW,
};
use crate::data::{clip_from_raw, MemStore};
use crate::decoder::{forward_window, DecoderW, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{
    align_scale_shift, evaluate, strided_indices, EvalSetting, PointmapModel,
};
use crate::refine::{extend, forward_window_cached};
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::synth::{generate_clip, CameraSpec, ObjectSpec, SceneSpec, Style};
use crate::tensor::Tensor;
use crate::tokenize::Frame;

/// Deliberate defects the suite can be armed with, to prove it detects them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Drops the causal restriction from the trajectory attention mask.
    CorruptCausalMask,
}

pub const CHECK_NAMES: [&str; 10] = [
    "equivalence-at-init",
    "cache-equivalence",
    "trajectory-causality",
    "spatial-separability",
    "gradient-fidelity",
    "alignment-optimality",
    "metric-affine-invariance",
    "strided-protocol",
    "rope-isometry",
    "zero-layerscale-identity",
];

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

fn fail(name: &'static str, detail: String) -> Error {
    Error::Invariant { name, detail }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch: 4,
        dim: 8,
        heads: 2,
        layers: 2,
        head_hidden: 16,
        ..Default::default()
    }
}

fn random_frames<S: Scalar>(cfg: &ModelConfig, w: usize, seed: u64) -> Result<Vec<Frame<S>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..w)
        .map(|k| {
            let px = Tensor::<S>::randn(&[cfg.image_size, cfg.image_size, 3], 0.5, &mut rng);
            Frame::new(k, px)
        })
        .collect()
}

fn zero_layerscales<S: Scalar>(w: &mut DecoderW<S>) {
    for (name, t) in w.visit_mut() {
        if name.ends_with(".ls") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

fn mode_gap<S: Scalar>(cfg: &ModelConfig, w: usize, seed: u64) -> Result<f64> {
    let mut weights = DecoderW::<S>::init(cfg, seed)?;
    zero_layerscales(&mut weights);
    let frames = random_frames::<S>(cfg, w, seed ^ 0xabcd)?;
    let run = |mode| -> Result<BTreeMap<(usize, usize), (Tensor<S>, Tensor<S>)>> {
        let mut g = Graph::new();
        let (nodes, _) = weights.register(&mut g)?;
        let fwd = forward_window(&mut g, &nodes, cfg, &frames, mode)?;
        Ok(fwd
            .pairs
            .iter()
            .map(|(&k, p)| {
                (k, (g.value(p.ego_map).clone(), g.value(p.tgt_map).clone()))
            })
            .collect())
    };
    let pairwise = run(Mode::Pairwise)?;
    let trajectory = run(Mode::Trajectory)?;
    let mut worst: f64 = 0.0;
    for (k, (pe, pt)) in &pairwise {
        let (te, tt) = &trajectory[k];
        worst = worst.max(pe.max_abs_diff(te)?).max(pt.max_abs_diff(tt)?);
    }
    Ok(worst)
}

/// With the trajectory branch scaled to zero, both modes must produce the
/// same pointmaps for every directed pair.
pub fn check_equivalence_at_init() -> Result<()> {
    const NAME: &str = "equivalence-at-init";
    let cfg = small_cfg();
    for w in [2usize, 3, 5] {
        let g64 = mode_gap::<f64>(&cfg, w, 40 + w as u64)?;
        if g64 > 1e-12 {
            return Err(fail(NAME, format!("64-bit mode gap {g64:e} at W={w}")));
        }
        let g32 = mode_gap::<f32>(&cfg, w, 40 + w as u64)?;
        if g32 > 1e-6 {
            return Err(fail(NAME, format!("32-bit mode gap {g32:e} at W={w}")));
        }
    }
    Ok(())
}

fn cache_gap<S: Scalar>(cfg: &ModelConfig, base: usize, extends: usize, seed: u64) -> Result<f64> {
    let weights = DecoderW::<S>::init(cfg, seed)?;
    let frames = random_frames::<S>(cfg, base + extends, seed ^ 0x77)?;
    let mut cache = forward_window_cached(&weights, &frames[..base])?;
    for f in &frames[base..] {
        cache = extend(&weights, &cache, f)?;
    }
    let full = forward_window_cached(&weights, &frames)?;
    let mut worst: f64 = 0.0;
    for (k, p) in &full.pairs {
        let c = cache.pairs.get(k).ok_or_else(|| {
            fail("cache-equivalence", format!("extend path lost pair {k:?}"))
        })?;
        worst = worst.max(p.ego_map.max_abs_diff(&c.ego_map)?);
        worst = worst.max(p.tgt_map.max_abs_diff(&c.tgt_map)?);
        for (a, b) in p.ego_layers.iter().zip(&c.ego_layers) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        for (a, b) in p.tgt_layers.iter().zip(&c.tgt_layers) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
    }
    Ok(worst)
}

/// Extending a cached window frame by frame must reproduce the
/// from-scratch decode of the larger window.
pub fn check_cache_equivalence() -> Result<()> {
    const NAME: &str = "cache-equivalence";
    let cfg = small_cfg();
    let g64 = cache_gap::<f64>(&cfg, 3, 2, 9)?;
    if g64 > 1e-12 {
        return Err(fail(NAME, format!("64-bit extend gap {g64:e}")));
    }
    let g32 = cache_gap::<f32>(&cfg, 3, 2, 9)?;
    if g32 > 1e-5 {
        return Err(fail(NAME, format!("32-bit extend gap {g32:e}")));
    }
    Ok(())
}

/// Stacked trajectory attention rebuilt from its pieces, with the mask
/// chosen by the caller. Matches `trajectory_encode` bit for bit when
/// given the healthy mask; the fault arm swaps in a mask without the
/// causal restriction.
fn group_bars_with_mask(
    w: &AttentionW<f64>,
    ls: &Tensor<f64>,
    tilde: &[Tensor<f64>],
    partner_ids: &[usize],
    rope_base: f64,
    corrupt: bool,
) -> Result<Vec<Tensor<f64>>> {
    let n_tokens = tilde[0].rows();
    let partners = tilde.len();
    let mut g = Graph::new();
    let mut names = Vec::new();
    let wn = w.register(&mut g, "ta", &mut names)?;
    let ls_node = g.constant(ls.clone())?;
    let tilde_nodes: Vec<_> = tilde
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<_>>()?;

    let pmajor = g.concat_rows(&tilde_nodes)?;
    let stacked = g.gather_rows(pmajor, Rc::new(stack_perm(n_tokens, partners)))?;
    let normed = g.layer_norm(stacked, wn.norm_x.gamma, wn.norm_x.beta)?;
    let dim = tilde[0].cols();
    let positions: Vec<(usize, usize)> = (0..n_tokens)
        .flat_map(|n| partner_ids.iter().map(move |&t| (n, t)))
        .collect();
    let table = Rc::new(RopeTable::trajectory(&positions, dim / w.heads, rope_base)?);
    let mask = if corrupt {
        // Same spatial grouping, causality dropped: every partner sees all.
        let healthy = trajectory_mask(n_tokens, partners);
        let side = n_tokens * partners;
        let mut m = vec![false; side * side];
        for q in 0..side {
            for k in 0..side {
                m[q * side + k] = healthy[q * side + k] || (q / partners == k / partners);
            }
        }
        Rc::new(m)
    } else {
        Rc::new(trajectory_mask(n_tokens, partners))
    };
    let mha = mha_core(&mut g, &wn, normed, normed, Some(&table), Some(&table), Some(mask))?;
    let scaled = g.mul_row_vec(mha.out, ls_node)?;
    let mut bars = Vec::with_capacity(partners);
    for (p, &t) in tilde_nodes.iter().enumerate() {
        let rows: Vec<usize> = (0..n_tokens).map(|n| n * partners + p).collect();
        let part = g.gather_rows(scaled, Rc::new(rows))?;
        let bar = g.add(t, part)?;
        bars.push(g.value(bar).clone());
    }
    Ok(bars)
}

fn causality_setup(
    seed: u64,
) -> Result<(AttentionW<f64>, Tensor<f64>, Vec<Tensor<f64>>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let w = AttentionW::<f64>::init(dim, 2, false, &mut rng)?;
    let ls = Tensor::<f64>::randn(&[dim], 0.4, &mut rng);
    let tilde: Vec<Tensor<f64>> = (0..4)
        .map(|_| Tensor::<f64>::randn(&[4, dim], 0.7, &mut rng))
        .collect();
    Ok((w, ls, tilde, vec![0, 1, 2, 3]))
}

/// Bars at partner position j never change when tokens at positions
/// beyond j are modified, exhaustively over j. With the corrupt-mask
/// fault armed, this must fail.
pub fn check_trajectory_causality(fault: Fault) -> Result<()> {
    const NAME: &str = "trajectory-causality";
    let (w, ls, tilde, ids) = causality_setup(17)?;
    let corrupt = fault == Fault::CorruptCausalMask;

    // The rebuilt path must agree with the production path before any
    // fault talk makes sense.
    if !corrupt {
        let mut g = Graph::new();
        let mut names = Vec::new();
        let wn = w.register(&mut g, "ta", &mut names)?;
        let ls_node = g.constant(ls.clone())?;
        let tn: Vec<_> = tilde
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<_>>()?;
        let grp = trajectory_encode(&mut g, &wn, ls_node, &ids, &tn, 100.0)?;
        let rebuilt = group_bars_with_mask(&w, &ls, &tilde, &ids, 100.0, false)?;
        for (p, &bar) in grp.bars.iter().enumerate() {
            if g.value(bar).max_abs_diff(&rebuilt[p])? != 0.0 {
                return Err(fail(NAME, format!("rebuilt path diverges at partner {p}")));
            }
        }
    }

    let base = group_bars_with_mask(&w, &ls, &tilde, &ids, 100.0, corrupt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for j in 0..tilde.len() - 1 {
        // Perturb every partner beyond j, leave 0..=j untouched.
        let mut perturbed = tilde.clone();
        for t in perturbed.iter_mut().skip(j + 1) {
            let noise = Tensor::<f64>::randn(t.shape(), 1.5, &mut rng);
            *t = t.add(&noise)?;
        }
        let moved = group_bars_with_mask(&w, &ls, &perturbed, &ids, 100.0, corrupt)?;
        for p in 0..=j {
            let d = base[p].max_abs_diff(&moved[p])?;
            if d != 0.0 {
                return Err(fail(
                    NAME,
                    format!("partner {p} output moved by {d:e} after perturbing partners > {j}"),
                ));
            }
        }
    }
    Ok(())
}

/// Bars at spatial index n never change when tokens at other spatial
/// indices are modified, in any partner.
pub fn check_spatial_separability() -> Result<()> {
    const NAME: &str = "spatial-separability";
    let (w, ls, tilde, ids) = causality_setup(23)?;
    let n_tokens = tilde[0].rows();
    let dim = tilde[0].cols();
    let base = group_bars_with_mask(&w, &ls, &tilde, &ids, 100.0, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n_hit in 0..n_tokens {
        // Perturb spatial row n_hit in every partner.
        let mut perturbed = tilde.clone();
        for t in perturbed.iter_mut() {
            for c in 0..dim {
                let cur = t.at2(n_hit, c);
                t.set2(n_hit, c, cur + rng.gen_range(0.5..1.5));
            }
        }
        let moved = group_bars_with_mask(&w, &ls, &perturbed, &ids, 100.0, false)?;
        for p in 0..tilde.len() {
            for n in 0..n_tokens {
                if n == n_hit {
                    continue;
                }
                for c in 0..dim {
                    if base[p].at2(n, c) != moved[p].at2(n, c) {
                        return Err(fail(
                            NAME,
                            format!("row {n} of partner {p} moved after editing row {n_hit}"),
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Sampled finite-difference check of the full loss gradient.
pub fn check_gradient_fidelity() -> Result<()> {
    const NAME: &str = "gradient-fidelity";
    let cfg = ModelConfig {
        image_size: 8,
        patch: 4,
        dim: 8,
        heads: 2,
        layers: 1,
        head_hidden: 16,
        ..Default::default()
    };
    let spec = SceneSpec {
        image_size: 8,
        frames: 2,
        style: Style::Flat,
        camera: CameraSpec::Orbit,
        objects: ObjectSpec::Random { count: 1, motion: 0.0 },
    };
    let raw = generate_clip(&spec, 3).map_err(|e| fail(NAME, e.to_string()))?;
    let clip = clip_from_raw::<f64>("c", &raw)?;
    let template = DecoderW::<f64>::init(&cfg, 2)?;
    let names: Vec<String> = template.visit().into_iter().map(|(n, _)| n).collect();
    let starts: Vec<Tensor<f64>> = template.visit().into_iter().map(|(_, t)| t.clone()).collect();

    let f = |params: &[Tensor<f64>], want: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut w = DecoderW::<f64>::init(&cfg, 2)?;
        for ((_, slot), p) in w.visit_mut().into_iter().zip(params) {
            *slot = p.clone();
        }
        let mut g = Graph::new();
        let (nodes, reg_names) = w.register(&mut g)?;
        let fwd = forward_window(&mut g, &nodes, &cfg, &clip.frames, Mode::Trajectory)?;
        let grid = cfg.grid()?;
        let mut items = Vec::new();
        for (&(i, j), pair) in &fwd.pairs {
            let e = crate::decoder::points_from_tokens(&mut g, &grid, pair.ego_map)?;
            let t = crate::decoder::points_from_tokens(&mut g, &grid, pair.tgt_map)?;
            items.push((e, &clip.gt_ego[i]));
            items.push((t, &clip.gt_target[&(i, j)]));
        }
        let loss = crate::train::pointmap_loss_graph(&mut g, &items)?;
        let val = g.value(loss).data()[0];
        if !want {
            return Ok((val, None));
        }
        let grads = g.backward(loss)?;
        let by_name: BTreeMap<&str, NodeIdWrap> = reg_names
            .iter()
            .map(|(n, id)| (n.as_str(), NodeIdWrap(*id)))
            .collect();
        let out = names
            .iter()
            .zip(params)
            .map(|(n, p)| {
                let id = by_name[n.as_str()].0;
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect();
        Ok((val, Some(out)))
    };
    struct NodeIdWrap(crate::graph::NodeId);

    let err = crate::gradcheck::grad_check(
        f,
        &starts,
        &crate::gradcheck::FdSettings {
            step: 3e-7,
            max_samples_per_tensor: 3,
            seed: 4,
            floor: 1e-3,
        },
    )?;
    if err > 1e-4 {
        return Err(fail(NAME, format!("max relative gradient error {err:e}")));
    }
    Ok(())
}

/// Closed-form alignment beats a dense scale grid on its own objective.
pub fn check_alignment_optimality() -> Result<()> {
    const NAME: &str = "alignment-optimality";
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..20 {
        let pred = Tensor::<f64>::randn(&[30, 3], 1.0, &mut rng);
        let a = rng.gen_range(0.3..2.5);
        let mut gt = pred.clone();
        for row in gt.data_mut().chunks_mut(3) {
            for v in row.iter_mut() {
                *v = a * *v + rng.gen_range(-0.2..0.2) + 0.4;
            }
        }
        let al = align_scale_shift(&pred, &gt)?;
        if al.degenerate {
            return Err(fail(NAME, format!("trial {trial} unexpectedly degenerate")));
        }
        let objective = |s: f64| -> f64 {
            let n = pred.rows() as f64;
            let mut pm = [0.0; 3];
            let mut gm = [0.0; 3];
            for (p, g) in pred.data().chunks(3).zip(gt.data().chunks(3)) {
                for c in 0..3 {
                    pm[c] += p[c] / n;
                    gm[c] += g[c] / n;
                }
            }
            pred.data()
                .chunks(3)
                .zip(gt.data().chunks(3))
                .map(|(p, g)| {
                    (0..3)
                        .map(|c| {
                            let d = s * p[c] + (gm[c] - s * pm[c]) - g[c];
                            d * d
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let j_closed = objective(al.scale);
        for k in 0..=500 {
            let s = 1e-3 + (5.0 - 1e-3) * k as f64 / 500.0;
            if objective(s) < j_closed - 1e-9 {
                return Err(fail(
                    NAME,
                    format!("grid point s={s} beats the closed form on trial {trial}"),
                ));
            }
        }
    }
    Ok(())
}

/// Serves fixed clouds, optionally through a similarity warp.
struct CannedModel {
    clouds: BTreeMap<(usize, usize), Tensor<f64>>,
    warp: Option<(f64, [f64; 3])>,
}

impl PointmapModel<f64> for CannedModel {
    fn predict_targets(
        &self,
        _clip: &str,
        frames: &[Frame<f64>],
    ) -> Result<BTreeMap<(usize, usize), Tensor<f64>>> {
        let mut out = BTreeMap::new();
        for fi in frames {
            for fj in frames {
                if fi.index == fj.index {
                    continue;
                }
                let key = (fi.index, fj.index);
                let mut cloud = self.clouds[&key].clone();
                if let Some((s, t)) = self.warp {
                    for row in cloud.data_mut().chunks_mut(3) {
                        for c in 0..3 {
                            row[c] = s * row[c] + t[c];
                        }
                    }
                }
                out.insert(key, cloud);
            }
        }
        Ok(out)
    }
}

fn canned_scene() -> Result<(MemStore<f64>, BTreeMap<(usize, usize), Tensor<f64>>)> {
    let spec = SceneSpec {
        image_size: 8,
        frames: 12,
        style: Style::Flat,
        camera: CameraSpec::Orbit,
        objects: ObjectSpec::Random { count: 2, motion: 0.03 },
    };
    let raw = generate_clip(&spec, 55)?;
    let clip = clip_from_raw::<f64>("c0", &raw)?;
    let clouds = clip.gt_target.clone();
    Ok((MemStore::new(vec![clip]), clouds))
}

/// The reported median must not move when every prediction passes through
/// one global scale-and-shift.
pub fn check_metric_affine_invariance() -> Result<()> {
    const NAME: &str = "metric-affine-invariance";
    let (store, clouds) = canned_scene()?;
    // Slightly noisy predictions so the alignment is non-trivial.
    let mut noisy = clouds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cloud in noisy.values_mut() {
        for v in cloud.data_mut() {
            *v += 0.01 * rng.gen_range(-1.0..1.0) * (1.0 + v.abs());
        }
    }
    for setting in crate::metrics::default_settings() {
        let plain = CannedModel { clouds: noisy.clone(), warp: None };
        let warped = CannedModel {
            clouds: noisy.clone(),
            warp: Some((1.7, [0.3, -0.2, 0.8])),
        };
        let a = evaluate(&plain, &store, setting, 12)?;
        let b = evaluate(&warped, &store, setting, 12)?;
        if a.degenerate + b.degenerate > 0 {
            return Err(fail(NAME, "alignment degenerate on canned scene".into()));
        }
        let d = (a.median_error - b.median_error).abs();
        if d > 1e-9 {
            return Err(fail(
                NAME,
                format!("median moved by {d:e} under a global warp at {}", setting.label()),
            ));
        }
    }
    Ok(())
}

/// The three published settings sample exactly the documented positions
/// and fit one window per 12-frame slice.
pub fn check_strided_protocol() -> Result<()> {
    const NAME: &str = "strided-protocol";
    let cases = [
        (2usize, 6usize, vec![0usize, 6]),
        (4, 3, vec![0, 3, 6, 9]),
        (6, 2, vec![0, 2, 4, 6, 8, 10]),
    ];
    for (w, stride, want) in &cases {
        let got = strided_indices(*w, *stride)?;
        if &got != want {
            return Err(fail(NAME, format!("{w}:{stride} sampled {got:?}")));
        }
        let setting = EvalSetting { frames: *w, stride: *stride };
        if setting.span() > 12 {
            return Err(fail(NAME, format!("{w}:{stride} does not fit a 12-frame slice")));
        }
    }
    let (store, clouds) = canned_scene()?;
    for (w, stride, _) in &cases {
        let model = CannedModel { clouds: clouds.clone(), warp: None };
        let out = evaluate(&model, &store, EvalSetting { frames: *w, stride: *stride }, 12)?;
        if out.windows != 1 || out.pairs != w * (w - 1) {
            return Err(fail(
                NAME,
                format!("{w}:{stride} produced {} windows, {} pairs", out.windows, out.pairs),
            ));
        }
        if out.median_error != 0.0 {
            return Err(fail(NAME, "perfect predictions scored nonzero".into()));
        }
    }
    Ok(())
}

/// Rotary position maps are isometries on every row.
pub fn check_rope_isometry() -> Result<()> {
    const NAME: &str = "rope-isometry";
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let positions: Vec<(i64, i64)> = (0..12)
        .map(|_| (rng.gen_range(0..40), rng.gen_range(0..40)))
        .collect();
    let table = RopeTable::<f64>::from_positions(&positions, 8, 100.0)?;
    let x = Tensor::<f64>::randn(&[12, 8], 1.3, &mut rng);
    let y = table.apply(&x)?;
    for (rx, ry) in x.data().chunks(8).zip(y.data().chunks(8)) {
        let nx: f64 = rx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = ry.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (nx - ny).abs() > 1e-9 {
            return Err(fail(NAME, format!("row norm moved from {nx} to {ny}")));
        }
    }
    Ok(())
}

/// A zero layer scale makes the trajectory encoder an exact identity.
pub fn check_zero_layerscale_identity() -> Result<()> {
    const NAME: &str = "zero-layerscale-identity";
    let (w, _, tilde, ids) = causality_setup(77)?;
    let zero_ls = Tensor::<f64>::zeros(&[tilde[0].cols()]);
    let mut g = Graph::new();
    let mut names = Vec::new();
    let wn = w.register(&mut g, "ta", &mut names)?;
    let ls_node = g.constant(zero_ls)?;
    let tn: Vec<_> = tilde
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<_>>()?;
    let grp = trajectory_encode(&mut g, &wn, ls_node, &ids, &tn, 100.0)?;
    for (p, &bar) in grp.bars.iter().enumerate() {
        if g.value(bar).max_abs_diff(&tilde[p])? != 0.0 {
            return Err(fail(NAME, format!("partner {p} moved under zero scale")));
        }
    }
    Ok(())
}

/// Runs every check, honoring the requested fault injection, and reports
/// them in declaration order.
pub fn run_all(fault: Fault) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<()>>)> = vec![
        ("equivalence-at-init", Box::new(check_equivalence_at_init)),
        ("cache-equivalence", Box::new(check_cache_equivalence)),
        (
            "trajectory-causality",
            Box::new(move || check_trajectory_causality(fault)),
        ),
        ("spatial-separability", Box::new(check_spatial_separability)),
        ("gradient-fidelity", Box::new(check_gradient_fidelity)),
        ("alignment-optimality", Box::new(check_alignment_optimality)),
        (
            "metric-affine-invariance",
            Box::new(check_metric_affine_invariance),
        ),
        ("strided-protocol", Box::new(check_strided_protocol)),
        ("rope-isometry", Box::new(check_rope_isometry)),
        (
            "zero-layerscale-identity",
            Box::new(check_zero_layerscale_identity),
        ),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckResult {
            name,
            error: f().err().map(|e| e.to_string()),
        })
        .collect()
}
