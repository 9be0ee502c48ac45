//! Incremental window refinement. A decoded window is snapshotted into a
//! cache holding every pair's stream history and, per trajectory group, the
//! rotated keys and values of the stacked attention. Appending a frame then
//! costs only the new pairs' streams plus one appended row per group: the
//! causal partner mask guarantees every cached output is already final.

use std::collections::BTreeMap;

use crate::attention::{cross_attention, mlp_block, self_attention, trajectory_encode, trajectory_extend};
use crate::decoder::{forward_window, Branch, DecoderW, Mode, WindowForward};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenize::{tokenize_graph, Frame};

/// Cached trajectory attention state for one (subject, branch, layer) group.
#[derive(Clone, Debug)]
pub struct GroupCache<S: Scalar> {
    /// Partner frame ids, strictly ascending.
    pub partner_ids: Vec<usize>,
    /// Per head: rotated keys of the spatial-major stack, [tokens*P x dh].
    pub keys: Vec<Tensor<S>>,
    /// Per head: values of the spatial-major stack, [tokens*P x dh].
    pub values: Vec<Tensor<S>>,
}

/// Final stream values and pointmaps of one ordered pair.
#[derive(Clone, Debug)]
pub struct PairCache<S: Scalar> {
    pub ego_layers: Vec<Tensor<S>>,
    pub tgt_layers: Vec<Tensor<S>>,
    pub ego_map: Tensor<S>,
    pub tgt_map: Tensor<S>,
}

/// Snapshot of a decoded window, sufficient to append frames without
/// recomputing anything already decoded.
#[derive(Clone, Debug)]
pub struct WindowCache<S: Scalar> {
    pub frame_ids: Vec<usize>,
    pub tokens: Vec<Tensor<S>>,
    pub pairs: BTreeMap<(usize, usize), PairCache<S>>,
    pub groups: BTreeMap<(usize, Branch, usize), GroupCache<S>>,
}

fn snapshot<S: Scalar>(g: &Graph<S>, fwd: WindowForward) -> WindowCache<S> {
    let tokens = fwd.tokens.iter().map(|&t| g.value(t).clone()).collect();
    let pairs = fwd
        .pairs
        .into_iter()
        .map(|(k, p)| {
            (
                k,
                PairCache {
                    ego_layers: p.ego_layers.iter().map(|&n| g.value(n).clone()).collect(),
                    tgt_layers: p.tgt_layers.iter().map(|&n| g.value(n).clone()).collect(),
                    ego_map: g.value(p.ego_map).clone(),
                    tgt_map: g.value(p.tgt_map).clone(),
                },
            )
        })
        .collect();
    let groups = fwd
        .groups
        .into_iter()
        .map(|(k, grp)| {
            (
                k,
                GroupCache {
                    partner_ids: grp.partner_ids,
                    keys: grp.keys.iter().map(|&n| g.value(n).clone()).collect(),
                    values: grp.values.iter().map(|&n| g.value(n).clone()).collect(),
                },
            )
        })
        .collect();
    WindowCache {
        frame_ids: fwd.frame_ids,
        tokens,
        pairs,
        groups,
    }
}

/// Decodes a window in trajectory mode and snapshots it into a cache.
pub fn forward_window_cached<S: Scalar>(
    w: &DecoderW<S>,
    frames: &[Frame<S>],
) -> Result<WindowCache<S>> {
    let mut g = Graph::new();
    let (nodes, _) = w.register(&mut g)?;
    let fwd = forward_window(&mut g, &nodes, &w.cfg, frames, Mode::Trajectory)?;
    Ok(snapshot(&g, fwd))
}

/// Appends one frame to a cached window, computing only the new pairs and
/// the appended trajectory rows. Produces the same bits as decoding the
/// extended window from scratch.
pub fn extend<S: Scalar>(
    w: &DecoderW<S>,
    cache: &WindowCache<S>,
    frame: &Frame<S>,
) -> Result<WindowCache<S>> {
    let cfg = &w.cfg;
    let last = *cache.frame_ids.last().ok_or_else(|| {
        Error::Invariant {
            name: "extend",
            detail: "cache holds no frames".into(),
        }
    })?;
    if frame.index <= last {
        return Err(Error::Ordering(format!(
            "appended frame {} must come after cached frames ending at {last}",
            frame.index
        )));
    }
    if frame.height() != cfg.image_size || frame.width() != cfg.image_size {
        return Err(Error::BadShape {
            op: "extend",
            shape: frame.pixels.shape().to_vec(),
            why: format!("config expects {0}x{0} frames", cfg.image_size),
        });
    }
    for l in 0..cfg.layers {
        for &id in &cache.frame_ids {
            for br in [Branch::Ego, Branch::Target] {
                if !cache.groups.contains_key(&(id, br, l)) {
                    return Err(Error::Invariant {
                        name: "extend",
                        detail: format!("cache lacks group ({id}, {br:?}, layer {l})"),
                    });
                }
            }
        }
    }

    let grid = cfg.grid()?;
    let new_id = frame.index;
    let old_ids = cache.frame_ids.clone();

    let mut g = Graph::new();
    let (nodes, _) = w.register(&mut g)?;
    let rope = std::rc::Rc::new(RopeTable::<S>::spatial(
        grid.rows,
        grid.cols,
        cfg.head_dim(),
        cfg.rope_base,
        (0, 0),
    )?);

    let tok_old: BTreeMap<usize, NodeId> = old_ids
        .iter()
        .zip(&cache.tokens)
        .map(|(&id, t)| Ok((id, g.constant(t.clone())?)))
        .collect::<Result<_>>()?;
    let tok_new = tokenize_graph(&mut g, nodes.embed, &grid, &frame.pixels)?;

    // New ordered pairs: every old frame paired with the new one, both ways.
    let mut pair_keys = Vec::new();
    for &a in &old_ids {
        pair_keys.push((a, new_id));
        pair_keys.push((new_id, a));
    }
    pair_keys.sort_unstable();

    let mut ego_hist: BTreeMap<(usize, usize), Vec<NodeId>> = BTreeMap::new();
    let mut tgt_hist: BTreeMap<(usize, usize), Vec<NodeId>> = BTreeMap::new();
    for &(a, b) in &pair_keys {
        let ta = if a == new_id { tok_new } else { tok_old[&a] };
        let tb = if b == new_id { tok_new } else { tok_old[&b] };
        ego_hist.insert((a, b), vec![ta]);
        tgt_hist.insert((a, b), vec![tb]);
    }

    let mut new_groups: BTreeMap<(usize, Branch, usize), GroupCache<S>> = BTreeMap::new();

    for l in 0..cfg.layers {
        let eb = &nodes.ego[l];
        let tb = &nodes.target[l];
        let mut tilde_e: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
        let mut tilde_t: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
        for &(a, b) in &pair_keys {
            let e_prev = *ego_hist[&(a, b)].last().unwrap();
            let t_prev = *tgt_hist[&(a, b)].last().unwrap();
            let e_sa = self_attention(&mut g, &eb.sa, e_prev, Some(&rope))?;
            tilde_e.insert(
                (a, b),
                cross_attention(&mut g, &eb.ca, e_sa, t_prev, Some(&rope), Some(&rope))?,
            );
            let t_sa = self_attention(&mut g, &tb.sa, t_prev, Some(&rope))?;
            tilde_t.insert(
                (a, b),
                cross_attention(&mut g, &tb.ca, t_sa, e_prev, Some(&rope), Some(&rope))?,
            );
        }

        let mut bar_e: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
        let mut bar_t: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();

        // Old subjects gain one partner; their cached keys already hold
        // everything earlier in the stack.
        for &a in &old_ids {
            let grp = &cache.groups[&(a, Branch::Ego, l)];
            let ck: Vec<NodeId> = grp
                .keys
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?;
            let cv: Vec<NodeId> = grp
                .values
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?;
            let ext = trajectory_extend(
                &mut g,
                &eb.ta,
                eb.ls,
                &ck,
                &cv,
                &grp.partner_ids,
                tilde_e[&(a, new_id)],
                new_id,
                cfg.rope_base,
            )?;
            bar_e.insert((a, new_id), ext.bar);
            let mut ids = grp.partner_ids.clone();
            ids.push(new_id);
            new_groups.insert(
                (a, Branch::Ego, l),
                GroupCache {
                    partner_ids: ids,
                    keys: ext.keys.iter().map(|&n| g.value(n).clone()).collect(),
                    values: ext.values.iter().map(|&n| g.value(n).clone()).collect(),
                },
            );

            let grp = &cache.groups[&(a, Branch::Target, l)];
            let ck: Vec<NodeId> = grp
                .keys
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?;
            let cv: Vec<NodeId> = grp
                .values
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?;
            let ext = trajectory_extend(
                &mut g,
                &tb.ta,
                tb.ls,
                &ck,
                &cv,
                &grp.partner_ids,
                tilde_t[&(new_id, a)],
                new_id,
                cfg.rope_base,
            )?;
            bar_t.insert((new_id, a), ext.bar);
            let mut ids = grp.partner_ids.clone();
            ids.push(new_id);
            new_groups.insert(
                (a, Branch::Target, l),
                GroupCache {
                    partner_ids: ids,
                    keys: ext.keys.iter().map(|&n| g.value(n).clone()).collect(),
                    values: ext.values.iter().map(|&n| g.value(n).clone()).collect(),
                },
            );
        }

        // The appended frame's own groups see every old frame as partner
        // and run the full stacked path.
        let e_tildes: Vec<NodeId> = old_ids.iter().map(|&a| tilde_e[&(new_id, a)]).collect();
        let grp = trajectory_encode(&mut g, &eb.ta, eb.ls, &old_ids, &e_tildes, cfg.rope_base)?;
        for (p, &a) in old_ids.iter().enumerate() {
            bar_e.insert((new_id, a), grp.bars[p]);
        }
        new_groups.insert(
            (new_id, Branch::Ego, l),
            GroupCache {
                partner_ids: old_ids.clone(),
                keys: grp.keys.iter().map(|&n| g.value(n).clone()).collect(),
                values: grp.values.iter().map(|&n| g.value(n).clone()).collect(),
            },
        );
        let t_tildes: Vec<NodeId> = old_ids.iter().map(|&a| tilde_t[&(a, new_id)]).collect();
        let grp = trajectory_encode(&mut g, &tb.ta, tb.ls, &old_ids, &t_tildes, cfg.rope_base)?;
        for (p, &a) in old_ids.iter().enumerate() {
            bar_t.insert((a, new_id), grp.bars[p]);
        }
        new_groups.insert(
            (new_id, Branch::Target, l),
            GroupCache {
                partner_ids: old_ids.clone(),
                keys: grp.keys.iter().map(|&n| g.value(n).clone()).collect(),
                values: grp.values.iter().map(|&n| g.value(n).clone()).collect(),
            },
        );

        for &(a, b) in &pair_keys {
            let e = mlp_block(&mut g, &eb.mlp, bar_e[&(a, b)])?;
            ego_hist.get_mut(&(a, b)).unwrap().push(e);
            let t = mlp_block(&mut g, &tb.mlp, bar_t[&(a, b)])?;
            tgt_hist.get_mut(&(a, b)).unwrap().push(t);
        }
    }

    // Heads for the new pairs; old pairs carry over untouched.
    let mut pairs = cache.pairs.clone();
    for &(a, b) in &pair_keys {
        let ego_layers = ego_hist.remove(&(a, b)).unwrap();
        let tgt_layers = tgt_hist.remove(&(a, b)).unwrap();
        let feat = g.concat_cols(&ego_layers)?;
        let h = g.matmul(feat, nodes.head_ego.w1)?;
        let h = g.add_row_bias(h, nodes.head_ego.b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, nodes.head_ego.w2)?;
        let ego_map = g.add_row_bias(o, nodes.head_ego.b2)?;
        let feat = g.concat_cols(&tgt_layers)?;
        let h = g.matmul(feat, nodes.head_target.w1)?;
        let h = g.add_row_bias(h, nodes.head_target.b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, nodes.head_target.w2)?;
        let tgt_map = g.add_row_bias(o, nodes.head_target.b2)?;
        pairs.insert(
            (a, b),
            PairCache {
                ego_layers: ego_layers.iter().map(|&n| g.value(n).clone()).collect(),
                tgt_layers: tgt_layers.iter().map(|&n| g.value(n).clone()).collect(),
                ego_map: g.value(ego_map).clone(),
                tgt_map: g.value(tgt_map).clone(),
            },
        );
    }

    let mut frame_ids = cache.frame_ids.clone();
    frame_ids.push(new_id);
    let mut tokens = cache.tokens.clone();
    tokens.push(g.value(tok_new).clone());

    Ok(WindowCache {
        frame_ids,
        tokens,
        pairs,
        groups: new_groups,
    })
}

/// Size accounting for a window cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheStats {
    pub frames: usize,
    pub groups: usize,
    /// Total partners across all groups.
    pub partner_slots: usize,
    /// Total cached key and value scalars.
    pub values: usize,
    pub bytes: usize,
}

pub fn cache_stats<S: Scalar>(cache: &WindowCache<S>) -> CacheStats {
    let mut partner_slots = 0;
    let mut values = 0;
    for grp in cache.groups.values() {
        partner_slots += grp.partner_ids.len();
        values += grp.keys.iter().map(|t| t.len()).sum::<usize>();
        values += grp.values.iter().map(|t| t.len()).sum::<usize>();
    }
    CacheStats {
        frames: cache.frame_ids.len(),
        groups: cache.groups.len(),
        partner_slots,
        values,
        bytes: values * S::BYTES,
    }
}

impl std::fmt::Display for CacheStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "frames={} groups={} partner_slots={} cached_values={} bytes={}",
            self.frames, self.groups, self.partner_slots, self.values, self.bytes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            layers: 2,
            head_hidden: 16,
            rope_base: 100.0,
            layerscale_init: 1e-5,
        }
    }

    fn frames(cfg: &ModelConfig, ids: &[usize], seed: u64) -> Vec<Frame<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.iter()
            .map(|&i| {
                Frame::new(
                    i,
                    Tensor::randn(&[cfg.image_size, cfg.image_size, 3], 1.0, &mut rng),
                )
                .unwrap()
            })
            .collect()
    }

    /// Layerscale large enough that the trajectory path genuinely matters.
    fn model(cfg: &ModelConfig, seed: u64) -> DecoderW<f64> {
        let mut w = DecoderW::<f64>::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for blocks in [&mut w.ego, &mut w.target] {
            for b in blocks.iter_mut() {
                b.ls = Tensor::randn(&[cfg.dim], 0.3, &mut rng);
            }
        }
        w
    }

    #[test]
    fn extend_matches_from_scratch_bit_for_bit() {
        let cfg = tiny_cfg();
        let w = model(&cfg, 3);
        let all = frames(&cfg, &[0, 1, 2, 3, 4], 8);

        let cache3 = forward_window_cached(&w, &all[..3]).unwrap();
        let cache4 = extend(&w, &cache3, &all[3]).unwrap();
        let cache5 = extend(&w, &cache4, &all[4]).unwrap();

        for (scratch_frames, extended) in [(&all[..4], &cache4), (&all[..5], &cache5)] {
            let scratch = forward_window_cached(&w, scratch_frames).unwrap();
            assert_eq!(scratch.frame_ids, extended.frame_ids);
            assert_eq!(scratch.pairs.len(), extended.pairs.len());
            for (key, sp) in &scratch.pairs {
                let ep = &extended.pairs[key];
                assert_eq!(sp.ego_map.max_abs_diff(&ep.ego_map).unwrap(), 0.0, "{key:?} ego");
                assert_eq!(sp.tgt_map.max_abs_diff(&ep.tgt_map).unwrap(), 0.0, "{key:?} tgt");
                for (a, b) in sp.ego_layers.iter().zip(&ep.ego_layers) {
                    assert_eq!(a.max_abs_diff(b).unwrap(), 0.0);
                }
                for (a, b) in sp.tgt_layers.iter().zip(&ep.tgt_layers) {
                    assert_eq!(a.max_abs_diff(b).unwrap(), 0.0);
                }
            }
            for (key, sg) in &scratch.groups {
                let eg = &extended.groups[key];
                assert_eq!(sg.partner_ids, eg.partner_ids, "{key:?}");
                for (a, b) in sg.keys.iter().zip(&eg.keys) {
                    assert_eq!(a.max_abs_diff(b).unwrap(), 0.0, "{key:?} keys");
                }
                for (a, b) in sg.values.iter().zip(&eg.values) {
                    assert_eq!(a.max_abs_diff(b).unwrap(), 0.0, "{key:?} values");
                }
            }
        }
    }

    #[test]
    fn extend_keeps_old_rows_verbatim() {
        let cfg = tiny_cfg();
        let w = model(&cfg, 5);
        let all = frames(&cfg, &[2, 5, 9], 4);
        let cache = forward_window_cached(&w, &all[..2]).unwrap();
        let bigger = extend(&w, &cache, &all[2]).unwrap();

        // Old pair tensors are carried over bit for bit.
        for (key, old) in &cache.pairs {
            let new = &bigger.pairs[key];
            assert_eq!(old.ego_map.max_abs_diff(&new.ego_map).unwrap(), 0.0);
        }
        // Old key rows survive inside the interleaved extended stack:
        // row (n, p) of the new stack equals row (n, p) of the old one.
        let n = cfg.tokens();
        for (&(s, br, l), old) in &cache.groups {
            let new = &bigger.groups[&(s, br, l)];
            let p_old = old.partner_ids.len();
            let p_new = new.partner_ids.len();
            assert_eq!(p_new, p_old + 1);
            for h in 0..cfg.heads {
                let dh = cfg.head_dim();
                for nn in 0..n {
                    for p in 0..p_old {
                        for c in 0..dh {
                            let a = old.keys[h].at2(nn * p_old + p, c);
                            let b = new.keys[h].at2(nn * p_new + p, c);
                            assert_eq!(a, b);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn extend_rejects_out_of_order_and_bad_frames() {
        let cfg = tiny_cfg();
        let w = model(&cfg, 1);
        let all = frames(&cfg, &[0, 1, 2], 1);
        let cache = forward_window_cached(&w, &all[..2]).unwrap();
        let stale = Frame::new(1, all[0].pixels.clone()).unwrap();
        assert!(matches!(extend(&w, &cache, &stale), Err(Error::Ordering(_))));
        let misshaped = Frame::new(7, Tensor::<f64>::zeros(&[4, 4, 3])).unwrap();
        assert!(matches!(extend(&w, &cache, &misshaped), Err(Error::BadShape { .. })));
    }

    #[test]
    fn cache_stats_follow_the_counting_law() {
        let cfg = ModelConfig { layers: 4, ..tiny_cfg() };
        let w = model(&cfg, 2);
        let all = frames(&cfg, &[0, 1, 2, 3, 4], 2);
        let cache = forward_window_cached(&w, &all).unwrap();
        let stats = cache_stats(&cache);
        let (wn, l, n, heads, dh) = (5usize, 4usize, cfg.tokens(), cfg.heads, cfg.head_dim());
        assert_eq!(stats.frames, wn);
        assert_eq!(stats.groups, wn * 2 * l);
        assert_eq!(stats.partner_slots, wn * 2 * l * (wn - 1));
        // Keys and values: one row of dh per (group, head, token, partner).
        assert_eq!(stats.values, 2 * stats.groups * heads * n * (wn - 1) * dh);
        assert_eq!(stats.bytes, stats.values * 8);
        let line = stats.to_string();
        assert!(line.contains("groups=40"), "{line}");
    }

    #[test]
    fn cached_forward_is_deterministic() {
        let cfg = tiny_cfg();
        let w = model(&cfg, 7);
        let all = frames(&cfg, &[0, 3], 6);
        let a = forward_window_cached(&w, &all).unwrap();
        let b = forward_window_cached(&w, &all).unwrap();
        for (ka, kb) in a.pairs.iter().zip(b.pairs.iter()) {
            assert_eq!(ka.0, kb.0);
            assert_eq!(ka.1.ego_map, kb.1.ego_map);
            assert_eq!(ka.1.tgt_map, kb.1.tgt_map);
        }
    }
}
