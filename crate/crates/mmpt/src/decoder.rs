//! The two-branch window decoder. Every ordered frame pair (i, j) in a
//! window carries two token streams: an ego stream predicting frame i's
//! geometry in camera i, and a target stream predicting frame j's geometry
//! in camera i. Each layer runs self-attention, cross-attention against the
//! other stream, optionally a trajectory encoder that mixes streams sharing
//! a subject frame, and an MLP. Heads read the concatenation of every
//! layer's output.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention, mlp_block, self_attention, trajectory_encode, AttentionNode, AttentionW,
    GroupNodes, MlpNode, MlpW,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::io;
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenize::{tokenize_graph, unpatch_gather_indices, Frame, Grid, PatchEmbed, PatchEmbedNode};

/// Model hyperparameters. `dim` must split evenly into `heads`, and each
/// head needs a multiple of four channels for the two-axis rotations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub rope_base: f64,
    pub layerscale_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            layers: 4,
            head_hidden: 128,
            rope_base: 100.0,
            layerscale_init: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must divide into heads {}",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "head width {} must be a multiple of 4 for rotary positions",
                self.dim / self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.image_size, self.image_size, self.patch)
    }

    /// Tokens per frame.
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch) * (self.image_size / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("image_size".into(), self.image_size.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("dim".into(), self.dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
            ("rope_base".into(), self.rope_base.to_string()),
            ("layerscale_init".into(), self.layerscale_init.to_string()),
        ]
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let parse_usize = |k: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{k}: expected an integer, got {v:?}")))
        };
        let parse_f64 = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("{k}: expected a number, got {v:?}")))
        };
        for (k, v) in map {
            match k.as_str() {
                "image_size" => cfg.image_size = parse_usize(k, v)?,
                "patch" => cfg.patch = parse_usize(k, v)?,
                "dim" => cfg.dim = parse_usize(k, v)?,
                "heads" => cfg.heads = parse_usize(k, v)?,
                "layers" => cfg.layers = parse_usize(k, v)?,
                "head_hidden" => cfg.head_hidden = parse_usize(k, v)?,
                "rope_base" => cfg.rope_base = parse_f64(k, v)?,
                "layerscale_init" => cfg.layerscale_init = parse_f64(k, v)?,
                _ => continue,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which stream family a trajectory group encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Branch {
    Ego,
    Target,
}

/// Whether pairs are decoded independently or coupled through the
/// trajectory encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pairwise,
    Trajectory,
}

/// Weights of one decoder layer for one branch.
#[derive(Clone, Debug)]
pub struct BlockW<S: Scalar> {
    pub sa: AttentionW<S>,
    pub ca: AttentionW<S>,
    pub ta: AttentionW<S>,
    pub ls: Tensor<S>,
    pub mlp: MlpW<S>,
}

impl<S: Scalar> BlockW<S> {
    fn init<R: rand::RngCore>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            sa: AttentionW::init(cfg.dim, cfg.heads, false, rng)?,
            ca: AttentionW::init(cfg.dim, cfg.heads, true, rng)?,
            ta: AttentionW::init(cfg.dim, cfg.heads, false, rng)?,
            ls: Tensor::full(&[cfg.dim], S::from_f64(cfg.layerscale_init)),
            mlp: MlpW::init(cfg.dim, cfg.dim * 2, rng),
        })
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.sa.visit(&format!("{prefix}.sa"), out);
        self.ca.visit(&format!("{prefix}.ca"), out);
        self.ta.visit(&format!("{prefix}.ta"), out);
        out.push((format!("{prefix}.ls"), &self.ls));
        self.mlp.visit(&format!("{prefix}.mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.sa.visit_mut(&format!("{prefix}.sa"), out);
        self.ca.visit_mut(&format!("{prefix}.ca"), out);
        self.ta.visit_mut(&format!("{prefix}.ta"), out);
        out.push((format!("{prefix}.ls"), &mut self.ls));
        self.mlp.visit_mut(&format!("{prefix}.mlp"), out);
    }

    fn register(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        names: &mut Vec<(String, NodeId)>,
    ) -> Result<BlockNode> {
        let sa = self.sa.register(g, &format!("{prefix}.sa"), names)?;
        let ca = self.ca.register(g, &format!("{prefix}.ca"), names)?;
        let ta = self.ta.register(g, &format!("{prefix}.ta"), names)?;
        let ls = g.param(self.ls.clone())?;
        names.push((format!("{prefix}.ls"), ls));
        let mlp = self.mlp.register(g, &format!("{prefix}.mlp"), names)?;
        Ok(BlockNode { sa, ca, ta, ls, mlp })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockNode {
    pub sa: AttentionNode,
    pub ca: AttentionNode,
    pub ta: AttentionNode,
    pub ls: NodeId,
    pub mlp: MlpNode,
}

/// Prediction head: two linear maps with a gelu, from the concatenated
/// per-layer stream outputs to per-token flattened points.
#[derive(Clone, Debug)]
pub struct HeadW<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> HeadW<S> {
    fn init<R: rand::RngCore>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let in_dim = cfg.dim * (cfg.layers + 1);
        let out_dim = cfg.patch * cfg.patch * 3;
        Self {
            w1: Tensor::randn(&[in_dim, cfg.head_hidden], 0.02, rng),
            b1: Tensor::zeros(&[cfg.head_hidden]),
            w2: Tensor::randn(&[cfg.head_hidden, out_dim], 0.02, rng),
            b2: Tensor::zeros(&[out_dim]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
    }

    fn register(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        names: &mut Vec<(String, NodeId)>,
    ) -> Result<HeadNode> {
        let w1 = g.param(self.w1.clone())?;
        names.push((format!("{prefix}.w1"), w1));
        let b1 = g.param(self.b1.clone())?;
        names.push((format!("{prefix}.b1"), b1));
        let w2 = g.param(self.w2.clone())?;
        names.push((format!("{prefix}.w2"), w2));
        let b2 = g.param(self.b2.clone())?;
        names.push((format!("{prefix}.b2"), b2));
        Ok(HeadNode { w1, b1, w2, b2 })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNode {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Full parameter set.
#[derive(Clone, Debug)]
pub struct DecoderW<S: Scalar> {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed<S>,
    pub ego: Vec<BlockW<S>>,
    pub target: Vec<BlockW<S>>,
    pub head_ego: HeadW<S>,
    pub head_target: HeadW<S>,
}

impl<S: Scalar> DecoderW<S> {
    /// Fresh weights, deterministic in the seed. Gaussian entries use
    /// std 0.02; norms start at identity, biases and gains at their
    /// conventional values.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = cfg.grid()?;
        let embed = PatchEmbed {
            weight: Tensor::randn(&[grid.token_width(), cfg.dim], 0.02, &mut rng),
            bias: Tensor::zeros(&[cfg.dim]),
        };
        let mut ego = Vec::with_capacity(cfg.layers);
        let mut target = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            ego.push(BlockW::init(cfg, &mut rng)?);
        }
        for _ in 0..cfg.layers {
            target.push(BlockW::init(cfg, &mut rng)?);
        }
        let head_ego = HeadW::init(cfg, &mut rng);
        let head_target = HeadW::init(cfg, &mut rng);
        Ok(Self {
            cfg: *cfg,
            embed,
            ego,
            target,
            head_ego,
            head_target,
        })
    }

    /// Every tensor with its canonical dotted name, in a stable order.
    pub fn visit(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        out.push(("embed.weight".to_string(), &self.embed.weight));
        out.push(("embed.bias".to_string(), &self.embed.bias));
        for (l, b) in self.ego.iter().enumerate() {
            b.visit(&format!("ego.b{l}"), &mut out);
        }
        for (l, b) in self.target.iter().enumerate() {
            b.visit(&format!("target.b{l}"), &mut out);
        }
        self.head_ego.visit("head_ego", &mut out);
        self.head_target.visit("head_target", &mut out);
        out
    }

    /// Mutable twin of `visit`, same names and order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        out.push(("embed.weight".to_string(), &mut self.embed.weight));
        out.push(("embed.bias".to_string(), &mut self.embed.bias));
        for (l, b) in self.ego.iter_mut().enumerate() {
            b.visit_mut(&format!("ego.b{l}"), &mut out);
        }
        for (l, b) in self.target.iter_mut().enumerate() {
            b.visit_mut(&format!("target.b{l}"), &mut out);
        }
        self.head_ego.visit_mut("head_ego", &mut out);
        self.head_target.visit_mut("head_target", &mut out);
        out
    }

    /// Registers every tensor as a graph parameter and returns the node
    /// mirror plus the name of each parameter node.
    pub fn register(&self, g: &mut Graph<S>) -> Result<(DecoderNodes, Vec<(String, NodeId)>)> {
        let mut names = Vec::new();
        let weight = g.param(self.embed.weight.clone())?;
        names.push(("embed.weight".to_string(), weight));
        let bias = g.param(self.embed.bias.clone())?;
        names.push(("embed.bias".to_string(), bias));
        let embed = PatchEmbedNode { weight, bias };
        let mut ego = Vec::with_capacity(self.ego.len());
        for (l, b) in self.ego.iter().enumerate() {
            ego.push(b.register(g, &format!("ego.b{l}"), &mut names)?);
        }
        let mut target = Vec::with_capacity(self.target.len());
        for (l, b) in self.target.iter().enumerate() {
            target.push(b.register(g, &format!("target.b{l}"), &mut names)?);
        }
        let head_ego = self.head_ego.register(g, "head_ego", &mut names)?;
        let head_target = self.head_target.register(g, "head_target", &mut names)?;
        Ok((
            DecoderNodes {
                embed,
                ego,
                target,
                head_ego,
                head_target,
            },
            names,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph-registered mirror of `DecoderW`.
pub struct DecoderNodes {
    pub embed: PatchEmbedNode,
    pub ego: Vec<BlockNode>,
    pub target: Vec<BlockNode>,
    pub head_ego: HeadNode,
    pub head_target: HeadNode,
}

/// Stream nodes for one ordered pair (i, j): `ego_layers[l]` is the ego
/// stream after layer l (index 0 is the shared frame tokens), likewise for
/// the target stream, plus each head's per-token flattened points.
pub struct PairNodes {
    pub ego_layers: Vec<NodeId>,
    pub tgt_layers: Vec<NodeId>,
    pub ego_map: NodeId,
    pub tgt_map: NodeId,
}

/// Everything a window forward pass produced.
pub struct WindowForward {
    pub frame_ids: Vec<usize>,
    pub tokens: Vec<NodeId>,
    pub pairs: BTreeMap<(usize, usize), PairNodes>,
    pub groups: BTreeMap<(usize, Branch, usize), GroupNodes>,
    pub te_calls: usize,
}

fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    head: &HeadNode,
    layers: &[NodeId],
) -> Result<NodeId> {
    let feat = g.concat_cols(layers)?;
    let h = g.matmul(feat, head.w1)?;
    let h = g.add_row_bias(h, head.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, head.w2)?;
    g.add_row_bias(o, head.b2)
}

fn check_frames<S: Scalar>(cfg: &ModelConfig, frames: &[Frame<S>]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "a window needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if frames.windows(2).any(|w| w[0].index >= w[1].index) {
        return Err(Error::Ordering(format!(
            "window frames must have strictly ascending indices, got {:?}",
            frames.iter().map(|f| f.index).collect::<Vec<_>>()
        )));
    }
    for f in frames {
        if f.height() != cfg.image_size || f.width() != cfg.image_size {
            return Err(Error::BadShape {
                op: "window",
                shape: f.pixels.shape().to_vec(),
                why: format!("config expects {0}x{0} frames", cfg.image_size),
            });
        }
    }
    Ok(())
}

/// Decodes one window of frames. Returns every pair's stream history and
/// pointmaps, and in trajectory mode the per-group encoder internals.
pub fn forward_window<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &DecoderNodes,
    cfg: &ModelConfig,
    frames: &[Frame<S>],
    mode: Mode,
) -> Result<WindowForward> {
    cfg.validate()?;
    check_frames(cfg, frames)?;
    let grid = cfg.grid()?;
    let n = frames.len();
    let frame_ids: Vec<usize> = frames.iter().map(|f| f.index).collect();

    let rope = Rc::new(RopeTable::<S>::spatial(
        grid.rows,
        grid.cols,
        cfg.head_dim(),
        cfg.rope_base,
        (0, 0),
    )?);

    let mut tokens = Vec::with_capacity(n);
    for f in frames {
        tokens.push(tokenize_graph(g, nodes.embed, &grid, &f.pixels)?);
    }

    // Stream state per ordered pair, keyed by window slots (a, b) with
    // a = ego subject, b = target subject.
    let mut pair_keys = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                pair_keys.push((a, b));
            }
        }
    }
    pair_keys.sort_unstable();

    let mut ego_hist: BTreeMap<(usize, usize), Vec<NodeId>> = BTreeMap::new();
    let mut tgt_hist: BTreeMap<(usize, usize), Vec<NodeId>> = BTreeMap::new();
    for &(a, b) in &pair_keys {
        ego_hist.insert((a, b), vec![tokens[a]]);
        tgt_hist.insert((a, b), vec![tokens[b]]);
    }

    let mut groups = BTreeMap::new();
    let mut te_calls = 0usize;

    for l in 0..cfg.layers {
        let eb = &nodes.ego[l];
        let tb = &nodes.target[l];
        let mut tilde_e: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
        let mut tilde_t: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
        for &(a, b) in &pair_keys {
            let e_prev = *ego_hist[&(a, b)].last().unwrap();
            let t_prev = *tgt_hist[&(a, b)].last().unwrap();
            let e_sa = self_attention(g, &eb.sa, e_prev, Some(&rope))?;
            tilde_e.insert((a, b), cross_attention(g, &eb.ca, e_sa, t_prev, Some(&rope), Some(&rope))?);
            let t_sa = self_attention(g, &tb.sa, t_prev, Some(&rope))?;
            tilde_t.insert((a, b), cross_attention(g, &tb.ca, t_sa, e_prev, Some(&rope), Some(&rope))?);
        }

        let mut bar_e = tilde_e.clone();
        let mut bar_t = tilde_t.clone();
        if mode == Mode::Trajectory {
            // Ego groups: fixed ego subject a, partners ordered by frame id.
            for a in 0..n {
                let partners: Vec<usize> = (0..n).filter(|&b| b != a).collect();
                let ids: Vec<usize> = partners.iter().map(|&b| frame_ids[b]).collect();
                let tilde: Vec<NodeId> = partners.iter().map(|&b| tilde_e[&(a, b)]).collect();
                let grp = trajectory_encode(g, &eb.ta, eb.ls, &ids, &tilde, cfg.rope_base)?;
                te_calls += 1;
                for (p, &b) in partners.iter().enumerate() {
                    bar_e.insert((a, b), grp.bars[p]);
                }
                groups.insert((frame_ids[a], Branch::Ego, l), grp);
            }
            // Target groups: fixed target subject b, partners are the
            // cameras observing it.
            for b in 0..n {
                let partners: Vec<usize> = (0..n).filter(|&a| a != b).collect();
                let ids: Vec<usize> = partners.iter().map(|&a| frame_ids[a]).collect();
                let tilde: Vec<NodeId> = partners.iter().map(|&a| tilde_t[&(a, b)]).collect();
                let grp = trajectory_encode(g, &tb.ta, tb.ls, &ids, &tilde, cfg.rope_base)?;
                te_calls += 1;
                for (p, &a) in partners.iter().enumerate() {
                    bar_t.insert((a, b), grp.bars[p]);
                }
                groups.insert((frame_ids[b], Branch::Target, l), grp);
            }
        }

        for &(a, b) in &pair_keys {
            let e = mlp_block(g, &eb.mlp, bar_e[&(a, b)])?;
            ego_hist.get_mut(&(a, b)).unwrap().push(e);
            let t = mlp_block(g, &tb.mlp, bar_t[&(a, b)])?;
            tgt_hist.get_mut(&(a, b)).unwrap().push(t);
        }
    }

    let mut pairs = BTreeMap::new();
    for &(a, b) in &pair_keys {
        let ego_layers = ego_hist.remove(&(a, b)).unwrap();
        let tgt_layers = tgt_hist.remove(&(a, b)).unwrap();
        let ego_map = head_forward(g, &nodes.head_ego, &ego_layers)?;
        let tgt_map = head_forward(g, &nodes.head_target, &tgt_layers)?;
        pairs.insert(
            (frame_ids[a], frame_ids[b]),
            PairNodes {
                ego_layers,
                tgt_layers,
                ego_map,
                tgt_map,
            },
        );
    }

    Ok(WindowForward {
        frame_ids,
        tokens,
        pairs,
        groups,
        te_calls,
    })
}

/// Rearranges a head output [tokens x patch*patch*3] into pixel-major
/// points [height*width x 3].
pub fn points_from_tokens<S: Scalar>(
    g: &mut Graph<S>,
    grid: &Grid,
    tokens: NodeId,
) -> Result<NodeId> {
    let idx = Rc::new(unpatch_gather_indices(grid));
    let npix = grid.rows * grid.cols * grid.patch * grid.patch;
    g.gather_elems(tokens, idx, vec![npix, 3])
}

/// Writes weights and config into a checkpoint directory.
pub fn save_checkpoint<S: Scalar>(dir: &Path, w: &DecoderW<S>) -> Result<()> {
    let entries = w.visit();
    io::write_tensor_dir(dir, &entries)?;
    let mut kv = w.cfg.to_kv();
    kv.push(("dtype".into(), S::NAME.into()));
    io::write_kv_file(&dir.join("config.txt"), &kv)
}

/// Loads a checkpoint, validating dtype, the exact parameter name set, and
/// every tensor's shape.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<DecoderW<S>> {
    let ck = |msg: String| Error::Checkpoint(format!("{}: {msg}", dir.display()));
    let kv = io::read_kv_file(&dir.join("config.txt"))
        .map_err(|e| ck(format!("config: {e}")))?;
    match kv.get("dtype") {
        Some(d) if d == S::NAME => {}
        Some(d) => return Err(ck(format!("stored dtype {d}, requested {}", S::NAME))),
        None => return Err(ck("config lacks dtype".into())),
    }
    let cfg = ModelConfig::from_kv(&kv).map_err(|e| ck(format!("config: {e}")))?;
    let mut w = DecoderW::<S>::init(&cfg, 0)?;

    let manifest = io::read_tensor_dir_manifest(dir).map_err(|e| ck(e.to_string()))?;
    let mut files: BTreeMap<String, std::path::PathBuf> = manifest.into_iter().collect();
    for (name, t) in w.visit_mut() {
        let path = files
            .remove(&name)
            .ok_or_else(|| ck(format!("missing parameter {name}")))?;
        let loaded: Tensor<S> =
            io::read_tensor(&path).map_err(|e| ck(format!("{name}: {e}")))?;
        if loaded.shape() != t.shape() {
            return Err(ck(format!(
                "{name}: stored shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    if let Some(extra) = files.keys().next() {
        return Err(ck(format!("unknown parameter {extra}")));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mha_core;

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

    fn frames<S: Scalar>(cfg: &ModelConfig, ids: &[usize], seed: u64) -> Vec<Frame<S>> {
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

    #[test]
    fn config_validation_catches_bad_shapes() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.patch = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.dim = 4; // head width 2 cannot split into two rotation halves
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = tiny_cfg();
        let kv: BTreeMap<String, String> = cfg.to_kv().into_iter().collect();
        assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
    }

    #[test]
    fn forward_matches_inline_transcription_for_two_frames() {
        let cfg = ModelConfig { layers: 1, ..tiny_cfg() };
        let w = DecoderW::<f64>::init(&cfg, 42).unwrap();
        let fr = frames::<f64>(&cfg, &[0, 1], 7);

        let mut g = Graph::new();
        let (nodes, _) = w.register(&mut g).unwrap();
        let fwd = forward_window(&mut g, &nodes, &cfg, &fr, Mode::Pairwise).unwrap();

        // Independent assembly of pair (0, 1) with the same primitives.
        let grid = cfg.grid().unwrap();
        let rope = Rc::new(
            RopeTable::<f64>::spatial(grid.rows, grid.cols, cfg.head_dim(), cfg.rope_base, (0, 0))
                .unwrap(),
        );
        let mut g2 = Graph::new();
        let (n2, _) = w.register(&mut g2).unwrap();
        let t0 = tokenize_graph(&mut g2, n2.embed, &grid, &fr[0].pixels).unwrap();
        let t1 = tokenize_graph(&mut g2, n2.embed, &grid, &fr[1].pixels).unwrap();
        let e_sa = self_attention(&mut g2, &n2.ego[0].sa, t0, Some(&rope)).unwrap();
        let tilde_e = cross_attention(&mut g2, &n2.ego[0].ca, e_sa, t1, Some(&rope), Some(&rope)).unwrap();
        let e1 = mlp_block(&mut g2, &n2.ego[0].mlp, tilde_e).unwrap();
        let feat = g2.concat_cols(&[t0, e1]).unwrap();
        let h = g2.matmul(feat, n2.head_ego.w1).unwrap();
        let h = g2.add_row_bias(h, n2.head_ego.b1).unwrap();
        let h = g2.gelu(h).unwrap();
        let o = g2.matmul(h, n2.head_ego.w2).unwrap();
        let o = g2.add_row_bias(o, n2.head_ego.b2).unwrap();

        let got = g.value(fwd.pairs[&(0, 1)].ego_map);
        assert_eq!(got.max_abs_diff(g2.value(o)).unwrap(), 0.0);
    }

    #[test]
    fn zero_residual_branches_leave_streams_at_tokens() {
        let cfg = tiny_cfg();
        let mut w = DecoderW::<f64>::init(&cfg, 1).unwrap();
        for blocks in [&mut w.ego, &mut w.target] {
            for b in blocks.iter_mut() {
                b.sa.wo = Tensor::zeros(&[cfg.dim, cfg.dim]);
                b.ca.wo = Tensor::zeros(&[cfg.dim, cfg.dim]);
                b.mlp.w2 = Tensor::zeros(&[cfg.dim * 2, cfg.dim]);
            }
        }
        let fr = frames::<f64>(&cfg, &[3, 8], 2);
        let mut g = Graph::new();
        let (nodes, _) = w.register(&mut g).unwrap();
        let fwd = forward_window(&mut g, &nodes, &cfg, &fr, Mode::Pairwise).unwrap();
        let pair = &fwd.pairs[&(3, 8)];
        for &e in &pair.ego_layers {
            assert_eq!(g.value(e).max_abs_diff(g.value(fwd.tokens[0])).unwrap(), 0.0);
        }
        for &t in &pair.tgt_layers {
            assert_eq!(g.value(t).max_abs_diff(g.value(fwd.tokens[1])).unwrap(), 0.0);
        }
    }

    #[test]
    fn mirrored_branch_weights_swap_pointmaps() {
        let cfg = tiny_cfg();
        let mut w = DecoderW::<f64>::init(&cfg, 5).unwrap();
        w.target = w.ego.clone();
        w.head_target = w.head_ego.clone();
        let fr = frames::<f64>(&cfg, &[0, 1, 2], 9);
        let mut g = Graph::new();
        let (nodes, _) = w.register(&mut g).unwrap();
        let fwd = forward_window(&mut g, &nodes, &cfg, &fr, Mode::Trajectory).unwrap();
        for i in 0..3usize {
            for j in 0..3usize {
                if i == j {
                    continue;
                }
                let tgt = g.value(fwd.pairs[&(i, j)].tgt_map);
                let ego = g.value(fwd.pairs[&(j, i)].ego_map);
                assert_eq!(tgt.max_abs_diff(ego).unwrap(), 0.0, "pair ({i},{j})");
            }
        }
    }

    #[test]
    fn frame_index_shift_barely_moves_outputs() {
        let cfg = tiny_cfg();
        let w = DecoderW::<f64>::init(&cfg, 11).unwrap();
        let fr_a = frames::<f64>(&cfg, &[0, 2, 5], 3);
        let fr_b: Vec<Frame<f64>> = fr_a
            .iter()
            .map(|f| Frame::new(f.index + 11, f.pixels.clone()).unwrap())
            .collect();
        let run = |fr: &[Frame<f64>]| {
            let mut g = Graph::new();
            let (nodes, _) = w.register(&mut g).unwrap();
            let fwd = forward_window(&mut g, &nodes, &cfg, fr, Mode::Trajectory).unwrap();
            fwd.pairs
                .values()
                .map(|p| g.value(p.tgt_map).clone())
                .collect::<Vec<_>>()
        };
        let a = run(&fr_a);
        let b = run(&fr_b);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-9);
        }
    }

    #[test]
    fn trajectory_call_count_matches_group_count() {
        let cfg = tiny_cfg();
        let w = DecoderW::<f64>::init(&cfg, 1).unwrap();
        let fr = frames::<f64>(&cfg, &[0, 1, 2], 1);
        let mut g = Graph::new();
        let (nodes, _) = w.register(&mut g).unwrap();
        let fwd = forward_window(&mut g, &nodes, &cfg, &fr, Mode::Trajectory).unwrap();
        // 3 subjects x 2 branches x 2 layers.
        assert_eq!(fwd.te_calls, 12);
        assert_eq!(fwd.groups.len(), 12);

        let mut g2 = Graph::new();
        let (n2, _) = w.register(&mut g2).unwrap();
        let fwd2 = forward_window(&mut g2, &n2, &cfg, &fr, Mode::Pairwise).unwrap();
        assert_eq!(fwd2.te_calls, 0);
        assert!(fwd2.groups.is_empty());
    }

    #[test]
    fn zero_layerscale_trajectory_equals_pairwise() {
        let cfg = tiny_cfg();
        let mut w = DecoderW::<f64>::init(&cfg, 13).unwrap();
        for blocks in [&mut w.ego, &mut w.target] {
            for b in blocks.iter_mut() {
                b.ls = Tensor::zeros(&[cfg.dim]);
            }
        }
        let fr = frames::<f64>(&cfg, &[1, 4, 6], 17);
        let mut ga = Graph::new();
        let (na, _) = w.register(&mut ga).unwrap();
        let fa = forward_window(&mut ga, &na, &cfg, &fr, Mode::Trajectory).unwrap();
        let mut gb = Graph::new();
        let (nb, _) = w.register(&mut gb).unwrap();
        let fb = forward_window(&mut gb, &nb, &cfg, &fr, Mode::Pairwise).unwrap();
        for (key, pa) in &fa.pairs {
            let pb = &fb.pairs[key];
            assert_eq!(ga.value(pa.ego_map).max_abs_diff(gb.value(pb.ego_map)).unwrap(), 0.0);
            assert_eq!(ga.value(pa.tgt_map).max_abs_diff(gb.value(pb.tgt_map)).unwrap(), 0.0);
        }
    }

    #[test]
    fn window_validation_rejects_bad_inputs() {
        let cfg = tiny_cfg();
        let w = DecoderW::<f64>::init(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let (nodes, _) = w.register(&mut g).unwrap();
        let one = frames::<f64>(&cfg, &[0], 1);
        assert!(matches!(
            forward_window(&mut g, &nodes, &cfg, &one, Mode::Pairwise),
            Err(Error::Config(_))
        ));
        let unsorted = frames::<f64>(&cfg, &[0, 1], 1)
            .into_iter()
            .rev()
            .collect::<Vec<_>>();
        assert!(matches!(
            forward_window(&mut g, &nodes, &cfg, &unsorted, Mode::Pairwise),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn points_gather_restores_pixel_order() {
        // Token row r of a head output holds patch pixels row-major; the
        // gather must undo that exactly like unpatchify.
        let cfg = tiny_cfg();
        let grid = cfg.grid().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = Tensor::<f64>::randn(&[grid.tokens(), grid.token_width()], 1.0, &mut rng);
        let mut g = Graph::new();
        let node = g.constant(maps.clone()).unwrap();
        let pts = points_from_tokens(&mut g, &grid, node).unwrap();
        let want = crate::tokenize::unpatchify(&grid, &maps).unwrap();
        assert_eq!(g.value(pts).data(), want.data());
        assert_eq!(g.value(pts).shape(), &[8 * 8, 3]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_cfg();
        let w = DecoderW::<f32>::init(&cfg, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &w).unwrap();
        let loaded = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.cfg, cfg);
        for ((na, ta), (nb, tb)) in w.visit().iter().zip(loaded.visit().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "{na}");
        }
    }

    #[test]
    fn checkpoint_dtype_and_missing_file_are_rejected() {
        let cfg = tiny_cfg();
        let w = DecoderW::<f32>::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &w).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(Error::Checkpoint(_))
        ));
        std::fs::remove_file(dir.path().join("embed.bias.mmpt")).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn registration_names_match_visit_names() {
        let cfg = tiny_cfg();
        let w = DecoderW::<f64>::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let (_, names) = w.register(&mut g).unwrap();
        let visit_names: Vec<String> = w.visit().into_iter().map(|(n, _)| n).collect();
        let reg_names: Vec<String> = names.into_iter().map(|(n, _)| n).collect();
        assert_eq!(reg_names, visit_names);
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = DecoderW::<f32>::init(&cfg, 9).unwrap();
        let b = DecoderW::<f32>::init(&cfg, 9).unwrap();
        let c = DecoderW::<f32>::init(&cfg, 10).unwrap();
        for ((_, ta), (_, tb)) in a.visit().iter().zip(b.visit().iter()) {
            assert_eq!(ta, tb);
        }
        assert!(a
            .visit()
            .iter()
            .zip(c.visit().iter())
            .any(|((_, ta), (_, tc))| ta != tc));
    }

    #[test]
    fn mha_core_is_reused_by_both_branches() {
        // Smoke check that the shared attention core accepts the decoder's
        // registered blocks (guards against signature drift).
        let cfg = tiny_cfg();
        let w = DecoderW::<f64>::init(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let (nodes, _) = w.register(&mut g).unwrap();
        let x = g
            .constant(Tensor::<f64>::randn(
                &[cfg.tokens(), cfg.dim],
                1.0,
                &mut ChaCha8Rng::seed_from_u64(1),
            ))
            .unwrap();
        let normed = g
            .layer_norm(x, nodes.ego[0].sa.norm_x.gamma, nodes.ego[0].sa.norm_x.beta)
            .unwrap();
        assert!(mha_core(&mut g, &nodes.ego[0].sa, normed, normed, None, None, None).is_ok());
    }
}
