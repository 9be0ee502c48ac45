//! Attention blocks: pre-norm multi-head self and cross attention over token
//! grids, plus the trajectory encoder that lets tokens for one subject frame
//! attend across partner frames at a fixed spatial location, causally in
//! partner order.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm affine weights.
#[derive(Clone, Debug)]
pub struct LayerNormW<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNormW<S> {
    pub fn init(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], S::from_f64(1.0)),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn register(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        names: &mut Vec<(String, NodeId)>,
    ) -> Result<LayerNormNode> {
        let gamma = g.param(self.gamma.clone())?;
        names.push((format!("{prefix}.gamma"), gamma));
        let beta = g.param(self.beta.clone())?;
        names.push((format!("{prefix}.beta"), beta));
        Ok(LayerNormNode { gamma, beta })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormNode {
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Weights for one multi-head attention block. `norm_ctx` is present only on
/// cross-attention blocks, which normalize their context stream separately.
#[derive(Clone, Debug)]
pub struct AttentionW<S: Scalar> {
    pub norm_x: LayerNormW<S>,
    pub norm_ctx: Option<LayerNormW<S>>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub heads: usize,
}

impl<S: Scalar> AttentionW<S> {
    pub fn init<R: rand::RngCore>(dim: usize, heads: usize, cross: bool, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} must be divisible by heads {heads}"
            )));
        }
        let std = 0.02;
        let w = |rng: &mut R| Tensor::randn(&[dim, dim], std, rng);
        Ok(Self {
            norm_x: LayerNormW::init(dim),
            norm_ctx: cross.then(|| LayerNormW::init(dim)),
            wq: w(rng),
            bq: Tensor::zeros(&[dim]),
            wk: w(rng),
            bk: Tensor::zeros(&[dim]),
            wv: w(rng),
            bv: Tensor::zeros(&[dim]),
            wo: w(rng),
            bo: Tensor::zeros(&[dim]),
            heads,
        })
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.norm_x.visit(&format!("{prefix}.norm_x"), out);
        if let Some(nc) = &self.norm_ctx {
            nc.visit(&format!("{prefix}.norm_ctx"), out);
        }
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.norm_x.visit_mut(&format!("{prefix}.norm_x"), out);
        if let Some(nc) = &mut self.norm_ctx {
            nc.visit_mut(&format!("{prefix}.norm_ctx"), out);
        }
        for (name, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    pub fn register(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        names: &mut Vec<(String, NodeId)>,
    ) -> Result<AttentionNode> {
        let norm_x = self.norm_x.register(g, &format!("{prefix}.norm_x"), names)?;
        let norm_ctx = match &self.norm_ctx {
            Some(nc) => Some(nc.register(g, &format!("{prefix}.norm_ctx"), names)?),
            None => None,
        };
        let reg = |g: &mut Graph<S>, name: &str, t: &Tensor<S>, names: &mut Vec<(String, NodeId)>| {
            let id = g.param(t.clone())?;
            names.push((format!("{prefix}.{name}"), id));
            Ok::<NodeId, Error>(id)
        };
        let wq = reg(g, "wq", &self.wq, names)?;
        let bq = reg(g, "bq", &self.bq, names)?;
        let wk = reg(g, "wk", &self.wk, names)?;
        let bk = reg(g, "bk", &self.bk, names)?;
        let wv = reg(g, "wv", &self.wv, names)?;
        let bv = reg(g, "bv", &self.bv, names)?;
        let wo = reg(g, "wo", &self.wo, names)?;
        let bo = reg(g, "bo", &self.bo, names)?;
        Ok(AttentionNode {
            norm_x,
            norm_ctx,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads: self.heads,
        })
    }
}

/// Graph-registered mirror of `AttentionW`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNode {
    pub norm_x: LayerNormNode,
    pub norm_ctx: Option<LayerNormNode>,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub heads: usize,
}

/// Two-layer MLP block weights with its own pre-norm.
#[derive(Clone, Debug)]
pub struct MlpW<S: Scalar> {
    pub norm: LayerNormW<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> MlpW<S> {
    pub fn init<R: rand::RngCore>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNormW::init(dim),
            w1: Tensor::randn(&[dim, hidden], 0.02, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, dim], 0.02, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.norm.visit(&format!("{prefix}.norm"), out);
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.norm.visit_mut(&format!("{prefix}.norm"), out);
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
    }

    pub fn register(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        names: &mut Vec<(String, NodeId)>,
    ) -> Result<MlpNode> {
        let norm = self.norm.register(g, &format!("{prefix}.norm"), names)?;
        let w1 = g.param(self.w1.clone())?;
        names.push((format!("{prefix}.w1"), w1));
        let b1 = g.param(self.b1.clone())?;
        names.push((format!("{prefix}.b1"), b1));
        let w2 = g.param(self.w2.clone())?;
        names.push((format!("{prefix}.w2"), w2));
        let b2 = g.param(self.b2.clone())?;
        names.push((format!("{prefix}.b2"), b2));
        Ok(MlpNode { norm, w1, b1, w2, b2 })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpNode {
    pub norm: LayerNormNode,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Attention output plus the per-head rotated keys and values, kept so a
/// caller can cache them for incremental window extension.
pub struct MhaOut {
    pub out: NodeId,
    pub keys: Vec<NodeId>,
    pub values: Vec<NodeId>,
}

fn project_heads<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    heads: usize,
) -> Result<Vec<NodeId>> {
    let proj = g.matmul(x, w)?;
    let proj = g.add_row_bias(proj, b)?;
    let dim = g.value(proj).cols();
    let dh = dim / heads;
    (0..heads).map(|h| g.slice_cols(proj, h * dh, dh)).collect()
}

/// Multi-head attention over already-normalized inputs. Queries come from
/// `q_in`, keys and values from `kv_in`; optional rotary tables are applied
/// per head to queries and keys, and `mask` (row-major `q_rows x kv_rows`,
/// true = attend) restricts the softmax.
pub fn mha_core<S: Scalar>(
    g: &mut Graph<S>,
    w: &AttentionNode,
    q_in: NodeId,
    kv_in: NodeId,
    rope_q: Option<&Rc<RopeTable<S>>>,
    rope_k: Option<&Rc<RopeTable<S>>>,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<MhaOut> {
    let dim = g.value(q_in).cols();
    if dim % w.heads != 0 {
        return Err(Error::Config(format!(
            "attention dim {dim} not divisible by heads {}",
            w.heads
        )));
    }
    let dh = dim / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qs = project_heads(g, q_in, w.wq, w.bq, w.heads)?;
    let ks = project_heads(g, kv_in, w.wk, w.bk, w.heads)?;
    let vs = project_heads(g, kv_in, w.wv, w.bv, w.heads)?;

    let mut ctxs = Vec::with_capacity(w.heads);
    let mut keys = Vec::with_capacity(w.heads);
    let mut values = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let q = match rope_q {
            Some(t) => g.rope(qs[h], Rc::clone(t))?,
            None => qs[h],
        };
        let k = match rope_k {
            Some(t) => g.rope(ks[h], Rc::clone(t))?,
            None => ks[h],
        };
        let logits = g.matmul_abt(q, k)?;
        let logits = g.scale(logits, scale)?;
        let probs = g.softmax_rows(logits, mask.clone())?;
        let ctx = g.matmul(probs, vs[h])?;
        ctxs.push(ctx);
        keys.push(k);
        values.push(vs[h]);
    }
    let merged = g.concat_cols(&ctxs)?;
    let out = g.matmul(merged, w.wo)?;
    let out = g.add_row_bias(out, w.bo)?;
    Ok(MhaOut { out, keys, values })
}

/// Pre-norm residual self-attention: `x + MHA(LN(x))`.
pub fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    w: &AttentionNode,
    x: NodeId,
    rope: Option<&Rc<RopeTable<S>>>,
) -> Result<NodeId> {
    let normed = g.layer_norm(x, w.norm_x.gamma, w.norm_x.beta)?;
    let mha = mha_core(g, w, normed, normed, rope, rope, None)?;
    g.add(x, mha.out)
}

/// Pre-norm residual cross-attention: `x + MHA(LN_x(x), LN_ctx(ctx))`.
pub fn cross_attention<S: Scalar>(
    g: &mut Graph<S>,
    w: &AttentionNode,
    x: NodeId,
    ctx: NodeId,
    rope_x: Option<&Rc<RopeTable<S>>>,
    rope_ctx: Option<&Rc<RopeTable<S>>>,
) -> Result<NodeId> {
    let nc = w
        .norm_ctx
        .ok_or_else(|| Error::Config("cross-attention weights lack a context norm".into()))?;
    let normed_x = g.layer_norm(x, w.norm_x.gamma, w.norm_x.beta)?;
    let normed_ctx = g.layer_norm(ctx, nc.gamma, nc.beta)?;
    let mha = mha_core(g, w, normed_x, normed_ctx, rope_x, rope_ctx, None)?;
    g.add(x, mha.out)
}

/// MLP block with pre-norm and residual: `x + W2 gelu(W1 LN(x))`.
pub fn mlp_block<S: Scalar>(g: &mut Graph<S>, w: &MlpNode, x: NodeId) -> Result<NodeId> {
    let normed = g.layer_norm(x, w.norm.gamma, w.norm.beta)?;
    let h = g.matmul(normed, w.w1)?;
    let h = g.add_row_bias(h, w.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w.w2)?;
    let o = g.add_row_bias(o, w.b2)?;
    g.add(x, o)
}

/// Keep-mask for trajectory attention over a stack of `partners` token sets
/// of `n_tokens` each, rows ordered spatial-major (row = n * partners + p).
/// Row (n, p) may attend to (n', p') iff n' == n and p' <= p.
pub fn trajectory_mask(n_tokens: usize, partners: usize) -> Vec<bool> {
    let rows = n_tokens * partners;
    let mut mask = vec![false; rows * rows];
    for n in 0..n_tokens {
        for p in 0..partners {
            let r = n * partners + p;
            for q in 0..=p {
                mask[r * rows + n * partners + q] = true;
            }
        }
    }
    mask
}

/// Row permutation taking `concat_rows` of per-partner token sets (partner-
/// major) to the spatial-major stack used by trajectory attention.
pub fn stack_perm(n_tokens: usize, partners: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(n_tokens * partners);
    for n in 0..n_tokens {
        for p in 0..partners {
            perm.push(p * n_tokens + n);
        }
    }
    perm
}

/// One trajectory-encoded group: tokens for a single subject stream across
/// all its partner frames, with the cached per-head keys and values of the
/// stacked attention.
pub struct GroupNodes {
    /// Partner frame indices, strictly ascending.
    pub partner_ids: Vec<usize>,
    /// Pre-encoder token matrices per partner, [n_tokens x dim].
    pub tilde: Vec<NodeId>,
    /// Encoded outputs per partner, [n_tokens x dim].
    pub bars: Vec<NodeId>,
    /// Per head: rotated keys of the spatial-major stack, [n_tokens*P x dh].
    pub keys: Vec<NodeId>,
    /// Per head: values of the spatial-major stack, [n_tokens*P x dh].
    pub values: Vec<NodeId>,
}

fn trajectory_positions(n_tokens: usize, partner_ids: &[usize]) -> Vec<(usize, usize)> {
    let mut pos = Vec::with_capacity(n_tokens * partner_ids.len());
    for n in 0..n_tokens {
        for &t in partner_ids {
            pos.push((n, t));
        }
    }
    pos
}

fn check_ascending(partner_ids: &[usize]) -> Result<()> {
    if partner_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Ordering(format!(
            "trajectory partners must have strictly ascending frame indices, got {partner_ids:?}"
        )));
    }
    Ok(())
}

/// Runs the trajectory encoder over one group: stacks the per-partner token
/// sets spatial-major, applies causal masked attention along the partner
/// axis with rotary positions (spatial index, frame index), and returns
/// `bar_p = tilde_p + ls * attention_p` per partner.
pub fn trajectory_encode<S: Scalar>(
    g: &mut Graph<S>,
    w: &AttentionNode,
    ls: NodeId,
    partner_ids: &[usize],
    tilde: &[NodeId],
    rope_base: f64,
) -> Result<GroupNodes> {
    if partner_ids.len() != tilde.len() || tilde.is_empty() {
        return Err(Error::Config("trajectory group needs one token set per partner".into()));
    }
    check_ascending(partner_ids)?;
    let n_tokens = g.value(tilde[0]).rows();
    let partners = tilde.len();

    let pmajor = g.concat_rows(tilde)?;
    let stacked = g.gather_rows(pmajor, Rc::new(stack_perm(n_tokens, partners)))?;
    let normed = g.layer_norm(stacked, w.norm_x.gamma, w.norm_x.beta)?;

    let dim = g.value(normed).cols();
    let table = Rc::new(RopeTable::trajectory(
        &trajectory_positions(n_tokens, partner_ids),
        dim / w.heads,
        rope_base,
    )?);
    let mask = Rc::new(trajectory_mask(n_tokens, partners));
    let mha = mha_core(g, w, normed, normed, Some(&table), Some(&table), Some(mask))?;
    let scaled = g.mul_row_vec(mha.out, ls)?;

    let mut bars = Vec::with_capacity(partners);
    for (p, &t) in tilde.iter().enumerate() {
        let rows: Vec<usize> = (0..n_tokens).map(|n| n * partners + p).collect();
        let part = g.gather_rows(scaled, Rc::new(rows))?;
        bars.push(g.add(t, part)?);
    }
    Ok(GroupNodes {
        partner_ids: partner_ids.to_vec(),
        tilde: tilde.to_vec(),
        bars,
        keys: mha.keys,
        values: mha.values,
    })
}

/// Output of extending a cached trajectory group by one partner.
pub struct ExtendOut {
    /// Encoded tokens of the new partner, [n_tokens x dim].
    pub bar: NodeId,
    /// Per head: full rotated keys of the extended stack, spatial-major.
    pub keys: Vec<NodeId>,
    /// Per head: full values of the extended stack, spatial-major.
    pub values: Vec<NodeId>,
}

/// Computes the trajectory encoding of one appended partner against cached
/// keys and values, reproducing the from-scratch stacked attention bit for
/// bit: the new partner's queries see exactly the same key columns in the
/// same order as rows (n, 0..=P) of the full causal stack.
pub fn trajectory_extend<S: Scalar>(
    g: &mut Graph<S>,
    w: &AttentionNode,
    ls: NodeId,
    old_keys: &[NodeId],
    old_values: &[NodeId],
    old_partner_ids: &[usize],
    new_tilde: NodeId,
    new_partner_id: usize,
    rope_base: f64,
) -> Result<ExtendOut> {
    check_ascending(old_partner_ids)?;
    let p_old = old_partner_ids.len();
    if p_old == 0 || old_keys.len() != w.heads || old_values.len() != w.heads {
        return Err(Error::Config("extend needs cached keys and values for every head".into()));
    }
    if *old_partner_ids.last().unwrap() >= new_partner_id {
        return Err(Error::Ordering(format!(
            "appended partner {new_partner_id} must come after cached partners {old_partner_ids:?}"
        )));
    }
    let n_tokens = g.value(new_tilde).rows();
    let dim = g.value(new_tilde).cols();
    let dh = dim / w.heads;
    let p_new = p_old + 1;
    let scale = 1.0 / (dh as f64).sqrt();

    let normed = g.layer_norm(new_tilde, w.norm_x.gamma, w.norm_x.beta)?;
    let qs = project_heads(g, normed, w.wq, w.bq, w.heads)?;
    let ks = project_heads(g, normed, w.wk, w.bk, w.heads)?;
    let vs = project_heads(g, normed, w.wv, w.bv, w.heads)?;

    // Rows of the new partner sit at trajectory positions (n, new id).
    let pos: Vec<(usize, usize)> = (0..n_tokens).map(|n| (n, new_partner_id)).collect();
    let table = Rc::new(RopeTable::trajectory(&pos, dh, rope_base)?);

    // Interleave cached rows with the new partner's row at each spatial
    // index: row (n, p) of the extended stack.
    let mut perm = Vec::with_capacity(n_tokens * p_new);
    for n in 0..n_tokens {
        for p in 0..p_old {
            perm.push(n * p_old + p);
        }
        perm.push(n_tokens * p_old + n);
    }
    let perm = Rc::new(perm);

    // Query row n may attend to every partner at spatial index n.
    let mut mask = vec![false; n_tokens * n_tokens * p_new];
    for n in 0..n_tokens {
        for p in 0..p_new {
            mask[n * (n_tokens * p_new) + n * p_new + p] = true;
        }
    }
    let mask = Rc::new(mask);

    let mut ctxs = Vec::with_capacity(w.heads);
    let mut keys = Vec::with_capacity(w.heads);
    let mut values = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let q = g.rope(qs[h], Rc::clone(&table))?;
        let k_new = g.rope(ks[h], Rc::clone(&table))?;
        let k_all = g.concat_rows(&[old_keys[h], k_new])?;
        let k_full = g.gather_rows(k_all, Rc::clone(&perm))?;
        let v_all = g.concat_rows(&[old_values[h], vs[h]])?;
        let v_full = g.gather_rows(v_all, Rc::clone(&perm))?;
        let logits = g.matmul_abt(q, k_full)?;
        let logits = g.scale(logits, scale)?;
        let probs = g.softmax_rows(logits, Some(Rc::clone(&mask)))?;
        ctxs.push(g.matmul(probs, v_full)?);
        keys.push(k_full);
        values.push(v_full);
    }
    let merged = g.concat_cols(&ctxs)?;
    let out = g.matmul(merged, w.wo)?;
    let out = g.add_row_bias(out, w.bo)?;
    let scaled = g.mul_row_vec(out, ls)?;
    let bar = g.add(new_tilde, scaled)?;
    Ok(ExtendOut { bar, keys, values })
}
