//! The Transformer meta-learner.
//!
//! Data tokens and learnable initialization tokens (one per group of weight
//! columns) go through a pre-norm Transformer encoder together. The outputs at
//! the initialization-token positions are the weight tokens; a per-layer head
//! `FC*_i` maps each to a vector `u_g` of the layer's input width, and every
//! column of `W_i` is `normalize(u_{col / k} * wbar_col)` with a learnable,
//! observation-independent `wbar` per column.
//!
//! Each encoder layer is `phi <- phi + U(phi; d)`: the residual stream plays the
//! role of iterated weight updates, with attention and feed-forward sublayers
//! as the learned update rule.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, Graph, ParamStore, Real, Tensor, Var};
use crate::inr::{InrArch, InrMode, WeightSet};
use crate::raster::Image;
use crate::tokenizer::{embed, extend_view, merge_views, patchify, TokenBatch, TokenRole, ViewObservation};
use crate::{Error, Result};

/// Squared column norm below which `normalize(u * wbar)` is treated as
/// degenerate and the column is zeroed. Above it the normalized column is
/// within 5e-6 of unit length given the 1e-8 epsilon inside the square root.
pub const DEGENERATE_SQ_NORM: f64 = 1e-3;

/// Column grouping of one weight matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroups {
    /// Input width including the bias row.
    pub rows: usize,
    pub columns: usize,
    pub groups: usize,
    pub group_size: usize,
    pub tokens: Range<usize>,
}

/// How weight tokens map onto weight-matrix columns, layer by layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub layers: Vec<LayerGroups>,
}

impl GroupLayout {
    pub fn total_tokens(&self) -> usize {
        self.layers.last().map_or(0, |l| l.tokens.end)
    }

    /// INR layer that owns weight token `t`.
    pub fn layer_of(&self, t: usize) -> Option<usize> {
        self.layers.iter().position(|l| l.tokens.contains(&t))
    }
}

/// Groups per layer are `min(G, columns)`; the column count must divide evenly.
pub fn build_layout(arch: &InrArch, groups: usize) -> Result<GroupLayout> {
    if groups == 0 {
        return Err(Error::invalid("build_layout", "group count must be positive"));
    }
    let mut start = 0;
    let mut layers = Vec::new();
    for (i, (rows, columns)) in arch.layer_shapes().into_iter().enumerate() {
        let g = groups.min(columns);
        if columns % g != 0 {
            return Err(Error::Layout {
                layer: i,
                columns,
                groups: g,
            });
        }
        layers.push(LayerGroups {
            rows,
            columns,
            groups: g,
            group_size: columns / g,
            tokens: start..start + g,
        });
        start += g;
    }
    Ok(GroupLayout { layers })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub inr: InrArch,
    /// Weight groups per matrix (capped at the column count).
    pub groups: usize,
    /// Token width.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub pad: usize,
    /// Observation size before padding.
    pub height: usize,
    pub width: usize,
}

impl HypernetConfig {
    /// Channels per observation pixel: RGB for images, RGB + ray for views.
    pub fn channels(&self) -> usize {
        match self.inr.mode {
            InrMode::Image => 3,
            InrMode::RadianceField => 9,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        ((self.height + 2 * self.pad) / self.patch, (self.width + 2 * self.pad) / self.patch)
    }

    pub fn patches_per_view(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels()
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        build_layout(&self.inr, self.groups)
    }

    pub fn validate(&self) -> Result<()> {
        self.inr.validate()?;
        self.layout()?;
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "hypernet",
                format!("width {} is not divisible into {} heads", self.dim, self.heads),
            ));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("hypernet", "encoder needs at least one layer and a feed-forward width"));
        }
        if self.patch == 0 || !(self.height + 2 * self.pad).is_multiple_of(self.patch) || !(self.width + 2 * self.pad).is_multiple_of(self.patch) {
            return Err(Error::invalid(
                "hypernet",
                format!(
                    "{}x{} input with pad {} does not tile into {}-pixel patches",
                    self.height, self.width, self.pad, self.patch
                ),
            ));
        }
        Ok(())
    }
}

/// An observation the meta-learner can generate weights from.
#[derive(Clone, Copy, Debug)]
pub enum Observation<'a> {
    Image(&'a Image),
    Views(&'a [ViewObservation]),
}

/// Parameters of the whole meta-learner, stored by name.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLearner<T> {
    pub config: HypernetConfig,
    pub params: ParamStore<T>,
}

fn xavier<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform([rows, cols], bound, rng)
}

/// Graph handles of one encoder layer.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub ln1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ln2: (Var, Var),
    pub ffn1: (Var, Var),
    pub ffn2: (Var, Var),
}

/// Graph handles of one `FC*` head.
#[derive(Clone, Debug)]
pub struct BoundHead {
    pub ln: (Var, Var),
    pub fc: (Var, Var),
    pub wbar: Var,
}

/// All meta-learner parameters recorded as leaves of one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub pos: Var,
    pub patch_fc: (Var, Var),
    pub init_tokens: Var,
    pub layers: Vec<BoundLayer>,
    pub heads: Vec<BoundHead>,
    pub by_name: BTreeMap<String, Var>,
}

impl Bound {
    /// Assembles a [`Bound`] from already recorded parameter nodes, keyed by
    /// parameter name.
    pub fn from_vars(config: &HypernetConfig, by_name: BTreeMap<String, Var>) -> Result<Bound> {
        let get = |name: &str| -> Result<Var> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid("bind", format!("missing parameter `{name}`")))
        };
        let pair = |a: &str, b: &str| -> Result<(Var, Var)> { Ok((get(a)?, get(b)?)) };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("encoder.{l}.{s}");
            layers.push(BoundLayer {
                ln1: pair(&n("ln1.g"), &n("ln1.b"))?,
                q: pair(&n("attn.q.w"), &n("attn.q.b"))?,
                k: pair(&n("attn.k.w"), &n("attn.k.b"))?,
                v: pair(&n("attn.v.w"), &n("attn.v.b"))?,
                o: pair(&n("attn.o.w"), &n("attn.o.b"))?,
                ln2: pair(&n("ln2.g"), &n("ln2.b"))?,
                ffn1: pair(&n("ffn.w1"), &n("ffn.b1"))?,
                ffn2: pair(&n("ffn.w2"), &n("ffn.b2"))?,
            });
        }
        let mut heads = Vec::with_capacity(config.inr.depth);
        for i in 0..config.inr.depth {
            heads.push(BoundHead {
                ln: pair(&format!("heads.{i}.ln.g"), &format!("heads.{i}.ln.b"))?,
                fc: pair(&format!("heads.{i}.fc.w"), &format!("heads.{i}.fc.b"))?,
                wbar: get(&format!("wbar.{i}"))?,
            });
        }
        Ok(Bound {
            pos: get("tokenizer.pos")?,
            patch_fc: pair("tokenizer.fc.w", "tokenizer.fc.b")?,
            init_tokens: get("init_tokens")?,
            layers,
            heads,
            by_name,
        })
    }

    /// Gradients keyed by parameter name; parameters with no gradient get zeros.
    pub fn named_grads<T: Real>(&self, g: &Graph<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.by_name
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, g.shape(v))))
            .collect()
    }
}

/// Weights produced by one [`generate`] call.
#[derive(Clone, Debug)]
pub struct Generated<T> {
    pub weights: Vec<Var>,
    /// `(layer, column)` pairs zeroed because `u * wbar` was near zero.
    pub degenerate: Vec<(usize, usize)>,
    /// Final-layer attention averaged over heads, `N x N` over
    /// `[data tokens..., weight tokens...]`.
    pub last_attention: Tensor<T>,
    pub data_tokens: usize,
}

impl<T: Real> MetaLearner<T> {
    pub fn init<R: Rng + ?Sized>(config: HypernetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let (d, f) = (config.dim, config.ffn_dim);
        let pd = config.patch_dim();
        let mut p = ParamStore::new();
        // e_i is added to raw patch values, so it starts at their scale
        p.insert("tokenizer.pos", Tensor::randn([config.patches_per_view(), pd], 1.0, rng));
        p.insert("tokenizer.fc.w", xavier(pd, d, rng));
        p.insert("tokenizer.fc.b", Tensor::zeros([d]));
        p.insert("init_tokens", Tensor::randn([layout.total_tokens(), d], 0.02, rng));
        for l in 0..config.layers {
            let pre = format!("encoder.{l}");
            p.insert(format!("{pre}.ln1.g"), Tensor::ones([d]));
            p.insert(format!("{pre}.ln1.b"), Tensor::zeros([d]));
            for name in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{name}.w"), xavier(d, d, rng));
                p.insert(format!("{pre}.attn.{name}.b"), Tensor::zeros([d]));
            }
            p.insert(format!("{pre}.ln2.g"), Tensor::ones([d]));
            p.insert(format!("{pre}.ln2.b"), Tensor::zeros([d]));
            p.insert(format!("{pre}.ffn.w1"), xavier(d, f, rng));
            p.insert(format!("{pre}.ffn.b1"), Tensor::zeros([f]));
            p.insert(format!("{pre}.ffn.w2"), xavier(f, d, rng));
            p.insert(format!("{pre}.ffn.b2"), Tensor::zeros([d]));
        }
        for (i, lg) in layout.layers.iter().enumerate() {
            p.insert(format!("heads.{i}.ln.g"), Tensor::ones([d]));
            p.insert(format!("heads.{i}.ln.b"), Tensor::zeros([d]));
            p.insert(format!("heads.{i}.fc.w"), xavier(d, lg.rows, rng));
            p.insert(format!("heads.{i}.fc.b"), Tensor::zeros([lg.rows]));
            let mut wbar = Tensor::<T>::randn([lg.columns, lg.rows], 1.0, rng);
            for row in wbar.data_mut().chunks_mut(lg.rows) {
                let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                for x in row {
                    *x = *x / n;
                }
            }
            p.insert(format!("wbar.{i}"), wbar);
        }
        Ok(MetaLearner { config, params: p })
    }

    /// Records every parameter in `g`; `trainable` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let mut by_name = BTreeMap::new();
        for (name, t) in self.params.iter() {
            by_name.insert(name.clone(), g.leaf(t.clone(), trainable));
        }
        Bound::from_vars(&self.config, by_name)
    }

    /// Feed-forward inference outside any training graph.
    pub fn generate_weights(&self, obs: Observation<'_>) -> Result<(WeightSet<T>, Generated<T>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let gen = generate(&mut g, &self.config, &b, obs)?;
        let ws = materialize(&g, &self.config.inr, &gen.weights)?;
        Ok((ws, gen))
    }
}

/// Copies generated weight nodes out of a graph.
pub fn materialize<T: Real>(g: &Graph<T>, arch: &InrArch, weights: &[Var]) -> Result<WeightSet<T>> {
    WeightSet::new(arch.clone(), weights.iter().map(|&w| g.value(w).clone()).collect())
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Multi-head self-attention over all rows of `x`; also returns the
/// head-averaged attention matrix.
fn self_attention<T: Real>(g: &mut Graph<T>, x: Var, layer: &BoundLayer, heads: usize) -> Result<(Var, Tensor<T>)> {
    let (n, d) = g.value(x).dims2().unwrap();
    let dh = d / heads;
    let q = linear(g, x, layer.q)?;
    let k = linear(g, x, layer.k)?;
    let v = linear(g, x, layer.v)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut avg = vec![T::zero(); n * n];
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
        let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
        let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.softmax(scores, 1)?;
        for (a, &p) in avg.iter_mut().zip(g.value(probs).data()) {
            *a += p;
        }
        outs.push(g.matmul(probs, vh)?);
    }
    let inv = T::of(1.0 / heads as f64);
    for a in &mut avg {
        *a *= inv;
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok((linear(g, cat, layer.o)?, Tensor::new([n, n], avg)?))
}

/// Output of [`encoder_forward`].
pub struct EncoderOutput<T> {
    pub weight_tokens: TokenBatch,
    pub last_attention: Tensor<T>,
}

/// Runs the encoder over `[data; init]` and returns the outputs at the
/// initialization-token positions.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    heads: usize,
    data: TokenBatch,
    init: TokenBatch,
) -> Result<EncoderOutput<T>> {
    let n_data = g.shape(data.var)[0];
    if n_data == 0 {
        return Err(Error::invalid("encoder_forward", "no data tokens"));
    }
    if data.width(g) != init.width(g) {
        return Err(Error::shape("encoder_forward", g.shape(data.var), g.shape(init.var)));
    }
    let n_init = g.shape(init.var)[0];
    let mut x = g.concat(&[data.var, init.var], 0)?;
    let mut last_attention = Tensor::zeros([1]);
    for layer in &bound.layers {
        let xn = g.layer_norm(x, layer.ln1.0, layer.ln1.1)?;
        let (att, probs) = self_attention(g, xn, layer, heads)?;
        last_attention = probs;
        x = g.add(x, att)?;
        let xn = g.layer_norm(x, layer.ln2.0, layer.ln2.1)?;
        let hid = linear(g, xn, layer.ffn1)?;
        let hid = g.relu(hid)?;
        let ff = linear(g, hid, layer.ffn2)?;
        x = g.add(x, ff)?;
    }
    let out = g.slice(x, 0, n_data, n_data + n_init)?;
    Ok(EncoderOutput {
        weight_tokens: TokenBatch {
            var: out,
            role: TokenRole::Weight,
        },
        last_attention,
    })
}

/// `(layer, column)` pairs.
pub type ColumnIds = Vec<(usize, usize)>;

/// Maps weight tokens to INR weight matrices and the degenerate columns.
pub fn assemble_weights<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    layout: &GroupLayout,
    weight_tokens: Var,
) -> Result<(Vec<Var>, ColumnIds)> {
    if g.shape(weight_tokens)[0] != layout.total_tokens() {
        return Err(Error::invalid(
            "assemble_weights",
            format!("{} weight tokens for a layout of {}", g.shape(weight_tokens)[0], layout.total_tokens()),
        ));
    }
    let mut weights = Vec::with_capacity(layout.layers.len());
    let mut degenerate = Vec::new();
    for (i, (lg, head)) in layout.layers.iter().zip(&bound.heads).enumerate() {
        let tok = g.slice(weight_tokens, 0, lg.tokens.start, lg.tokens.end)?;
        let tok = g.layer_norm(tok, head.ln.0, head.ln.1)?;
        let u = linear(g, tok, head.fc)?;
        let u = if lg.group_size == 1 {
            u
        } else {
            let k = lg.group_size;
            let expand = Tensor::from_fn([lg.columns, lg.groups], |idx| {
                let (col, grp) = (idx / lg.groups, idx % lg.groups);
                if col / k == grp {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let e = g.constant(expand);
            g.matmul(e, u)?
        };
        let m = g.mul(u, head.wbar)?;
        let cols = g.l2_normalize(m, 1)?;
        let bad: Vec<usize> = g
            .value(m)
            .data()
            .chunks(lg.rows)
            .enumerate()
            .filter(|(_, row)| row.iter().map(|x| x.f64() * x.f64()).sum::<f64>() < DEGENERATE_SQ_NORM)
            .map(|(c, _)| c)
            .collect();
        let cols = if bad.is_empty() {
            cols
        } else {
            log::warn!("layer {i}: {} degenerate weight columns zeroed", bad.len());
            let mask = Tensor::from_fn([lg.columns, lg.rows], |idx| {
                if bad.contains(&(idx / lg.rows)) {
                    T::zero()
                } else {
                    T::one()
                }
            });
            degenerate.extend(bad.iter().map(|&c| (i, c)));
            let mask = g.constant(mask);
            g.mul(cols, mask)?
        };
        weights.push(g.transpose(cols)?);
    }
    Ok((weights, degenerate))
}

/// Data tokens for an observation: patchify (after view extension) and embed,
/// then merge views.
pub fn data_tokens<T: Real>(g: &mut Graph<T>, cfg: &HypernetConfig, bound: &Bound, obs: Observation<'_>) -> Result<TokenBatch> {
    match (cfg.inr.mode, obs) {
        (InrMode::Image, Observation::Image(img)) => {
            let grid = patchify(img, cfg.patch, cfg.pad)?;
            embed(g, &grid, bound.pos, bound.patch_fc.0, bound.patch_fc.1)
        }
        (InrMode::RadianceField, Observation::Views(views)) => {
            if views.is_empty() {
                return Err(Error::invalid("generate", "no input views"));
            }
            let mut sets = Vec::with_capacity(views.len());
            for v in views {
                let grid = patchify(&extend_view(v)?, cfg.patch, cfg.pad)?;
                sets.push(embed(g, &grid, bound.pos, bound.patch_fc.0, bound.patch_fc.1)?);
            }
            merge_views(g, &sets)
        }
        (mode, _) => Err(Error::invalid(
            "generate",
            format!("observation kind does not match a {mode:?} meta-learner"),
        )),
    }
}

/// Observation to INR weights, differentiable end to end.
pub fn generate<T: Real>(g: &mut Graph<T>, cfg: &HypernetConfig, bound: &Bound, obs: Observation<'_>) -> Result<Generated<T>> {
    let layout = cfg.layout()?;
    let data = data_tokens(g, cfg, bound, obs)?;
    let init = TokenBatch {
        var: bound.init_tokens,
        role: TokenRole::Init,
    };
    let enc = encoder_forward(g, bound, cfg.heads, data, init)?;
    let (weights, degenerate) = assemble_weights(g, bound, &layout, enc.weight_tokens.var)?;
    Ok(Generated {
        weights,
        degenerate,
        last_attention: enc.last_attention,
        data_tokens: data.count(g),
    })
}
