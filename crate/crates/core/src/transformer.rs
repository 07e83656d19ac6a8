//! Multi-scale encoder over flattened language-activated features and the
//! anchor-box query decoder shared by the matching and contrastive parts.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::encoders::VisualPyramid;
use crate::error::{PcanError, Result};
use crate::geometry::xyxy_to_cxcywh;
use crate::model::ModelConfig;
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::pam::ContrastiveGroupSet;

const POS_TEMPERATURE: f64 = 10000.0;
const ANCHOR_EPS: f64 = 1e-4;

fn frequency(i: usize, dims: usize) -> f64 {
    1.0 / POS_TEMPERATURE.powf(2.0 * (i / 2) as f64 / dims as f64)
}

/// Sinusoidal embedding of token positions, `len x dim`.
pub fn sine_pos_1d(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        for i in 0..dim {
            let a = p as f64 * frequency(i, dim);
            t.set(p, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

/// Fixed 2-D embedding over normalized cell centres: the first `dim/2`
/// channels encode y, the rest x.
pub fn sine_pos_2d(height: usize, width: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut t = Tensor::zeros(height * width, dim);
    for y in 0..height {
        for x in 0..width {
            let ny = (y as f64 + 0.5) / height as f64 * 2.0 * PI;
            let nx = (x as f64 + 0.5) / width as f64 * 2.0 * PI;
            for i in 0..half {
                let f = frequency(i, half);
                let (ay, ax) = (ny * f, nx * f);
                let r = y * width + x;
                t.set(r, i, if i % 2 == 0 { ay.sin() } else { ay.cos() });
                t.set(r, half + i, if i % 2 == 0 { ax.sin() } else { ax.cos() });
            }
        }
    }
    t
}

fn inverse_sigmoid(v: f64) -> f64 {
    let v = v.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
    (v / (1.0 - v)).ln()
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), c, cfg.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[c, cfg.ffn_mult * c, c], rng),
        }
    }

    /// `pos`, when given, is added to queries and keys.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Option<Var>) -> Var {
        let h = self.norm1.forward(g, store, x);
        let qk = match pos {
            Some(p) => g.add(h, p),
            None => h,
        };
        let a = self.attn.forward(g, store, qk, qk, h);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        g.add(x, f)
    }
}

/// Flattened encoder output.
#[derive(Debug, Clone)]
pub struct MemoryFeatures {
    /// `F x C`, levels concatenated finest first.
    pub features: Var,
    /// Positional embedding rows matching `features`.
    pub pos: Var,
    pub level_shapes: Vec<(usize, usize)>,
}

impl MemoryFeatures {
    pub fn len(&self) -> usize {
        self.level_shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self { layers: (0..cfg.enc_layers).map(|i| EncoderLayer::new(store, &format!("encoder.{i}"), cfg, rng)).collect() }
    }

    /// Add per-level positional embeddings, flatten, and run the stack.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, pyr: &VisualPyramid) -> MemoryFeatures {
        let mut maps = Vec::with_capacity(pyr.levels.len());
        let mut pos_rows = Vec::with_capacity(pyr.levels.len());
        for l in &pyr.levels {
            let p = g.constant(sine_pos_2d(l.height, l.width, pyr.channels));
            maps.push(g.add(l.map, p));
            pos_rows.push(p);
        }
        let mut x = g.concat_rows(&maps);
        let pos = g.concat_rows(&pos_rows);
        for layer in &self.layers {
            x = layer.forward(g, store, x, None);
        }
        MemoryFeatures { features: x, pos, level_shapes: pyr.shapes() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryOrigin {
    MatchingLearnable,
    ContrastiveGroup(usize),
}

/// Decoder input: content rows plus 4-D anchors kept in inverse-sigmoid
/// space (`sigmoid(anchors)` is the center-size box).
#[derive(Debug, Clone, Copy)]
pub struct QueryBundle {
    pub content: Var,
    pub anchors: Var,
    pub origin: QueryOrigin,
    /// Leading rows that come from PAM (0 for the matching part).
    pub prior_rows: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `N x C` refined queries.
    pub queries: Var,
    /// Anchors before the first layer and after every layer (inverse-sigmoid space).
    pub anchors: Vec<Var>,
}

impl DecoderOutput {
    pub fn final_anchors(&self) -> Var {
        *self.anchors.last().expect("at least the input anchors")
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Anchor sine embedding (`4 * C/2`) to query position (`C`).
    pub anchor_head: Mlp,
    pub refine: Mlp,
    pub final_norm: LayerNorm,
    /// Learnable matching-part anchors, `N x 4`, inverse-sigmoid space.
    pub anchors: ParamId,
    pub queries: usize,
    pub channels: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderLayer {
                    norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), c),
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), c, cfg.heads, rng),
                    norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), c),
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), c, cfg.heads, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), c),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[c, cfg.ffn_mult * c, c], rng),
                }
            })
            .collect();
        let anchor_head = Mlp::new(store, "decoder.anchor_head", &[2 * c, c, c], rng);
        let refine = Mlp::new(store, "decoder.refine", &[c, c, 4], rng);
        for id in [refine.last().weight, refine.last().bias] {
            let t = store.get_mut(id);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        // centres spread over the image, sizes 0.1..0.4
        let mut init = Vec::with_capacity(cfg.queries * 4);
        for _ in 0..cfg.queries {
            init.push(inverse_sigmoid(rng.random_range(0.1..0.9)));
            init.push(inverse_sigmoid(rng.random_range(0.1..0.9)));
            init.push(inverse_sigmoid(rng.random_range(0.1..0.4)));
            init.push(inverse_sigmoid(rng.random_range(0.1..0.4)));
        }
        let anchors = store.add("decoder.anchors", Tensor::from_vec(cfg.queries, 4, init));
        Self { layers, anchor_head, refine, final_norm: LayerNorm::new(store, "decoder.final_norm", c), anchors, queries: cfg.queries, channels: c }
    }

    /// Sine embedding of sigmoid anchors: each of the 4 coordinates gets
    /// `C/2` channels.
    fn anchor_embedding(&self, g: &mut Graph, raw: Var) -> Var {
        let half = self.channels / 2;
        let width = 4 * half;
        let mut freq = Tensor::zeros(4, width);
        let mut phase = Tensor::zeros(1, width);
        for j in 0..4 {
            for i in 0..half {
                freq.set(j, j * half + i, 2.0 * PI * frequency(i, half));
                if i % 2 == 1 {
                    phase.set(0, j * half + i, PI / 2.0);
                }
            }
        }
        let boxes = g.sigmoid(raw);
        let f = g.constant(freq);
        let p = g.constant(phase);
        let scaled = g.matmul(boxes, f);
        let shifted = g.add_row(scaled, p);
        g.sin(shifted)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: &MemoryFeatures, bundle: &QueryBundle, refine: bool) -> DecoderOutput {
        let mut tgt = bundle.content;
        let mut raw = bundle.anchors;
        let mut anchors = vec![raw];
        let keys = g.add(memory.features, memory.pos);
        for layer in &self.layers {
            let emb = self.anchor_embedding(g, raw);
            let qpos = self.anchor_head.forward(g, store, emb);

            let h = layer.norm_self.forward(g, store, tgt);
            let q = g.add(h, qpos);
            let a = layer.self_attn.forward(g, store, q, q, h);
            tgt = g.add(tgt, a);

            let h = layer.norm_cross.forward(g, store, tgt);
            let q = g.add(h, qpos);
            let a = layer.cross_attn.forward(g, store, q, keys, memory.features);
            tgt = g.add(tgt, a);

            let h = layer.norm_ffn.forward(g, store, tgt);
            let f = layer.ffn.forward(g, store, h);
            tgt = g.add(tgt, f);

            if refine {
                let delta = self.refine.forward(g, store, tgt);
                raw = g.add(raw, delta);
            }
            anchors.push(raw);
        }
        DecoderOutput { queries: self.final_norm.forward(g, store, tgt), anchors }
    }

    pub fn make_matching_bundle(&self, g: &mut Graph, store: &ParamStore, sentence: Var) -> QueryBundle {
        let content = g.repeat_row(sentence, self.queries);
        let anchors = g.param(store, self.anchors);
        QueryBundle { content, anchors, origin: QueryOrigin::MatchingLearnable, prior_rows: 0 }
    }

    /// One bundle per group: PAM boxes fill the leading rows, the learnable
    /// anchors pad the rest.
    pub fn make_contrastive_bundles(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sentence: Var,
        groups: &ContrastiveGroupSet,
    ) -> Result<Vec<QueryBundle>> {
        let learned = g.param(store, self.anchors);
        let content = g.repeat_row(sentence, self.queries);
        let mut out = Vec::with_capacity(groups.len());
        for (gi, group) in groups.groups.iter().enumerate() {
            let k = group.len();
            if k > self.queries {
                return Err(PcanError::ShapeMismatch(format!("group of {k} boxes exceeds {} queries", self.queries)));
            }
            let mut rows = Vec::with_capacity(k * 4);
            for s in group {
                rows.extend(xyxy_to_cxcywh(s.bbox.corners()).map(inverse_sigmoid));
            }
            let prior = g.constant(Tensor::from_vec(k, 4, rows));
            let anchors = if k == self.queries {
                prior
            } else {
                let pad: Vec<usize> = (k..self.queries).collect();
                let pad = g.select_rows(learned, &pad);
                g.concat_rows(&[prior, pad])
            };
            out.push(QueryBundle { content, anchors, origin: QueryOrigin::ContrastiveGroup(gi), prior_rows: k });
        }
        Ok(out)
    }
}
