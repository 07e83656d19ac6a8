//! FPN-style fusion of encoder memory, per-query dynamic 3x3 convolution
//! masks, and the box / class / embedding heads.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{PcanError, Result};
use crate::model::ModelConfig;
use crate::nn::{im2col_index, upsample2x_index, xavier, Linear, Mlp, ParamId, ParamStore};
use crate::transformer::{DecoderOutput, MemoryFeatures};

/// Stride-8 map shared by every query's dynamic kernel.
#[derive(Debug, Clone, Copy)]
pub struct FusedMap {
    /// `(h*w) x C_mask`.
    pub map: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Per-query outputs of one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct PredictionSet {
    /// `N x 4`, center-size normalized.
    pub boxes: Var,
    /// `(h/8 * w/8) x N`, column `n` is query `n`'s mask.
    pub mask_logits: Var,
    /// `(H * W) x N`, bilinear upsampling of `mask_logits`.
    pub mask_logits_full: Var,
    /// `N x 1` referent-ness logits.
    pub class_logits: Var,
    /// `N x D`.
    pub embeddings: Var,
}

/// Plain values of one prediction row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionValues {
    pub boxes: Vec<[f64; 4]>,
    /// Query-major full-resolution mask logits.
    pub masks: Vec<Vec<f64>>,
    pub class_logits: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn values(&self, g: &Graph) -> PredictionValues {
        let b = g.value(self.boxes);
        let m = g.value(self.mask_logits_full);
        let c = g.value(self.class_logits);
        let e = g.value(self.embeddings);
        let n = b.rows;
        PredictionValues {
            boxes: (0..n).map(|r| [b.at(r, 0), b.at(r, 1), b.at(r, 2), b.at(r, 3)]).collect(),
            masks: (0..n).map(|q| (0..m.rows).map(|p| m.at(p, q)).collect()).collect(),
            class_logits: c.data.clone(),
            embeddings: (0..n).map(|r| e.row(r).to_vec()).collect(),
        }
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.boxes).0
    }
}

/// Bilinear upsampling matrix (`(H*W) x (h*w)`), half-pixel centres,
/// edge-clamped.
pub fn bilinear_matrix(h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    fn taps(dst: usize, src_len: usize, dst_len: usize) -> [(usize, f64); 2] {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        let t = s - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    }
    let mut m = Tensor::zeros(out_h * out_w, h * w);
    for y in 0..out_h {
        let ty = taps(y, h, out_h);
        for x in 0..out_w {
            let tx = taps(x, w, out_w);
            for (sy, wy) in ty {
                for (sx, wx) in tx {
                    let r = y * out_w + x;
                    let c = sy * w + sx;
                    m.set(r, c, m.at(r, c) + wy * wx);
                }
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct MaskHead {
    /// `C x C_mask`, no bias.
    pub fpn_proj: ParamId,
    pub kernel_ffn: Mlp,
    pub box_ffn: Mlp,
    pub class_head: Linear,
    pub embed_head: Linear,
    pub mask_channels: usize,
    pub normalize_embeddings: bool,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let cm = cfg.mask_channels;
        let fpn_proj = store.add("mask.fpn_proj", xavier(c, cm, rng));
        let kernel_ffn = Mlp::new(store, "mask.kernel_ffn", &[c, c, Self::kernel_params(cm)], rng);
        let box_ffn = Mlp::new(store, "box_head", &[c, c, c, 4], rng);
        for id in [box_ffn.last().weight, box_ffn.last().bias] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let class_head = Linear::new(store, "class_head", c, 1, rng);
        // prior probability 0.1 for a query being the referent
        store.get_mut(class_head.bias).data[0] = -(9.0f64).ln();
        let embed_head = Linear::new(store, "embed_head", c, cfg.embed_dim, rng);
        let head = Self { fpn_proj, kernel_ffn, box_ffn, class_head, embed_head, mask_channels: cm, normalize_embeddings: cfg.normalize_embeddings };
        assert_eq!(head.kernel_ffn.last().out_dim(store), Self::kernel_params(cm), "kernel FFN width");
        head
    }

    /// Dynamic-kernel parameter count: a 3x3xC_mask kernel plus bias.
    pub const fn kernel_params(mask_channels: usize) -> usize {
        9 * mask_channels + 1
    }

    /// Split memory into levels, upsample the coarsest and add level by level
    /// down to stride 8, then project to `C_mask` channels.
    pub fn fuse_fpn(&self, g: &mut Graph, store: &ParamStore, memory: &MemoryFeatures) -> Result<FusedMap> {
        let (rows, c) = g.shape(memory.features);
        if rows != memory.len() || memory.level_shapes.is_empty() {
            return Err(PcanError::ShapeMismatch(format!("memory has {rows} rows, level shapes need {}", memory.len())));
        }
        let mut levels = Vec::new();
        let mut off = 0;
        for &(h, w) in &memory.level_shapes {
            let idx: Vec<usize> = (off..off + h * w).collect();
            levels.push((g.select_rows(memory.features, &idx), h, w));
            off += h * w;
        }
        let (mut acc, mut h, mut w) = *levels.last().expect("non-empty");
        for &(finer, fh, fw) in levels.iter().rev().skip(1) {
            if fh != 2 * h || fw != 2 * w {
                return Err(PcanError::ShapeMismatch(format!("level {fh}x{fw} is not twice {h}x{w}")));
            }
            let up = g.gather(acc, fh * fw, c, upsample2x_index(h, w, c));
            acc = g.add(finer, up);
            (h, w) = (fh, fw);
        }
        let proj = g.param(store, self.fpn_proj);
        let map = g.matmul(acc, proj);
        Ok(FusedMap { map, height: h, width: w, channels: self.mask_channels })
    }

    /// Convolve the fused map with one generated 3x3 kernel per row of
    /// `kernels` (`N x (9*C_mask + 1)`, kernel then bias). Zero padding.
    pub fn dynamic_masks(&self, g: &mut Graph, kernels: Var, fused: &FusedMap) -> Result<Var> {
        let (n, p) = g.shape(kernels);
        let cm = fused.channels;
        if p != Self::kernel_params(cm) {
            return Err(PcanError::ShapeMismatch(format!("kernel rows have {p} params, expected {}", Self::kernel_params(cm))));
        }
        let (_, _, idx) = im2col_index(fused.height, fused.width, cm, 3, 1, 1);
        let patches = g.gather(fused.map, fused.height * fused.width, 9 * cm, idx);
        let weights = g.select_cols(kernels, 0..9 * cm);
        let weights = g.transpose(weights);
        let bias = g.select_cols(kernels, 9 * cm..9 * cm + 1);
        let bias = g.reshape(bias, 1, n);
        let logits = g.matmul(patches, weights);
        Ok(g.add_row(logits, bias))
    }

    pub fn dynamic_mask(&self, g: &mut Graph, kernel: Var, fused: &FusedMap) -> Result<Var> {
        self.dynamic_masks(g, kernel, fused)
    }

    pub fn predict_heads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        decoded: &DecoderOutput,
        fused: &FusedMap,
        image_hw: (usize, usize),
    ) -> Result<PredictionSet> {
        let q = decoded.queries;
        let delta = self.box_ffn.forward(g, store, q);
        let raw = g.add(decoded.final_anchors(), delta);
        let boxes = g.sigmoid(raw);
        let class_logits = self.class_head.forward(g, store, q);
        let e = self.embed_head.forward(g, store, q);
        let embeddings = if self.normalize_embeddings { g.l2_normalize_rows(e, 1e-12) } else { e };
        let kernels = self.kernel_ffn.forward(g, store, q);
        let mask_logits = self.dynamic_masks(g, kernels, fused)?;
        let mask_logits_full = upsample_logits(g, mask_logits, fused, image_hw);
        Ok(PredictionSet { boxes, mask_logits, mask_logits_full, class_logits, embeddings })
    }
}

pub fn upsample_logits(g: &mut Graph, logits: Var, fused: &FusedMap, image_hw: (usize, usize)) -> Var {
    thread_local! {
        static CACHE: std::cell::RefCell<std::collections::HashMap<(usize, usize, usize, usize), Rc<Tensor>>> =
            Default::default();
    }
    let key = (fused.height, fused.width, image_hw.0, image_hw.1);
    let m = CACHE.with(|c| {
        c.borrow_mut()
            .entry(key)
            .or_insert_with(|| Rc::new(bilinear_matrix(key.0, key.1, key.2, key.3)))
            .clone()
    });
    let up = g.constant((*m).clone());
    g.matmul(up, logits)
}
