//! Parameter storage, basic layers and the optimizer.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Tensor, Var, GATHER_ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            name.bytes().for_each(&mut feed);
            for v in &t.data {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut feed);
            }
        }
        h
    }
}

/// Uniform Xavier/Glorot initialisation.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols
    }
}

/// Row-wise layer normalisation with learnable scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul_row(n, gamma);
        g.add_row(s, beta)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// Index map turning an `(h*w) x c` feature map into `(ho*wo) x (k*k*c)`
/// patches, column order `(ky, kx, channel)`, zero padded.
pub fn im2col_index(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> (usize, usize, Rc<Vec<u32>>) {
    type Key = (usize, usize, usize, usize, usize, usize);
    thread_local! {
        static CACHE: RefCell<HashMap<Key, (usize, usize, Rc<Vec<u32>>)>> = RefCell::new(HashMap::new());
    }
    let key = (h, w, c, k, stride, pad);
    CACHE.with(|cache| {
        if let Some(hit) = cache.borrow().get(&key) {
            return hit.clone();
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut idx = Vec::with_capacity(ho * wo * k * k * c);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ch in 0..c {
                            idx.push(if inside { ((iy as usize * w + ix as usize) * c + ch) as u32 } else { GATHER_ZERO });
                        }
                    }
                }
            }
        }
        let entry = (ho, wo, Rc::new(idx));
        cache.borrow_mut().insert(key, entry.clone());
        entry
    })
}

/// Nearest-neighbour 2x upsampling map for an `(h*w) x c` feature map.
pub fn upsample2x_index(h: usize, w: usize, c: usize) -> Rc<Vec<u32>> {
    let mut idx = Vec::with_capacity(4 * h * w * c);
    for y in 0..2 * h {
        for x in 0..2 * w {
            for ch in 0..c {
                idx.push((((y / 2) * w + x / 2) * c + ch) as u32);
            }
        }
    }
    Rc::new(idx)
}

/// 2-D convolution on `(h*w) x c` maps, implemented as patch gather + matmul.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let linear = Linear::new(store, name, kernel * kernel * in_channels, out_channels, rng);
        Self { linear, kernel, stride, pad, in_channels }
    }

    /// Returns the output map and its spatial size.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (ho, wo, idx) = im2col_index(h, w, self.in_channels, self.kernel, self.stride, self.pad);
        let cols = g.gather(x, ho * wo, self.kernel * self.kernel * self.in_channels, idx);
        (self.linear.forward(g, store, cols), ho, wo)
    }
}

/// Multi-head scaled dot-product attention with separate input projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, key: Var, value: Var) -> Var {
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, key);
        let v = self.v.forward(g, store, value);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = g.select_cols(q, cols.clone());
            let kh = g.select_cols(k, cols.clone());
            let vh = g.select_cols(v, cols);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, store, merged)
    }
}

/// Summed gradient buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect() }
    }

    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            for (a, b) in self.grads[id.0].data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Rescale so that the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.data.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in store.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in t.data.iter_mut().enumerate() {
                let g = grads.grads[i].data[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}
