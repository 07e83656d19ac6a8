//! Trainable visual and linguistic extractors and the language gate that
//! conditions visual features on the sentence before encoding.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{PcanError, Result};
use crate::model::{ModelConfig, Pooling};
use crate::nn::{Conv2d, Linear, ParamId, ParamStore};
use crate::transformer::{sine_pos_1d, EncoderLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Level {
    pub map: Var,
    pub height: usize,
    pub width: usize,
}

/// Multi-scale features, each level an `(h*w) x C` map, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualPyramid {
    pub levels: Vec<Level>,
    pub channels: usize,
}

impl VisualPyramid {
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.height, l.width)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextFeatures {
    /// `L x C` word features.
    pub words: Var,
    /// `1 x C` pooled sentence feature.
    pub sentence: Var,
}

/// Strided 3x3 convolution stack: three stride-2 stages reach stride 8, two
/// more give strides 16 and 32; a 1x1 projection maps each level to `C`.
#[derive(Debug, Clone)]
pub struct VisualExtractor {
    pub stem: Vec<Conv2d>,
    pub down: Vec<Conv2d>,
    pub proj: Vec<Linear>,
}

impl VisualExtractor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.backbone_widths;
        let stem = vec![
            Conv2d::new(store, "visual.stem.0", 3, w[0], 3, 2, 1, rng),
            Conv2d::new(store, "visual.stem.1", w[0], w[1], 3, 2, 1, rng),
            Conv2d::new(store, "visual.stem.2", w[1], w[2], 3, 2, 1, rng),
        ];
        let down = vec![
            Conv2d::new(store, "visual.down.0", w[2], w[3], 3, 2, 1, rng),
            Conv2d::new(store, "visual.down.1", w[3], w[4], 3, 2, 1, rng),
        ];
        let proj = [w[2], w[3], w[4]]
            .iter()
            .enumerate()
            .map(|(i, &cin)| Linear::new(store, &format!("visual.proj.{i}"), cin, cfg.channels, rng))
            .collect();
        Self { stem, down, proj }
    }

    /// `image` is `(h*w) x 3`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var, height: usize, width: usize) -> Result<VisualPyramid> {
        if height % 32 != 0 || width % 32 != 0 || height == 0 || width == 0 {
            return Err(PcanError::ShapeMismatch(format!("image {height}x{width} is not a positive multiple of 32")));
        }
        if g.shape(image) != (height * width, 3) {
            return Err(PcanError::ShapeMismatch(format!("image tensor {:?} for {height}x{width}x3", g.shape(image))));
        }
        let (mut x, mut h, mut w) = (image, height, width);
        for conv in &self.stem {
            let (y, ho, wo) = conv.forward(g, store, x, h, w);
            x = g.relu(y);
            (h, w) = (ho, wo);
        }
        let mut raw = vec![(x, h, w)];
        for conv in &self.down {
            let (y, ho, wo) = conv.forward(g, store, x, h, w);
            x = g.relu(y);
            (h, w) = (ho, wo);
            raw.push((x, h, w));
        }
        let levels = raw
            .into_iter()
            .zip(&self.proj)
            .map(|((x, h, w), p)| Level { map: p.forward(g, store, x), height: h, width: w })
            .collect();
        Ok(VisualPyramid { levels, channels: self.proj[0].out_dim(store) })
    }
}

/// Embedding table plus one self-attention block.
#[derive(Debug, Clone)]
pub struct TextExtractor {
    pub embedding: ParamId,
    pub block: EncoderLayer,
    pub vocab: usize,
    pub max_tokens: usize,
    pub pooling: Pooling,
}

impl TextExtractor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let table = Tensor::from_vec(
            cfg.vocab_size,
            cfg.channels,
            (0..cfg.vocab_size * cfg.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let embedding = store.add("text.embedding", table);
        let block = EncoderLayer::new(store, "text.block", cfg, rng);
        Self { embedding, block, vocab: cfg.vocab_size, max_tokens: cfg.max_tokens, pooling: cfg.pooling }
    }

    fn check(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.max_tokens {
            return Err(PcanError::ShapeMismatch(format!("expression length {} not in 1..={}", tokens.len(), self.max_tokens)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(PcanError::OutOfVocabulary { id: bad as usize, vocab: self.vocab });
        }
        Ok(())
    }

    /// Raw embedding rows, before positions are added.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32]) -> Result<Var> {
        self.check(tokens)?;
        let table = g.param(store, self.embedding);
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(g.select_rows(table, &rows))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32]) -> Result<TextFeatures> {
        let emb = self.embed(g, store, tokens)?;
        let (l, c) = g.shape(emb);
        let pos = g.constant(sine_pos_1d(l, c));
        let x = g.add(emb, pos);
        let words = self.block.forward(g, store, x, None);
        let sentence = pool(g, words, self.pooling);
        Ok(TextFeatures { words, sentence })
    }
}

pub fn pool(g: &mut Graph, words: Var, pooling: Pooling) -> Var {
    match pooling {
        Pooling::Mean => g.mean_rows(words),
        Pooling::Max => {
            let t = g.value(words);
            let (l, c) = t.shape();
            // route each channel through its arg-max row
            let idx: Vec<u32> = (0..c)
                .map(|j| {
                    let best = (0..l).max_by(|&a, &b| t.at(a, j).total_cmp(&t.at(b, j)).then(b.cmp(&a))).unwrap_or(0);
                    (best * c + j) as u32
                })
                .collect();
            g.gather(words, 1, c, std::rc::Rc::new(idx))
        }
    }
}

/// Channel-wise sigmoid gate computed from the sentence feature.
#[derive(Debug, Clone, Copy)]
pub struct LanguageGate {
    pub linear: Linear,
}

impl LanguageGate {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(store, "gate", cfg.channels, cfg.channels, rng) }
    }

    pub fn gate(&self, g: &mut Graph, store: &ParamStore, sentence: Var) -> Var {
        let logits = self.linear.forward(g, store, sentence);
        g.sigmoid(logits)
    }

    pub fn activate(&self, g: &mut Graph, store: &ParamStore, pyr: &VisualPyramid, sentence: Var) -> VisualPyramid {
        let gate = self.gate(g, store, sentence);
        apply_gate(g, pyr, gate)
    }
}

pub fn apply_gate(g: &mut Graph, pyr: &VisualPyramid, gate: Var) -> VisualPyramid {
    let levels = pyr.levels.iter().map(|l| Level { map: g.mul_row(l.map, gate), ..*l }).collect();
    VisualPyramid { levels, channels: pyr.channels }
}

/// Convert an `h x w x 3` image array into the `(h*w) x 3` layout.
pub fn image_tensor(image: &crate::synthdata::Array3) -> Tensor {
    Tensor::from_vec(image.height * image.width, image.channels, image.data.iter().map(|&v| v as f64).collect())
}
