//! Network assembly: extractors, language gate, encoder, the shared decoder
//! used by both the matching and the contrastive parts, and the heads.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::encoders::{image_tensor, LanguageGate, TextExtractor, VisualExtractor};
use crate::error::{PcanError, Result};
use crate::maskhead::{FusedMap, MaskHead, PredictionSet};
use crate::nn::ParamStore;
use crate::pam::ContrastiveGroupSet;
use crate::rng::{stream, sub_seed};
use crate::synthdata::grammar::{MAX_TOKENS, VOCAB};
use crate::synthdata::Array3;
use crate::transformer::{Decoder, DecoderOutput, Encoder, MemoryFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub embed_dim: usize,
    pub mask_channels: usize,
    pub backbone_widths: [usize; 5],
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub pooling: Pooling,
    pub language_gate: bool,
    pub normalize_embeddings: bool,
    pub refine_contrastive_anchors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            queries: 12,
            enc_layers: 4,
            dec_layers: 4,
            heads: 4,
            ffn_mult: 4,
            embed_dim: 64,
            mask_channels: 8,
            backbone_widths: [16, 32, 48, 64, 64],
            vocab_size: VOCAB.len(),
            max_tokens: MAX_TOKENS,
            pooling: Pooling::Mean,
            language_gate: true,
            normalize_embeddings: true,
            refine_contrastive_anchors: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PcanError::Config(m));
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("channels must be a positive even number, got {}", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if self.queries == 0 || self.embed_dim == 0 || self.mask_channels == 0 || self.ffn_mult == 0 {
            return bad("queries, embed_dim, mask_channels and ffn_mult must be positive".into());
        }
        if self.backbone_widths.contains(&0) {
            return bad("backbone widths must be positive".into());
        }
        if self.vocab_size == 0 || self.max_tokens == 0 {
            return bad("vocabulary and token budget must be positive".into());
        }
        Ok(())
    }
}

/// Everything the decoder passes share for one scene.
#[derive(Debug, Clone)]
pub struct SceneEncoding {
    pub memory: MemoryFeatures,
    pub sentence: Var,
    pub fused: FusedMap,
    pub image_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PartOutput {
    pub decoded: DecoderOutput,
    pub predictions: PredictionSet,
}

#[derive(Debug, Clone)]
struct Modules {
    visual: VisualExtractor,
    text: TextExtractor,
    gate: Option<LanguageGate>,
    encoder: Encoder,
    decoder: Decoder,
    head: MaskHead,
}

/// The full network. Parameters live in `store`; the matching and the
/// contrastive parts run the same `decoder` and `head`.
#[derive(Debug, Clone)]
pub struct Pcan {
    pub config: ModelConfig,
    pub store: ParamStore,
    modules: Modules,
}

impl Pcan {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(sub_seed(seed, "init"), 0);
        let mut store = ParamStore::new();
        let visual = VisualExtractor::new(&mut store, &config, &mut rng);
        let text = TextExtractor::new(&mut store, &config, &mut rng);
        let gate = config.language_gate.then(|| LanguageGate::new(&mut store, &config, &mut rng));
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let decoder = Decoder::new(&mut store, &config, &mut rng);
        let head = MaskHead::new(&mut store, &config, &mut rng);
        Ok(Self { config, store, modules: Modules { visual, text, gate, encoder, decoder, head } })
    }

    /// Rebuild the architecture for `config` and adopt `store` after checking
    /// that every parameter name and shape matches.
    pub fn with_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.store.len() != store.len() {
            return Err(PcanError::ShapeMismatch(format!("expected {} parameters, got {}", model.store.len(), store.len())));
        }
        for ((_, a, ta), (_, b, tb)) in model.store.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(PcanError::ShapeMismatch(format!("parameter {a} {:?} vs {b} {:?}", ta.shape(), tb.shape())));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn encode_scene(&self, g: &mut Graph, image: &Array3, tokens: &[u32]) -> Result<SceneEncoding> {
        if image.channels != 3 {
            return Err(PcanError::ShapeMismatch(format!("image has {} channels, expected 3", image.channels)));
        }
        let m = &self.modules;
        let img = g.constant(image_tensor(image));
        let text = m.text.forward(g, &self.store, tokens)?;
        let mut pyr = m.visual.forward(g, &self.store, img, image.height, image.width)?;
        if let Some(gate) = &m.gate {
            pyr = gate.activate(g, &self.store, &pyr, text.sentence);
        }
        let memory = m.encoder.encode(g, &self.store, &pyr);
        let fused = m.head.fuse_fpn(g, &self.store, &memory)?;
        Ok(SceneEncoding { memory, sentence: text.sentence, fused, image_hw: (image.height, image.width) })
    }

    pub fn matching_part(&self, g: &mut Graph, enc: &SceneEncoding) -> Result<PartOutput> {
        let m = &self.modules;
        let bundle = m.decoder.make_matching_bundle(g, &self.store, enc.sentence);
        let decoded = m.decoder.decode(g, &self.store, &enc.memory, &bundle, true);
        let predictions = m.head.predict_heads(g, &self.store, &decoded, &enc.fused, enc.image_hw)?;
        Ok(PartOutput { decoded, predictions })
    }

    /// One decoder pass per group; PAM boxes occupy the leading rows.
    pub fn contrastive_part(&self, g: &mut Graph, enc: &SceneEncoding, groups: &ContrastiveGroupSet) -> Result<Vec<PartOutput>> {
        let m = &self.modules;
        let bundles = m.decoder.make_contrastive_bundles(g, &self.store, enc.sentence, groups)?;
        bundles
            .iter()
            .map(|b| {
                let decoded = m.decoder.decode(g, &self.store, &enc.memory, b, self.config.refine_contrastive_anchors);
                let predictions = m.head.predict_heads(g, &self.store, &decoded, &enc.fused, enc.image_hw)?;
                Ok(PartOutput { decoded, predictions })
            })
            .collect()
    }

    /// Decode an arbitrary bundle of anchors (inverse-sigmoid space) with the
    /// sentence as content; used to compare the two parts on equal inputs.
    pub fn decode_with_anchors(&self, g: &mut Graph, enc: &SceneEncoding, anchors: Tensor, refine: bool) -> Result<PartOutput> {
        let m = &self.modules;
        if anchors.cols != 4 || anchors.rows == 0 {
            return Err(PcanError::ShapeMismatch(format!("anchors must be n x 4, got {:?}", anchors.shape())));
        }
        let content = g.repeat_row(enc.sentence, anchors.rows);
        let anchors = g.constant(anchors);
        let bundle = crate::transformer::QueryBundle { content, anchors, origin: crate::transformer::QueryOrigin::MatchingLearnable, prior_rows: 0 };
        let decoded = m.decoder.decode(g, &self.store, &enc.memory, &bundle, refine);
        let predictions = m.head.predict_heads(g, &self.store, &decoded, &enc.fused, enc.image_hw)?;
        Ok(PartOutput { decoded, predictions })
    }
}

/// Prediction for one scene at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub query: usize,
    pub score: f64,
    /// Center-size normalized box of the selected query.
    pub bbox: [f64; 4],
    /// Row-major foreground probabilities, `H * W`.
    pub probabilities: Vec<f64>,
    /// Binarized at 0.5.
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

/// Inference-only view of a model: it can only run extraction, the matching
/// part and the heads, so PAM and contrastive bundles are unreachable.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    model: Pcan,
}

impl InferenceModel {
    pub fn new(model: Pcan) -> Self {
        Self { model }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.model.store
    }

    pub fn predict(&self, image: &Array3, tokens: &[u32]) -> Result<Inference> {
        let mut g = Graph::new();
        let enc = self.model.encode_scene(&mut g, image, tokens)?;
        let out = self.model.matching_part(&mut g, &enc)?;
        let v = out.predictions.values(&g);
        let query = argmax(&v.class_logits);
        let probabilities: Vec<f64> = v.masks[query].iter().map(|&x| crate::autograd::sigmoid(x)).collect();
        let mask = probabilities.iter().map(|&p| u8::from(p > 0.5)).collect();
        Ok(Inference {
            query,
            score: crate::autograd::sigmoid(v.class_logits[query]),
            bbox: v.boxes[query],
            probabilities,
            mask,
            height: image.height,
            width: image.width,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
