//! Synthetic referring-segmentation scenes and an oracle prior detector.
//!
//! Every scene holds 2-6 coloured shapes on a dark background, a templated
//! expression that picks out exactly one of them, and the boxes an
//! expression-aware detector would report.

pub mod grammar;
pub mod io;

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, PcanError, Result};
use crate::geometry::{self, Box};
use crate::rng::{stream, sub_seed, SeededRandomSource};

pub use grammar::{Color, Descriptor, Expression, Relation, Shape, Size, VOCAB};
pub use io::Array3;

use grammar::{Attributes, COLORS, RELATIONS, SHAPES, SIZES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoiseConfig {
    /// Corner jitter as a fraction of the box side (uniform).
    pub box_jitter: f64,
    pub conf_mean: f64,
    pub conf_std: f64,
}

impl Default for DetectorNoiseConfig {
    fn default() -> Self {
        Self { box_jitter: 0.1, conf_mean: 0.8, conf_std: 0.2 }
    }
}

impl DetectorNoiseConfig {
    pub fn noiseless() -> Self {
        Self { box_jitter: 0.0, conf_std: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Palette prefix length (1..=8).
    pub n_colors: usize,
    /// Shape prefix length (1..=3).
    pub n_shapes: usize,
    /// 1 = small only, 2 = small and large.
    pub n_sizes: usize,
    pub relations: bool,
    pub val_fraction: f64,
    pub max_attempts: usize,
    pub detector: DetectorNoiseConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 6,
            n_colors: 8,
            n_shapes: 3,
            n_sizes: 2,
            relations: true,
            val_fraction: 0.2,
            max_attempts: 1000,
            detector: DetectorNoiseConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PcanError::Config(m.to_string()));
        if self.height < 16 || self.width < 16 {
            return bad("scene must be at least 16x16");
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects || self.max_objects > 6 {
            return bad("object count range must satisfy 2 <= min <= max <= 6");
        }
        if !(1..=8).contains(&self.n_colors) || !(1..=3).contains(&self.n_shapes) || !(1..=2).contains(&self.n_sizes) {
            return bad("n_colors in 1..=8, n_shapes in 1..=3, n_sizes in 1..=2");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.detector.box_jitter) || self.detector.conf_std < 0.0 {
            return bad("detector jitter must lie in [0, 0.5) and conf_std >= 0");
        }
        Ok(())
    }

    fn side_range(&self, size: Size) -> (u32, u32) {
        let m = self.height.min(self.width) as f64;
        let (lo, hi) = match size {
            Size::Small => (0.14, 0.20),
            Size::Large => (0.27, 0.36),
        };
        let lo = (lo * m).round().max(2.0) as u32;
        (lo, ((hi * m).round() as u32).max(lo))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Normalized corner box.
    pub bbox: Box,
    /// Pixel corners `[x1, y1, x2, y2)`.
    pub pixel_box: [u32; 4],
    #[serde(skip)]
    pub mask: Vec<u8>,
}

impl Attributes for SceneObject {
    fn shape(&self) -> Shape {
        self.shape
    }
    fn color(&self) -> Color {
        self.color
    }
    fn size(&self) -> Size {
        self.size
    }
    fn pixel_box(&self) -> [u32; 4] {
        self.pixel_box
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorLabel {
    Positive,
    NegativeDetected,
    NegativeSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSample {
    pub bbox: Box,
    pub confidence: f64,
    pub label: PriorLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub expression: Vec<u32>,
    pub text: String,
    pub objects: Vec<SceneObject>,
    pub target_index: usize,
    pub detections: Vec<PriorSample>,
    #[serde(skip)]
    pub image: Option<Array3>,
}

impl SceneRecord {
    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_index]
    }

    pub fn image(&self) -> &Array3 {
        self.image.as_ref().expect("scene image loaded")
    }

    pub fn target_mask(&self) -> &[u8] {
        &self.target().mask
    }
}

fn pick_attrs(cfg: &SceneConfig, rng: &mut SeededRandomSource) -> (Shape, Color, Size) {
    (
        SHAPES[rng.random_range(0..cfg.n_shapes)],
        COLORS[rng.random_range(0..cfg.n_colors)],
        SIZES[rng.random_range(0..cfg.n_sizes)],
    )
}

fn rasterize(shape: Shape, pb: [u32; 4], height: usize, width: usize) -> Vec<u8> {
    let mut mask = vec![0u8; height * width];
    let (x1, y1, x2, y2) = (pb[0] as f64, pb[1] as f64, pb[2] as f64, pb[3] as f64);
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let (hw, hh) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
    for y in pb[1]..pb[3] {
        for x in pb[0]..pb[2] {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match shape {
                Shape::Square => true,
                Shape::Circle => ((px - cx) / hw).powi(2) + ((py - cy) / hh).powi(2) <= 1.0,
                Shape::Triangle => (px - cx).abs() <= (py - y1) / (y2 - y1) * hw,
            };
            if inside {
                mask[y as usize * width + x as usize] = 1;
            }
        }
    }
    mask
}

fn place_objects(cfg: &SceneConfig, rng: &mut SeededRandomSource) -> Option<Vec<SceneObject>> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let (shape, color, size) = pick_attrs(cfg, rng);
        let (lo, hi) = cfg.side_range(size);
        let mut placed = false;
        for _ in 0..200 {
            let side = rng.random_range(lo..=hi);
            if side as usize >= cfg.width || side as usize >= cfg.height {
                break;
            }
            let x1 = rng.random_range(0..=(cfg.width as u32 - side));
            let y1 = rng.random_range(0..=(cfg.height as u32 - side));
            let pb = [x1, y1, x1 + side, y1 + side];
            // one free pixel between neighbours
            let clear = objects.iter().all(|o| {
                let q = o.pixel_box;
                pb[2] < q[0] || q[2] < pb[0] || pb[3] < q[1] || q[3] < pb[1]
            });
            if !clear {
                continue;
            }
            let bbox = Box::corner_abs(pb[0] as f64, pb[1] as f64, pb[2] as f64, pb[3] as f64)
                .and_then(|b| b.normalize(cfg.height, cfg.width))
                .ok()?;
            let mask = rasterize(shape, pb, cfg.height, cfg.width);
            objects.push(SceneObject { shape, color, size, bbox, pixel_box: pb, mask });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

fn has_similar_distractor(objects: &[SceneObject], target: usize) -> bool {
    let t = &objects[target];
    objects
        .iter()
        .enumerate()
        .any(|(i, o)| i != target && (o.shape == t.shape || o.color == t.color))
}

/// Every expression that singles out `target`, split into plain and relational.
fn candidate_expressions(objects: &[SceneObject], target: usize, relations: bool) -> (Vec<Expression>, Vec<Expression>) {
    let mut plain = Vec::new();
    let mut relational = Vec::new();
    for subject in Descriptor::all_for(&objects[target]) {
        let e = Expression { article: false, subject, relation: None };
        if e.satisfying(objects) == [target] {
            plain.push(e);
        }
    }
    if relations {
        for (l, landmark) in objects.iter().enumerate() {
            if l == target {
                continue;
            }
            for ldesc in Descriptor::all_for(landmark) {
                if objects.iter().filter(|o| ldesc.matches(*o)).count() != 1 {
                    continue;
                }
                for rel in RELATIONS {
                    if !rel.holds(objects[target].pixel_box, landmark.pixel_box) {
                        continue;
                    }
                    for subject in Descriptor::all_for(&objects[target]) {
                        let e = Expression { article: false, subject, relation: Some((rel, ldesc)) };
                        if e.satisfying(objects) == [target] {
                            relational.push(e);
                        }
                    }
                }
            }
        }
    }
    (plain, relational)
}

fn render(cfg: &SceneConfig, objects: &[SceneObject], rng: &mut SeededRandomSource) -> Array3 {
    let (h, w) = (cfg.height, cfg.width);
    let mut data: Vec<f32> = (0..h * w * 3).map(|_| 0.08 + rng.random_range(-0.02f32..0.02)).collect();
    for o in objects {
        let rgb = o.color.rgb();
        for (p, &m) in o.mask.iter().enumerate() {
            if m != 0 {
                data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    Array3::new(h, w, 3, data)
}

/// Build one scene from its own random stream.
pub fn generate_scene(id: usize, split: Split, cfg: &SceneConfig, rng: &mut SeededRandomSource) -> Result<SceneRecord> {
    for _ in 0..cfg.max_attempts {
        let Some(objects) = place_objects(cfg, rng) else { continue };
        let eligible: Vec<usize> = (0..objects.len()).filter(|&i| has_similar_distractor(&objects, i)).collect();
        let Some(&target) = eligible.choose(rng) else { continue };
        let (plain, relational) = candidate_expressions(&objects, target, cfg.relations);
        let pool = match (plain.is_empty(), relational.is_empty()) {
            (true, true) => continue,
            (false, true) => &plain,
            (true, false) => &relational,
            (false, false) => {
                if rng.random_bool(0.4) {
                    &relational
                } else {
                    &plain
                }
            }
        };
        let mut expr = *pool.choose(rng).expect("non-empty pool");
        expr.article = rng.random_bool(0.5);
        let image = render(cfg, &objects, rng);
        let expression = expr.tokens();
        return Ok(SceneRecord {
            id,
            split,
            height: cfg.height,
            width: cfg.width,
            text: grammar::detokenize(&expression),
            expression,
            objects,
            target_index: target,
            detections: Vec::new(),
            image: Some(image),
        });
    }
    Err(PcanError::Generation(format!(
        "scene {id}: no uniquely describable layout after {} attempts",
        cfg.max_attempts
    )))
}

thread_local! {
    static DETECT_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`oracle_detect`] calls made on the current thread.
pub fn oracle_detect_calls() -> usize {
    DETECT_CALLS.with(Cell::get)
}

fn truncated_normal(mean: f64, std: f64, rng: &mut SeededRandomSource) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let normal = Normal::new(mean, std).expect("finite std");
    for _ in 0..1000 {
        let v = normal.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    mean.clamp(0.0, 1.0)
}

/// Stand-in for a grounded detector: one jittered box for every object that
/// shares an attribute word with the expression.
pub fn oracle_detect(scene: &SceneRecord, noise: &DetectorNoiseConfig, rng: &mut SeededRandomSource) -> Vec<PriorSample> {
    DETECT_CALLS.with(|c| c.set(c.get() + 1));
    let words: BTreeSet<&str> = scene.expression.iter().filter_map(|&t| VOCAB.get(t as usize).copied()).collect();
    let mut out = Vec::new();
    for o in &scene.objects {
        let relevant = words.contains(o.shape.word()) || words.contains(o.color.word()) || words.contains(o.size.word());
        if !relevant || out.len() >= 10 {
            continue;
        }
        let bbox = geometry::perturb(&o.bbox, noise.box_jitter, rng).unwrap_or(o.bbox);
        let confidence = truncated_normal(noise.conf_mean, noise.conf_std, rng);
        out.push(PriorSample { bbox, confidence, label: PriorLabel::NegativeDetected });
    }
    out
}

/// Deterministic dataset: scene `i` draws from stream `i` of the scene seed,
/// its detections from stream `i` of the detector seed.
pub fn generate_dataset(n_scenes: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<SceneRecord>> {
    if n_scenes == 0 {
        return Err(PcanError::Config("n_scenes must be at least 1".into()));
    }
    cfg.validate()?;
    let n_val = (n_scenes as f64 * cfg.val_fraction).round() as usize;
    let n_train = n_scenes - n_val;
    let (scene_seed, detect_seed) = (sub_seed(seed, "scene"), sub_seed(seed, "detect"));
    (0..n_scenes)
        .map(|i| {
            let split = if i < n_train { Split::Train } else { Split::Val };
            let mut scene = generate_scene(i, split, cfg, &mut stream(scene_seed, i as u64))?;
            scene.detections = oracle_detect(&scene, &cfg.detector, &mut stream(detect_seed, i as u64));
            Ok(scene)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub config: SceneConfig,
}

fn split_paths(root: &Path, split: Split) -> (PathBuf, PathBuf, PathBuf) {
    let dir = root.join(split.dir_name());
    (dir.join("scenes.jsonl"), dir.join("images"), dir.join("masks"))
}

fn mask_array(scene: &SceneRecord) -> Array3 {
    let n = scene.objects.len();
    let mut data = vec![0f32; scene.height * scene.width * n];
    for (c, o) in scene.objects.iter().enumerate() {
        for (p, &m) in o.mask.iter().enumerate() {
            data[p * n + c] = m as f32;
        }
    }
    Array3::new(scene.height, scene.width, n, data)
}

/// Write `root/{train,val}/scenes.jsonl` plus per-scene image and mask arrays.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, scenes: &[SceneRecord]) -> Result<()> {
    for split in [Split::Train, Split::Val] {
        let (jsonl, images, masks) = split_paths(root, split);
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        fs::create_dir_all(&masks).map_err(io_err(&masks))?;
        let file = fs::File::create(&jsonl).map_err(io_err(&jsonl))?;
        let mut w = BufWriter::new(file);
        for s in scenes.iter().filter(|s| s.split == split) {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(io_err(&jsonl))?;
            s.image().write(&images.join(format!("{:06}.bin", s.id)))?;
            mask_array(s).write(&masks.join(format!("{:06}.bin", s.id)))?;
        }
        w.flush().map_err(io_err(&jsonl))?;
    }
    let mpath = root.join("dataset.json");
    fs::write(&mpath, serde_json::to_vec_pretty(manifest)?).map_err(io_err(&mpath))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let mpath = root.join("dataset.json");
    let bytes = fs::read(&mpath).map_err(io_err(&mpath))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<SceneRecord>> {
    let (jsonl, images, masks) = split_paths(root, split);
    let file = fs::File::open(&jsonl).map_err(io_err(&jsonl))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(&jsonl))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: SceneRecord = serde_json::from_str(&line)?;
        let image = Array3::read(&images.join(format!("{:06}.bin", s.id)))?;
        let mpath = masks.join(format!("{:06}.bin", s.id));
        let m = Array3::read(&mpath)?;
        if m.channels != s.objects.len() || m.height != s.height || m.width != s.width {
            return Err(PcanError::ArrayFormat { path: mpath, reason: "mask dimensions disagree with record".into() });
        }
        let n = m.channels;
        for (c, o) in s.objects.iter_mut().enumerate() {
            o.mask = (0..s.height * s.width).map(|p| (m.data[p * n + c] > 0.5) as u8).collect();
        }
        s.image = Some(image);
        out.push(s);
    }
    Ok(out)
}
