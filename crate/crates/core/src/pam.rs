//! Position-aware sampling: language-related negatives from the prior
//! detector, topped up with constrained random boxes around the target, and
//! replicated into perturbed contrastive groups.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PcanError, Result};
use crate::geometry::{self, Box};
use crate::rng::SeededRandomSource;
use crate::synthdata::{PriorLabel, PriorSample};

pub const SAMPLER_BUDGET: usize = 1000;
const REPERTURB_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PamConfig {
    /// Detector confidence threshold.
    pub alpha: f64,
    /// Negatives per group.
    pub k_neg: usize,
    pub k1: f64,
    pub k2: f64,
    pub r1: f64,
    pub r2: f64,
    /// Detections overlapping the target above this IoU are dropped.
    pub iou_reject: f64,
    pub groups: usize,
    pub perturb_scale: f64,
}

impl Default for PamConfig {
    fn default() -> Self {
        Self { alpha: 0.35, k_neg: 5, k1: 0.1, k2: 0.3, r1: 0.5, r2: 1.5, iou_reject: 0.5, groups: 3, perturb_scale: 0.1 }
    }
}

impl PamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.k1
            && self.k1 < self.k2
            && self.k2 < self.iou_reject
            && self.iou_reject <= 1.0
            && 0.0 < self.r1
            && self.r1 < self.r2
            && (0.0..=1.0).contains(&self.alpha)
            && self.groups >= 1
            && (0.0..0.5).contains(&self.perturb_scale);
        if ok {
            Ok(())
        } else {
            Err(PcanError::Config(format!("invalid PAM configuration {self:?}")))
        }
    }

    pub fn group_size(&self) -> usize {
        1 + self.k_neg
    }
}

/// Where negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    /// GT positive, negatives drawn anywhere in the image.
    GtUnconstrainedRandom,
    /// GT positive, negatives from the band-constrained sampler only.
    GtConditionalRandom,
    /// GT positive, detector negatives; shortfall filled unconstrained.
    GtOracleDetector,
    /// GT positive, detector negatives; shortfall filled by the constrained sampler.
    GtOracleConditional,
}

impl PriorSource {
    pub const ALL: [PriorSource; 4] = [
        PriorSource::GtUnconstrainedRandom,
        PriorSource::GtConditionalRandom,
        PriorSource::GtOracleDetector,
        PriorSource::GtOracleConditional,
    ];

    fn uses_detector(self) -> bool {
        matches!(self, PriorSource::GtOracleDetector | PriorSource::GtOracleConditional)
    }

    fn conditional(self) -> bool {
        matches!(self, PriorSource::GtConditionalRandom | PriorSource::GtOracleConditional)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveGroupSet {
    pub source: PriorSource,
    pub groups: Vec<Vec<PriorSample>>,
    pub positive_index: Vec<usize>,
}

impl ContrastiveGroupSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

thread_local! {
    static BUILD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`build_groups_from`] calls made on the current thread.
pub fn build_group_calls() -> usize {
    BUILD_CALLS.with(Cell::get)
}

/// Keep confident detections that do not overlap the target too much,
/// highest confidence first (ties keep input order), at most `k_neg`.
pub fn select_negatives(detections: &[PriorSample], gt: &Box, cfg: &PamConfig) -> Vec<PriorSample> {
    let mut kept: Vec<PriorSample> = detections
        .iter()
        .filter(|d| d.confidence > cfg.alpha)
        .filter(|d| geometry::iou(&d.bbox, gt).is_ok_and(|v| v <= cfg.iou_reject))
        .map(|d| PriorSample { label: PriorLabel::NegativeDetected, ..*d })
        .collect();
    // stable sort keeps input order among equal confidences
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    kept.truncate(cfg.k_neg);
    kept
}

/// Height/width of `b` in pixels.
pub fn pixel_aspect(b: &Box, image_hw: (usize, usize)) -> f64 {
    (b.height() * image_hw.0 as f64) / (b.width() * image_hw.1 as f64)
}

/// The constrained-negative predicate: IoU band and aspect band around the
/// image aspect ratio. Returns the first violated constraint.
pub fn band_violation(b: &Box, gt: &Box, image_hw: (usize, usize), cfg: &PamConfig) -> Option<&'static str> {
    let iou = geometry::iou(b, gt).unwrap_or(f64::NAN);
    if !(cfg.k1 < iou && iou < cfg.k2) {
        return Some("k1 < IoU(negative, gt) < k2");
    }
    let aspect = pixel_aspect(b, image_hw);
    let image_aspect = image_hw.0 as f64 / image_hw.1 as f64;
    if !(cfg.r1 * image_aspect < aspect && aspect < cfg.r2 * image_aspect) {
        return Some("r1*H/W < H_neg/W_neg < r2*H/W");
    }
    None
}

/// Rejection-sample a box around `gt` satisfying the IoU and aspect bands.
pub fn random_negative(gt: &Box, image_hw: (usize, usize), cfg: &PamConfig, rng: &mut SeededRandomSource) -> Result<Box> {
    if cfg.k1 >= cfg.k2 {
        return Err(PcanError::SamplerExhausted { attempts: 0, constraint: "k1 < IoU(negative, gt) < k2 (empty band)".into() });
    }
    if cfg.r1 >= cfg.r2 {
        return Err(PcanError::SamplerExhausted { attempts: 0, constraint: "r1*H/W < H_neg/W_neg < r2*H/W (empty band)".into() });
    }
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    let g = gt.corners();
    let (gw, gh) = (g[2] - g[0], g[3] - g[1]);
    let (gcx, gcy) = ((g[0] + g[2]) / 2.0, (g[1] + g[3]) / 2.0);
    let gt_area_px = gw * w * gh * h;
    let mut misses = [0usize; 3];
    for _ in 0..SAMPLER_BUDGET {
        // pixel aspect inside the band, area within 4x of the target
        let aspect = rng.random_range(cfg.r1..cfg.r2) * h / w;
        let area = gt_area_px * rng.random_range(0.25f64.ln()..4.0f64.ln()).exp();
        let bw = (area / aspect).sqrt() / w;
        let bh = (area * aspect).sqrt() / h;
        let cx = gcx + rng.random_range(-1.5..1.5) * gw;
        let cy = gcy + rng.random_range(-1.5..1.5) * gh;
        let c = [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0];
        if c[0] < 0.0 || c[1] < 0.0 || c[2] > 1.0 || c[3] > 1.0 {
            misses[0] += 1;
            continue;
        }
        let Ok(b) = Box::corner(c[0], c[1], c[2], c[3]) else {
            misses[0] += 1;
            continue;
        };
        match band_violation(&b, gt, image_hw, cfg) {
            None => return Ok(b),
            Some(v) if v.starts_with("k1") => misses[1] += 1,
            Some(_) => misses[2] += 1,
        }
    }
    let constraint = match misses.iter().enumerate().max_by_key(|(_, m)| **m).map(|(i, _)| i) {
        Some(0) => "candidate inside image bounds",
        Some(1) => "k1 < IoU(negative, gt) < k2",
        _ => "r1*H/W < H_neg/W_neg < r2*H/W",
    };
    Err(PcanError::SamplerExhausted { attempts: SAMPLER_BUDGET, constraint: constraint.into() })
}

/// Uniform box anywhere in the image that does not overlap the target above
/// `iou_reject`.
pub fn unconstrained_negative(gt: &Box, cfg: &PamConfig, rng: &mut SeededRandomSource) -> Result<Box> {
    for _ in 0..SAMPLER_BUDGET {
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (c, d) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (x1, x2) = (f64::min(a, b), f64::max(a, b));
        let (y1, y2) = (f64::min(c, d), f64::max(c, d));
        if x2 - x1 < 0.02 || y2 - y1 < 0.02 {
            continue;
        }
        let bx = Box::corner(x1, y1, x2, y2)?;
        if geometry::iou(&bx, gt)? <= cfg.iou_reject {
            return Ok(bx);
        }
    }
    Err(PcanError::SamplerExhausted { attempts: SAMPLER_BUDGET, constraint: "IoU(negative, gt) <= iou_reject".into() })
}

fn sample_ok(s: &PriorSample, gt: &Box, image_hw: (usize, usize), cfg: &PamConfig, source: PriorSource) -> bool {
    let iou = geometry::iou(&s.bbox, gt).unwrap_or(f64::NAN);
    match s.label {
        PriorLabel::Positive => iou > cfg.iou_reject,
        PriorLabel::NegativeDetected => iou <= cfg.iou_reject,
        PriorLabel::NegativeSynthetic if source.conditional() => band_violation(&s.bbox, gt, image_hw, cfg).is_none(),
        PriorLabel::NegativeSynthetic => iou <= cfg.iou_reject,
    }
}

/// Perturb `s`, re-drawing while the result breaks its label's constraint;
/// falls back to the unperturbed sample.
fn perturb_checked(
    s: &PriorSample,
    gt: &Box,
    image_hw: (usize, usize),
    cfg: &PamConfig,
    source: PriorSource,
    rng: &mut SeededRandomSource,
) -> Result<PriorSample> {
    for _ in 0..REPERTURB_LIMIT {
        let p = PriorSample { bbox: geometry::perturb(&s.bbox, cfg.perturb_scale, rng)?, ..*s };
        if sample_ok(&p, gt, image_hw, cfg, source) {
            return Ok(p);
        }
    }
    Ok(*s)
}

/// Default PAM: detector negatives topped up by the constrained sampler.
pub fn build_groups(
    gt: &Box,
    detections: &[PriorSample],
    image_hw: (usize, usize),
    cfg: &PamConfig,
    rng: &mut SeededRandomSource,
) -> Result<ContrastiveGroupSet> {
    build_groups_from(PriorSource::GtOracleConditional, gt, detections, image_hw, cfg, rng)
}

pub fn build_groups_from(
    source: PriorSource,
    gt: &Box,
    detections: &[PriorSample],
    image_hw: (usize, usize),
    cfg: &PamConfig,
    rng: &mut SeededRandomSource,
) -> Result<ContrastiveGroupSet> {
    BUILD_CALLS.with(|c| c.set(c.get() + 1));
    cfg.validate()?;
    let mut base = vec![PriorSample { bbox: *gt, confidence: 1.0, label: PriorLabel::Positive }];
    if source.uses_detector() {
        base.extend(select_negatives(detections, gt, cfg));
    }
    while base.len() < cfg.group_size() {
        let bbox = if source.conditional() {
            random_negative(gt, image_hw, cfg, rng)?
        } else {
            unconstrained_negative(gt, cfg, rng)?
        };
        base.push(PriorSample { bbox, confidence: 0.0, label: PriorLabel::NegativeSynthetic });
    }
    let mut groups = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups {
        let mut group = Vec::with_capacity(base.len());
        for (i, s) in base.iter().enumerate() {
            if g == 0 && i == 0 {
                group.push(*s);
            } else {
                group.push(perturb_checked(s, gt, image_hw, cfg, source, rng)?);
            }
        }
        groups.push(group);
    }
    Ok(ContrastiveGroupSet { source, positive_index: vec![0; groups.len()], groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn det(b: [f64; 4], conf: f64) -> PriorSample {
        PriorSample { bbox: Box::corner(b[0], b[1], b[2], b[3]).unwrap(), confidence: conf, label: PriorLabel::NegativeDetected }
    }

    fn gt() -> Box {
        Box::corner(0.4, 0.4, 0.6, 0.6).unwrap()
    }

    #[test]
    fn select_empty() {
        assert!(select_negatives(&[], &gt(), &PamConfig::default()).is_empty());
    }

    #[test]
    fn select_filters_confidence_and_overlap() {
        // IoU with gt: first ~0.8 (rejected), second ~0.2, third ~0.1 but low confidence
        let g = gt();
        let high = det([0.41, 0.4, 0.61, 0.6], 0.9);
        let mid = det([0.5, 0.4, 0.7, 0.6], 0.5);
        let low = det([0.55, 0.4, 0.75, 0.6], 0.2);
        assert!(geometry::iou(&high.bbox, &g).unwrap() > 0.5);
        let out = select_negatives(&[high, mid, low], &g, &PamConfig::default());
        assert_eq!(out, vec![mid]);
    }

    #[test]
    fn select_top_k_stable_ties() {
        let confs = [0.6, 0.9, 0.6, 0.7, 0.95, 0.6, 0.8, 0.6];
        let dets: Vec<PriorSample> =
            confs.iter().enumerate().map(|(i, &c)| det([0.02 * i as f64, 0.0, 0.02 * i as f64 + 0.1, 0.1], c)).collect();
        let out = select_negatives(&dets, &gt(), &PamConfig::default());
        // reference: indices ordered by (-conf, index)
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&a, &b| confs[b].partial_cmp(&confs[a]).unwrap().then(a.cmp(&b)));
        let expect: Vec<PriorSample> = idx[..5].iter().map(|&i| dets[i]).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn random_negative_satisfies_bands() {
        let cfg = PamConfig::default();
        let mut rng = stream(1, 0);
        for _ in 0..2000 {
            let b = random_negative(&gt(), (64, 64), &cfg, &mut rng).unwrap();
            let iou = geometry::iou(&b, &gt()).unwrap();
            let aspect = b.height() / b.width();
            assert!(0.1 < iou && iou < 0.3, "{iou}");
            assert!(0.5 < aspect && aspect < 1.5, "{aspect}");
        }
    }

    #[test]
    fn empty_band_errors() {
        let cfg = PamConfig { k2: 0.1, ..Default::default() };
        let err = random_negative(&gt(), (64, 64), &cfg, &mut stream(0, 0)).unwrap_err();
        assert!(err.to_string().contains("k1 < IoU"), "{err}");
    }

    #[test]
    fn groups_counting_and_zero_noise() {
        let cfg = PamConfig::default();
        let set = build_groups(&gt(), &[], (64, 64), &cfg, &mut stream(2, 0)).unwrap();
        assert_eq!(set.groups.len(), 3);
        for g in &set.groups {
            assert_eq!(g.len(), 6);
            assert_eq!(g.iter().filter(|s| s.label == PriorLabel::NegativeSynthetic).count(), 5);
            assert_eq!(g.iter().filter(|s| s.label == PriorLabel::Positive).count(), 1);
        }
        let still = PamConfig { perturb_scale: 0.0, ..cfg };
        let set = build_groups(&gt(), &[], (64, 64), &still, &mut stream(2, 0)).unwrap();
        assert!(set.groups.iter().all(|g| *g == set.groups[0]));
    }

    #[test]
    fn positive_dominates_negatives() {
        let cfg = PamConfig::default();
        let dets = [det([0.5, 0.4, 0.7, 0.6], 0.9), det([0.1, 0.1, 0.3, 0.3], 0.8)];
        for seed in 0..50 {
            let set = build_groups(&gt(), &dets, (64, 64), &cfg, &mut stream(seed, 0)).unwrap();
            for (g, p) in set.groups.iter().zip(&set.positive_index) {
                let pos = geometry::iou(&g[*p].bbox, &gt()).unwrap();
                for (i, s) in g.iter().enumerate() {
                    if i != *p {
                        assert!(pos > geometry::iou(&s.bbox, &gt()).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let dets = [det([0.5, 0.4, 0.7, 0.6], 0.9)];
        let a = build_groups(&gt(), &dets, (64, 64), &PamConfig::default(), &mut stream(9, 3)).unwrap();
        let b = build_groups(&gt(), &dets, (64, 64), &PamConfig::default(), &mut stream(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unconstrained_source_respects_reject_cutoff() {
        let cfg = PamConfig::default();
        let set =
            build_groups_from(PriorSource::GtUnconstrainedRandom, &gt(), &[], (64, 64), &cfg, &mut stream(4, 0)).unwrap();
        for g in &set.groups {
            for s in &g[1..] {
                assert!(geometry::iou(&s.bbox, &gt()).unwrap() <= cfg.iou_reject);
            }
        }
    }
}
