//! Matching cost and best-match selection, box / mask / class losses, the
//! contrastive alignment loss and the composite training objective.
//!
//! Every term has a plain `f64` form (used for matching and as a reference)
//! and a graph form (used for training).

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sigmoid, sigmoid, Graph, Tensor, Var};
use crate::error::{PcanError, Result};
use crate::geometry::{cxcywh_to_xyxy, giou_xyxy};
use crate::maskhead::{PredictionSet, PredictionValues};
use crate::pam::ContrastiveGroupSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    pub dice: f64,
    pub focal: f64,
    pub cls: f64,
    /// Weight of the matching loss in the total.
    pub alpha: f64,
    /// Weight of the contrastive alignment loss in the total.
    pub beta: f64,
    pub tau: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { giou: 2.0, l1: 5.0, dice: 5.0, focal: 2.0, cls: 2.0, alpha: 1.0, beta: 1.0, tau: 0.2, focal_gamma: 2.0, focal_alpha: 0.25, dice_eps: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.giou, self.l1, self.dice, self.focal, self.cls, self.alpha, self.beta, self.focal_gamma, self.dice_eps];
        if all.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(PcanError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(PcanError::Config(format!("tau {} must be positive and focal_alpha {} in [0,1]", self.tau, self.focal_alpha)));
        }
        Ok(())
    }
}

/// Ground truth for one expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    /// Center-size normalized.
    pub bbox: [f64; 4],
    /// Row-major `H * W` binary mask.
    pub mask: Vec<f64>,
}

impl Target {
    pub fn new(bbox: [f64; 4], mask: &[u8]) -> Self {
        Self { bbox, mask: mask.iter().map(|&m| f64::from(m.min(1))).collect() }
    }
}

/// Weighted cost terms; `total()` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub mask_focal: f64,
    pub cls: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.l1 + self.giou + self.dice + self.mask_focal + self.cls
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub costs: Vec<f64>,
    pub breakdown: CostBreakdown,
}

pub fn l1_box(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    pred.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum()
}

pub fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    1.0 - giou_xyxy(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
}

pub fn dice_loss(logits: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    same_len(logits.len(), gt.len())?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&x, &y) in logits.iter().zip(gt) {
        let p = sigmoid(x);
        inter += p * y;
        sp += p;
        sg += y;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sp + sg + eps))
}

fn focal_elem(x: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let (lp, ln) = (log_sigmoid(x), log_sigmoid(-x));
    -(alpha * y * (gamma * ln).exp() * lp + (1.0 - alpha) * (1.0 - y) * (gamma * lp).exp() * ln)
}

/// Mean sigmoid focal loss over pixels.
pub fn mask_focal(logits: &[f64], gt: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    same_len(logits.len(), gt.len())?;
    if logits.is_empty() {
        return Err(PcanError::ShapeMismatch("empty mask".into()));
    }
    Ok(logits.iter().zip(gt).map(|(&x, &y)| focal_elem(x, y, gamma, alpha)).sum::<f64>() / logits.len() as f64)
}

pub fn cls_focal(logit: f64, label: bool, gamma: f64, alpha: f64) -> f64 {
    focal_elem(logit, f64::from(u8::from(label)), gamma, alpha)
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(PcanError::ShapeMismatch(format!("prediction has {a} entries, ground truth {b}")))
    }
}

pub fn matching_cost(bbox: [f64; 4], mask_logits: &[f64], class_logit: f64, gt: &Target, w: &LossWeights) -> Result<CostBreakdown> {
    Ok(CostBreakdown {
        l1: w.l1 * l1_box(bbox, gt.bbox),
        giou: w.giou * giou_loss(bbox, gt.bbox),
        dice: w.dice * dice_loss(mask_logits, &gt.mask, w.dice_eps)?,
        mask_focal: w.focal * mask_focal(mask_logits, &gt.mask, w.focal_gamma, w.focal_alpha)?,
        cls: w.cls * cls_focal(class_logit, true, w.focal_gamma, w.focal_alpha),
    })
}

/// Lowest index among the minima.
pub fn argmin(costs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    best
}

pub fn best_match(preds: &PredictionValues, gt: &Target, w: &LossWeights) -> Result<MatchResult> {
    if preds.boxes.is_empty() {
        return Err(PcanError::ShapeMismatch("no predictions to match".into()));
    }
    let breakdowns = (0..preds.boxes.len())
        .map(|n| matching_cost(preds.boxes[n], &preds.masks[n], preds.class_logits[n], gt, w))
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = breakdowns.iter().map(CostBreakdown::total).collect();
    let index = argmin(&costs);
    Ok(MatchResult { index, breakdown: breakdowns[index], costs })
}

/// One contrastive group: embeddings (`N_g` rows) and the positive's index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGroup {
    pub embeddings: Vec<Vec<f64>>,
    pub positive: usize,
}

/// Mean over groups of `-log softmax(y_p . q / tau)[positive]`.
pub fn contrastive_alignment(yp: &[f64], groups: &[EmbeddingGroup], tau: f64) -> Result<f64> {
    if groups.is_empty() {
        return Err(PcanError::ShapeMismatch("no contrastive groups".into()));
    }
    let mut total = 0.0;
    for grp in groups {
        if grp.embeddings.is_empty() || grp.positive >= grp.embeddings.len() {
            return Err(PcanError::ShapeMismatch(format!("group of {} with positive {}", grp.embeddings.len(), grp.positive)));
        }
        let mut sims = Vec::with_capacity(grp.embeddings.len());
        for q in &grp.embeddings {
            same_len(q.len(), yp.len())?;
            sims.push(q.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / tau);
        }
        let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        total += lse - sims[grp.positive];
    }
    Ok(total / groups.len() as f64)
}

/// Graph form of [`contrastive_alignment`]; `yp` is `1 x D`, each group `N_g x D`.
pub fn contrastive_alignment_var(g: &mut Graph, yp: Var, groups: &[(Var, usize)], tau: f64) -> Result<Var> {
    if groups.is_empty() {
        return Err(PcanError::ShapeMismatch("no contrastive groups".into()));
    }
    let ypt = g.transpose(yp);
    let mut terms = Vec::with_capacity(groups.len());
    for &(q, pos) in groups {
        let (n, d) = g.shape(q);
        if n == 0 || pos >= n || d != g.shape(yp).1 {
            return Err(PcanError::ShapeMismatch(format!("group {n}x{d} with positive {pos}")));
        }
        let s = g.matmul(q, ypt);
        let s = g.scale(s, 1.0 / tau);
        let st = g.transpose(s);
        let lse = g.logsumexp_rows(st);
        let p = g.select_rows(s, &[pos]);
        terms.push(g.sub(lse, p));
    }
    let all = g.concat_rows(&terms);
    Ok(g.mean(all))
}

/// `sum |pred - gt|` over the 4 center-size coordinates; `pred` is `1 x 4`.
pub fn l1_var(g: &mut Graph, pred: Var, gt: [f64; 4]) -> Var {
    let t = g.constant(Tensor::from_vec(1, 4, gt.to_vec()));
    let d = g.sub(pred, t);
    let a = g.abs(d);
    g.sum(a)
}

/// `1 - GIoU` between a `1 x 4` center-size prediction and the GT.
pub fn giou_var(g: &mut Graph, pred: Var, gt: [f64; 4]) -> Var {
    let col = |g: &mut Graph, j: usize| g.select_cols(pred, j..j + 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw);
    let x2 = g.add(cx, hw);
    let y1 = g.sub(cy, hh);
    let y2 = g.add(cy, hh);
    let [gx1, gy1, gx2, gy2] = cxcywh_to_xyxy(gt);
    let mut k = |v: f64| g.constant(Tensor::scalar(v));
    let (gx1, gy1, gx2, gy2) = (k(gx1), k(gy1), k(gx2), k(gy2));
    let ga = (gt[2] * gt[3]).max(0.0);

    let ix1 = g.max(x1, gx1);
    let ix2 = g.min(x2, gx2);
    let iy1 = g.max(y1, gy1);
    let iy2 = g.min(y2, gy2);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let area = g.mul(w, h);
    let sum = g.add_scalar(area, ga);
    let union = g.sub(sum, inter);

    let cx1 = g.min(x1, gx1);
    let cx2 = g.max(x2, gx2);
    let cy1 = g.min(y1, gy1);
    let cy2 = g.max(y2, gy2);
    let cw = g.sub(cx2, cx1);
    let ch = g.sub(cy2, cy1);
    let enclose = g.mul(cw, ch);

    let iou = g.div(inter, union);
    let gap = g.sub(enclose, union);
    let pen = g.div(gap, enclose);
    let giou = g.sub(iou, pen);
    g.rsub_scalar(1.0, giou)
}

/// Dice loss of a `P x 1` logit column against a binary mask.
pub fn dice_var(g: &mut Graph, logits: Var, gt: &[f64], eps: f64) -> Var {
    let y = g.constant(Tensor::from_vec(gt.len(), 1, gt.to_vec()));
    let p = g.sigmoid(logits);
    let py = g.mul(p, y);
    let inter = g.sum(py);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let sp = g.sum(p);
    let den = g.add_scalar(sp, gt.iter().sum::<f64>() + eps);
    let ratio = g.div(num, den);
    g.rsub_scalar(1.0, ratio)
}

/// Element-wise sigmoid focal loss, summed (not averaged).
pub fn focal_sum_var(g: &mut Graph, logits: Var, targets: &[f64], gamma: f64, alpha: f64) -> Var {
    let (r, c) = g.shape(logits);
    let pos = g.constant(Tensor::from_vec(r, c, targets.iter().map(|y| alpha * y).collect()));
    let neg = g.constant(Tensor::from_vec(r, c, targets.iter().map(|y| (1.0 - alpha) * (1.0 - y)).collect()));
    let lp = g.log_sigmoid(logits);
    let nx = g.neg(logits);
    let ln = g.log_sigmoid(nx);
    let a = g.scale(ln, gamma);
    let a = g.exp(a);
    let a = g.mul(a, lp);
    let a = g.mul(a, pos);
    let b = g.scale(lp, gamma);
    let b = g.exp(b);
    let b = g.mul(b, ln);
    let b = g.mul(b, neg);
    let s = g.add(a, b);
    let s = g.sum(s);
    g.neg(s)
}

pub fn mask_focal_var(g: &mut Graph, logits: Var, gt: &[f64], gamma: f64, alpha: f64) -> Var {
    let s = focal_sum_var(g, logits, gt, gamma, alpha);
    g.scale(s, 1.0 / gt.len().max(1) as f64)
}

/// Graph handles of the weighted matching-loss terms.
#[derive(Debug, Clone, Copy)]
pub struct MatchedTerms {
    pub l1: Var,
    pub giou: Var,
    pub dice: Var,
    pub mask_focal: Var,
    /// Focal over every considered query: label 1 at the match, 0 elsewhere.
    pub cls: Var,
    pub total: Var,
}

/// Matching loss at query `index`, with classification over the first
/// `cls_rows` queries.
pub fn matched_loss(g: &mut Graph, preds: &PredictionSet, index: usize, cls_rows: usize, gt: &Target, w: &LossWeights) -> Result<MatchedTerms> {
    let n = preds.len(g);
    if index >= cls_rows || cls_rows > n {
        return Err(PcanError::OutOfRange(format!("match {index} with {cls_rows} of {n} queries")));
    }
    let (pixels, _) = g.shape(preds.mask_logits_full);
    same_len(pixels, gt.mask.len())?;
    let b = g.select_rows(preds.boxes, &[index]);
    let l1 = l1_var(g, b, gt.bbox);
    let l1 = g.scale(l1, w.l1);
    let giou = giou_var(g, b, gt.bbox);
    let giou = g.scale(giou, w.giou);
    let m = g.select_cols(preds.mask_logits_full, index..index + 1);
    let dice = dice_var(g, m, &gt.mask, w.dice_eps);
    let dice = g.scale(dice, w.dice);
    let mf = mask_focal_var(g, m, &gt.mask, w.focal_gamma, w.focal_alpha);
    let mask_focal = g.scale(mf, w.focal);
    let rows: Vec<usize> = (0..cls_rows).collect();
    let c = g.select_rows(preds.class_logits, &rows);
    let labels: Vec<f64> = (0..cls_rows).map(|r| f64::from(u8::from(r == index))).collect();
    let cls = focal_sum_var(g, c, &labels, w.focal_gamma, w.focal_alpha);
    let cls = g.scale(cls, w.cls);
    let parts = g.concat_rows(&[l1, giou, dice, mask_focal, cls]);
    let total = g.sum(parts);
    Ok(MatchedTerms { l1, giou, dice, mask_focal, cls, total })
}

pub fn check_finite(component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(PcanError::NonFiniteLoss { component: component.to_string(), value })
    }
}

/// `alpha * L_M + beta * L_CA`.
pub fn total_loss(l_m: f64, l_ca: f64, w: &LossWeights) -> Result<f64> {
    check_finite("matching", l_m)?;
    check_finite("contrastive_alignment", l_ca)?;
    Ok(w.alpha * l_m + w.beta * l_ca)
}

/// Switches controlling which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveFlags {
    /// Contrastive alignment between the parts.
    pub contrastive_loss: bool,
    /// Matching loss on each group's positive row in the contrastive part.
    pub contrastive_supervision: bool,
    /// Let padded (non-PAM) rows of a contrastive bundle enter the softmax.
    pub include_padded: bool,
    /// Stop gradients from the alignment loss into the matched embedding.
    pub detach_matched: bool,
}

impl Default for ObjectiveFlags {
    fn default() -> Self {
        Self { contrastive_loss: true, contrastive_supervision: true, include_padded: false, detach_matched: false }
    }
}

/// Per-scene loss values, weighted, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub mask_focal: f64,
    pub cls: f64,
    pub matching: f64,
    pub contrastive_supervision: f64,
    pub alignment: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "l1,giou,dice,mask_focal,cls,matching,contrastive_supervision,alignment,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.l1, self.giou, self.dice, self.mask_focal, self.cls, self.matching, self.contrastive_supervision, self.alignment, self.total
        )
    }

    pub fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.l1 += s * o.l1;
        self.giou += s * o.giou;
        self.dice += s * o.dice;
        self.mask_focal += s * o.mask_focal;
        self.cls += s * o.cls;
        self.matching += s * o.matching;
        self.contrastive_supervision += s * o.contrastive_supervision;
        self.alignment += s * o.alignment;
        self.total += s * o.total;
    }
}

pub struct SceneObjective {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub matched: usize,
}

/// Assemble the training objective for one scene from the matching part's
/// predictions and, when CLUM is active, the contrastive part's.
pub fn scene_objective(
    g: &mut Graph,
    matching: &PredictionSet,
    contrastive: Option<(&[PredictionSet], &ContrastiveGroupSet)>,
    gt: &Target,
    w: &LossWeights,
    flags: &ObjectiveFlags,
) -> Result<SceneObjective> {
    let values = matching.values(g);
    let m = best_match(&values, gt, w)?;
    let n = values.boxes.len();
    let terms = matched_loss(g, matching, m.index, n, gt, w)?;
    let mut b = LossBreakdown {
        l1: g.value(terms.l1).item(),
        giou: g.value(terms.giou).item(),
        dice: g.value(terms.dice).item(),
        mask_focal: g.value(terms.mask_focal).item(),
        cls: g.value(terms.cls).item(),
        matching: g.value(terms.total).item(),
        ..LossBreakdown::default()
    };
    check_finite("l1", b.l1)?;
    check_finite("giou", b.giou)?;
    check_finite("dice", b.dice)?;
    check_finite("mask_focal", b.mask_focal)?;
    check_finite("cls", b.cls)?;
    let mut lm = terms.total;
    let mut lca = None;

    if let Some((parts, groups)) = contrastive {
        if parts.len() != groups.len() {
            return Err(PcanError::ShapeMismatch(format!("{} contrastive outputs for {} groups", parts.len(), groups.len())));
        }
        if flags.contrastive_supervision {
            let mut sup = Vec::with_capacity(parts.len());
            for (p, (grp, &pos)) in parts.iter().zip(groups.groups.iter().zip(&groups.positive_index)) {
                sup.push(matched_loss(g, p, pos, grp.len(), gt, w)?.total);
            }
            let all = g.concat_rows(&sup);
            let aux = g.mean(all);
            b.contrastive_supervision = g.value(aux).item();
            check_finite("contrastive_supervision", b.contrastive_supervision)?;
            lm = g.add(lm, aux);
        }
        if flags.contrastive_loss {
            let emb = g.select_rows(matching.embeddings, &[m.index]);
            let yp = if flags.detach_matched { g.constant(g.value(emb).clone()) } else { emb };
            let mut grp_vars = Vec::with_capacity(parts.len());
            for (p, (grp, &pos)) in parts.iter().zip(groups.groups.iter().zip(&groups.positive_index)) {
                let rows = if flags.include_padded { p.len(g) } else { grp.len() };
                let idx: Vec<usize> = (0..rows).collect();
                grp_vars.push((g.select_rows(p.embeddings, &idx), pos));
            }
            let l = contrastive_alignment_var(g, yp, &grp_vars, w.tau)?;
            b.alignment = g.value(l).item();
            lca = Some(l);
        }
    }
    b.matching += b.contrastive_supervision;
    b.total = total_loss(b.matching, b.alignment, w)?;
    let lm = g.scale(lm, w.alpha);
    let loss = match lca {
        Some(l) => {
            let l = g.scale(l, w.beta);
            g.add(lm, l)
        }
        None => lm,
    };
    Ok(SceneObjective { loss, breakdown: b, matched: m.index })
}
