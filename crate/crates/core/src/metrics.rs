//! Overall / mean IoU, Precision@X and expression-length buckets.

use serde::{Deserialize, Serialize};

use crate::error::{PcanError, Result};

pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Pixel counts for one (prediction, ground truth) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub intersection: u64,
    pub union: u64,
}

impl PairStats {
    pub fn new<P: AsRef<[u8]>>(pred: P, gt: P) -> Result<Self> {
        let (p, g) = (pred.as_ref(), gt.as_ref());
        if p.len() != g.len() {
            return Err(PcanError::ShapeMismatch(format!("mask of {} pixels vs ground truth of {}", p.len(), g.len())));
        }
        let mut s = Self::default();
        for (&a, &b) in p.iter().zip(g) {
            let (a, b) = (a != 0, b != 0);
            s.intersection += u64::from(a && b);
            s.union += u64::from(a || b);
        }
        Ok(s)
    }

    /// IoU of this pair, 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.intersection, self.union)
    }
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn pair_stats<P: AsRef<[u8]>>(pairs: &[(P, P)]) -> Result<Vec<PairStats>> {
    pairs.iter().map(|(p, g)| PairStats::new(p.as_ref(), g.as_ref())).collect()
}

/// Total intersection over total union; 1.0 for an empty-union corpus.
pub fn oiou_stats(stats: &[PairStats]) -> f64 {
    let i = stats.iter().map(|s| s.intersection).sum();
    let u = stats.iter().map(|s| s.union).sum();
    ratio(i, u)
}

pub fn miou_stats(stats: &[PairStats]) -> f64 {
    if stats.is_empty() {
        return 1.0;
    }
    stats.iter().map(PairStats::iou).sum::<f64>() / stats.len() as f64
}

pub fn oiou<P: AsRef<[u8]>>(pairs: &[(P, P)]) -> Result<f64> {
    Ok(oiou_stats(&pair_stats(pairs)?))
}

pub fn miou<P: AsRef<[u8]>>(pairs: &[(P, P)]) -> Result<f64> {
    Ok(miou_stats(&pair_stats(pairs)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAt {
    pub threshold: f64,
    pub value: f64,
}

/// Fraction of pairs whose IoU is strictly above each threshold.
pub fn precision_from_ious(ious: &[f64], thresholds: &[f64]) -> Result<Vec<PrecisionAt>> {
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0 && t < 1.0) {
                return Err(PcanError::OutOfRange(format!("threshold {t} outside (0, 1)")));
            }
            let hits = ious.iter().filter(|&&v| v > t).count();
            let value = if ious.is_empty() { 0.0 } else { hits as f64 / ious.len() as f64 };
            Ok(PrecisionAt { threshold: t, value })
        })
        .collect()
}

pub fn precision_at<P: AsRef<[u8]>>(pairs: &[(P, P)], thresholds: &[f64]) -> Result<Vec<PrecisionAt>> {
    let ious: Vec<f64> = pair_stats(pairs)?.iter().map(PairStats::iou).collect();
    precision_from_ious(&ious, thresholds)
}

/// Inclusive range of expression lengths; `hi = None` is open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|h| len <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            None => format!("{}+", self.lo),
            Some(h) if h == self.lo => format!("{h}"),
            Some(h) => format!("{}-{h}", self.lo),
        }
    }
}

/// 1-2, 3, 4-5, 6+.
pub fn default_buckets() -> Vec<Bucket> {
    vec![
        Bucket { lo: 1, hi: Some(2) },
        Bucket { lo: 3, hi: Some(3) },
        Bucket { lo: 4, hi: Some(5) },
        Bucket { lo: 6, hi: None },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub label: String,
    pub oiou: f64,
    pub count: usize,
    pub intersection: u64,
    pub union: u64,
}

/// Each record goes to the first bucket containing its length.
pub fn bucketed_iou(lengths: &[usize], stats: &[PairStats], buckets: &[Bucket]) -> Result<Vec<BucketResult>> {
    if lengths.len() != stats.len() {
        return Err(PcanError::ShapeMismatch(format!("{} lengths for {} pairs", lengths.len(), stats.len())));
    }
    let mut out: Vec<BucketResult> =
        buckets.iter().map(|b| BucketResult { label: b.label(), oiou: 1.0, count: 0, intersection: 0, union: 0 }).collect();
    for (&len, s) in lengths.iter().zip(stats) {
        let k = buckets.iter().position(|b| b.contains(len)).ok_or(PcanError::Unbucketed(len))?;
        out[k].count += 1;
        out[k].intersection += s.intersection;
        out[k].union += s.union;
    }
    for r in &mut out {
        r.oiou = ratio(r.intersection, r.union);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub oiou: f64,
    pub miou: f64,
    pub precision: Vec<PrecisionAt>,
    pub buckets: Vec<BucketResult>,
    /// Pairs where both masks were empty and IoU was taken as 1.
    pub empty_union_pairs: usize,
}

impl EvalReport {
    pub fn from_stats(stats: &[PairStats], lengths: &[usize]) -> Result<Self> {
        let ious: Vec<f64> = stats.iter().map(PairStats::iou).collect();
        Ok(Self {
            samples: stats.len(),
            oiou: oiou_stats(stats),
            miou: miou_stats(stats),
            precision: precision_from_ious(&ious, &PRECISION_THRESHOLDS)?,
            buckets: bucketed_iou(lengths, stats, &default_buckets())?,
            empty_union_pairs: stats.iter().filter(|s| s.union == 0).count(),
        })
    }

    pub fn precision_value(&self, threshold: f64) -> Option<f64> {
        self.precision.iter().find(|p| (p.threshold - threshold).abs() < 1e-9).map(|p| p.value)
    }

    /// Aligned text table, percentages with two decimals.
    pub fn to_table(&self) -> String {
        let mut head = vec!["samples".to_string(), "oIoU".into(), "mIoU".into()];
        let mut row = vec![self.samples.to_string(), pct(self.oiou), pct(self.miou)];
        for p in &self.precision {
            head.push(format!("Pr@{}", p.threshold));
            row.push(pct(p.value));
        }
        let mut s = align(&[head, row]);
        s.push('\n');
        let mut bh = vec!["length".to_string()];
        let mut br = vec!["IoU".to_string()];
        let mut bn = vec!["n".to_string()];
        for b in &self.buckets {
            bh.push(b.label.clone());
            br.push(if b.count == 0 { "-".to_string() } else { pct(b.oiou) });
            bn.push(b.count.to_string());
        }
        s.push_str(&align(&[bh, br, bn]));
        if self.empty_union_pairs > 0 {
            s.push_str(&format!("\nnote: {} pairs had empty prediction and ground truth (IoU taken as 1)\n", self.empty_union_pairs));
        }
        s
    }
}

pub(crate) fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Right-align every column to its widest cell.
pub(crate) fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(i, c)| format!("{c:>w$}", w = widths[i])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
