//! Axis-aligned boxes: conversions, IoU, GIoU and perturbation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PcanError, Result};

/// Tolerance used when validating normalized coordinates.
const COORD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    CornerAbsolute,
    CornerNormalized,
    CenterSizeNormalized,
}

/// Axis-aligned rectangle tagged with its coordinate convention.
///
/// In corner form the four values are `(x1, y1, x2, y2)`; in center-size
/// form they are `(cx, cy, w, h)`. Construction rejects zero-area boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    coords: [f64; 4],
    convention: Convention,
}

impl Box {
    pub fn new(coords: [f64; 4], convention: Convention) -> Result<Self> {
        let b = Self { coords, convention };
        b.validate()?;
        Ok(b)
    }

    pub fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new([x1, y1, x2, y2], Convention::CornerNormalized)
    }

    pub fn corner_abs(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new([x1, y1, x2, y2], Convention::CornerAbsolute)
    }

    pub fn center_size(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new([cx, cy, w, h], Convention::CenterSizeNormalized)
    }

    fn validate(&self) -> Result<()> {
        let c = self.coords;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(PcanError::InvalidBox(format!("non-finite coordinates {c:?}")));
        }
        match self.convention {
            Convention::CornerAbsolute | Convention::CornerNormalized => {
                if !(c[0] < c[2] && c[1] < c[3]) {
                    return Err(PcanError::InvalidBox(format!("degenerate corners {c:?}")));
                }
            }
            Convention::CenterSizeNormalized => {
                if !(c[2] > 0.0 && c[3] > 0.0) {
                    return Err(PcanError::InvalidBox(format!("non-positive size {c:?}")));
                }
            }
        }
        if self.convention != Convention::CornerAbsolute
            && c.iter().any(|&v| !(-COORD_TOL..=1.0 + COORD_TOL).contains(&v))
        {
            return Err(PcanError::InvalidBox(format!("normalized coordinates outside [0,1]: {c:?}")));
        }
        Ok(())
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn coords(&self) -> [f64; 4] {
        self.coords
    }

    /// Corner coordinates regardless of the stored convention.
    pub fn corners(&self) -> [f64; 4] {
        match self.convention {
            Convention::CenterSizeNormalized => cxcywh_to_xyxy(self.coords),
            _ => self.coords,
        }
    }

    pub fn width(&self) -> f64 {
        let c = self.corners();
        c[2] - c[0]
    }

    pub fn height(&self) -> f64 {
        let c = self.corners();
        c[3] - c[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_center_size(&self) -> Result<Self> {
        match self.convention {
            Convention::CornerNormalized => Self::new(xyxy_to_cxcywh(self.coords), Convention::CenterSizeNormalized),
            Convention::CenterSizeNormalized => Ok(*self),
            Convention::CornerAbsolute => Err(PcanError::InvalidBox(
                "absolute boxes must be normalized before center-size conversion".into(),
            )),
        }
    }

    pub fn to_corner(&self) -> Result<Self> {
        match self.convention {
            Convention::CenterSizeNormalized => Self::new(cxcywh_to_xyxy(self.coords), Convention::CornerNormalized),
            _ => Ok(*self),
        }
    }

    pub fn normalize(&self, height: usize, width: usize) -> Result<Self> {
        match self.convention {
            Convention::CornerAbsolute => {
                let (w, h) = (width as f64, height as f64);
                let c = self.coords;
                Self::corner(c[0] / w, c[1] / h, c[2] / w, c[3] / h)
            }
            _ => Ok(*self),
        }
    }

    pub fn to_absolute(&self, height: usize, width: usize) -> Result<Self> {
        let c = self.to_corner()?.coords;
        let (w, h) = (width as f64, height as f64);
        Self::corner_abs(c[0] * w, c[1] * h, c[2] * w, c[3] * h)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        let mut c = self.coords;
        match self.convention {
            Convention::CenterSizeNormalized => {
                c[0] += dx;
                c[1] += dy;
            }
            _ => {
                c[0] += dx;
                c[2] += dx;
                c[1] += dy;
                c[3] += dy;
            }
        }
        Self::new(c, self.convention)
    }
}

pub fn xyxy_to_cxcywh(c: [f64; 4]) -> [f64; 4] {
    [(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1]]
}

pub fn cxcywh_to_xyxy(c: [f64; 4]) -> [f64; 4] {
    [c[0] - c[2] / 2.0, c[1] - c[3] / 2.0, c[0] + c[2] / 2.0, c[1] + c[3] / 2.0]
}

fn check_pair(a: &Box, b: &Box) -> Result<()> {
    if a.convention != b.convention {
        return Err(PcanError::ConventionMismatch(a.convention, b.convention));
    }
    Ok(())
}

/// Intersection, union and hull areas of two corner boxes (no validation).
pub fn overlap_areas(a: [f64; 4], b: [f64; 4]) -> (f64, f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    (inter, union, hull)
}

/// IoU of raw corner arrays; used on model outputs that are not `Box`es.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, _) = overlap_areas(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, hull) = overlap_areas(a, b);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        return iou;
    }
    // hull >= union exactly; rounding on nested boxes can flip the sign
    iou - ((hull - union) / hull).max(0.0)
}

pub fn iou(a: &Box, b: &Box) -> Result<f64> {
    check_pair(a, b)?;
    Ok(iou_xyxy(a.corners(), b.corners()))
}

pub fn giou(a: &Box, b: &Box) -> Result<f64> {
    check_pair(a, b)?;
    Ok(giou_xyxy(a.corners(), b.corners()))
}

/// Jitter each corner by uniform noise of at most `scale` times the matching
/// side length, then clip to the unit square.
pub fn perturb(b: &Box, scale: f64, rng: &mut impl Rng) -> Result<Box> {
    if !(0.0..0.5).contains(&scale) {
        return Err(PcanError::OutOfRange(format!("perturb scale {scale} not in [0, 0.5)")));
    }
    if b.convention == Convention::CornerAbsolute {
        return Err(PcanError::InvalidBox("perturb expects a normalized box".into()));
    }
    if scale == 0.0 {
        return Ok(*b);
    }
    let c = b.corners();
    let (w, h) = (c[2] - c[0], c[3] - c[1]);
    let mut jitter = |v: f64, side: f64| (v + rng.random_range(-1.0..=1.0) * scale * side).clamp(0.0, 1.0);
    let out = [jitter(c[0], w), jitter(c[1], h), jitter(c[2], w), jitter(c[3], h)];
    let corner = Box::new(out, Convention::CornerNormalized)?;
    match b.convention {
        Convention::CenterSizeNormalized => corner.to_center_size(),
        _ => Ok(corner),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::corner_abs(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(0., 0., 1., 1.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)).unwrap(), 0.0);
        assert!((iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = b(0., 0., 1., 1.);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        assert!((giou(&a, &b(2., 0., 3., 1.)).unwrap() + 1.0 / 3.0).abs() < 1e-12);
        let outer = b(0., 0., 4., 4.);
        let inner = b(1., 1., 2., 3.);
        assert_eq!(giou(&outer, &inner).unwrap(), iou(&outer, &inner).unwrap());
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(Box::corner(0.2, 0.2, 0.2, 0.5).is_err());
        assert!(Box::center_size(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(Box::corner(0.2, 0.2, 1.2, 0.5).is_err());
    }

    #[test]
    fn mixed_conventions_rejected() {
        let a = Box::corner(0.1, 0.1, 0.5, 0.5).unwrap();
        let c = a.to_center_size().unwrap();
        assert!(matches!(iou(&a, &c), Err(PcanError::ConventionMismatch(..))));
    }

    #[test]
    fn perturb_contract() {
        let base = Box::corner(0.4, 0.4, 0.6, 0.6).unwrap();
        let mut rng = stream(11, 0);
        assert_eq!(perturb(&base, 0.0, &mut rng).unwrap(), base);
        let out = perturb(&base, 0.1, &mut rng).unwrap();
        assert!(iou(&out, &base).unwrap() > 0.5);
        assert!(perturb(&base, 0.5, &mut rng).is_err());
        assert!(perturb(&base, -0.1, &mut rng).is_err());
    }

    #[test]
    fn perturb_respects_side_bound() {
        let base = Box::corner(0.1, 0.3, 0.5, 0.4).unwrap();
        let mut rng = stream(3, 1);
        for _ in 0..1000 {
            let out = perturb(&base, 0.2, &mut rng).unwrap();
            let (o, c) = (out.corners(), base.corners());
            assert!((o[0] - c[0]).abs() <= 0.2 * 0.4 + 1e-12);
            assert!((o[1] - c[1]).abs() <= 0.2 * 0.1 + 1e-12);
            assert!(out.width() > 0.0 && out.height() > 0.0);
        }
    }

    fn unit_box() -> impl Strategy<Value = Box> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, fw, fh)| {
            let x2 = x + (1.0 - x) * fw;
            let y2 = y + (1.0 - y) * fh;
            Box::corner(x, y, x2.max(x + 1e-3).min(1.0), y2.max(y + 1e-3).min(1.0)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in unit_box(), c in unit_box()) {
            let ab = iou(&a, &c).unwrap();
            prop_assert_eq!(ab, iou(&c, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(giou(&a, &c).unwrap() <= ab + 1e-15);
        }

        #[test]
        fn center_size_round_trip(a in unit_box()) {
            let back = a.to_center_size().unwrap().to_corner().unwrap();
            for (x, y) in back.coords().iter().zip(a.coords()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn giou_translation_invariant(a in unit_box(), c in unit_box(), dx in -2.0..2.0f64, dy in -2.0..2.0f64) {
            let (ca, cc) = (a.corners(), c.corners());
            let shift = |v: [f64; 4]| [v[0] + dx, v[1] + dy, v[2] + dx, v[3] + dy];
            let g0 = giou_xyxy(ca, cc);
            let g1 = giou_xyxy(shift(ca), shift(cc));
            prop_assert!((g0 - g1).abs() < 1e-9);
        }
    }
}
