//! RGB raster helpers and PNG output for overlays.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{io_err, PcanError, Result};
use crate::geometry::Box;
use crate::synthdata::Array3;

pub const GREEN: [u8; 3] = [40, 220, 60];
pub const RED: [u8; 3] = [235, 50, 40];
pub const ORANGE: [u8; 3] = [250, 160, 30];
pub const CYAN: [u8; 3] = [40, 200, 230];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// Nearest-neighbour enlargement of a float image in `[0, 1]`.
    pub fn from_array(image: &Array3, scale: usize) -> Self {
        let scale = scale.max(1);
        let (w, h) = (image.width * scale, image.height * scale);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = image.at(y / scale, x / scale, c.min(image.channels - 1));
                    data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn blend(&mut self, x: usize, y: usize, color: [u8; 3], alpha: f64) {
        if x >= self.width || y >= self.height {
            return;
        }
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            let v = f64::from(self.data[i + c]) * (1.0 - alpha) + f64::from(color[c]) * alpha;
            self.data[i + c] = v.round() as u8;
        }
    }

    /// Tint pixels where `mask` (at `mask_w`-wide source resolution) is set.
    pub fn tint(&mut self, mask: &[u8], mask_w: usize, color: [u8; 3], alpha: f64) {
        let scale = self.width / mask_w.max(1);
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get((y / scale) * mask_w + x / scale).is_some_and(|&m| m != 0) {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    /// Draw the boundary pixels of `mask`.
    pub fn outline(&mut self, mask: &[u8], mask_w: usize, color: [u8; 3]) {
        let mask_h = mask.len() / mask_w.max(1);
        let scale = self.width / mask_w.max(1);
        let on = |x: isize, y: isize| {
            x >= 0 && y >= 0 && (x as usize) < mask_w && (y as usize) < mask_h && mask[y as usize * mask_w + x as usize] != 0
        };
        for y in 0..self.height {
            for x in 0..self.width {
                let (mx, my) = ((x / scale) as isize, (y / scale) as isize);
                if !on(mx, my) {
                    continue;
                }
                let edge_x = (x % scale == 0 && !on(mx - 1, my)) || (x % scale == scale - 1 && !on(mx + 1, my));
                let edge_y = (y % scale == 0 && !on(mx, my - 1)) || (y % scale == scale - 1 && !on(mx, my + 1));
                if edge_x || edge_y {
                    self.blend(x, y, color, 1.0);
                }
            }
        }
    }

    /// Rectangle outline of a normalized box.
    pub fn draw_box(&mut self, b: &Box, color: [u8; 3]) {
        let [x1, y1, x2, y2] = b.corners();
        let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n.saturating_sub(1));
        let (x1, x2) = (px(x1, self.width), px(x2, self.width));
        let (y1, y2) = (px(y1, self.height), px(y2, self.height));
        for x in x1..=x2 {
            self.blend(x, y1, color, 1.0);
            self.blend(x, y2, color, 1.0);
        }
        for y in y1..=y2 {
            self.blend(x1, y, color, 1.0);
            self.blend(x2, y, color, 1.0);
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| PcanError::Png(e.to_string()))?;
        w.write_image_data(&self.data).map_err(|e| PcanError::Png(e.to_string()))?;
        w.finish().map_err(|e| PcanError::Png(e.to_string()))
    }
}

/// Scene with the predicted mask tinted red and the ground truth outlined green.
pub fn mask_overlay(image: &Array3, pred: &[u8], gt: &[u8], scale: usize) -> RgbImage {
    let mut img = RgbImage::from_array(image, scale);
    img.tint(pred, image.width, RED, 0.5);
    img.outline(gt, image.width, GREEN);
    img
}
