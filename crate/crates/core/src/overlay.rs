//! RGB visualization of a mask with ground-truth and predicted tips, written
//! as binary PPM.

use std::fs;
use std::path::Path;

use crate::dataset::{DatasetError, PartMask, Point, TipPair};

const CLASS_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [90, 90, 110], [60, 130, 200], [220, 180, 60]];
const GT_COLOR: [u8; 3] = [40, 220, 60];
const PRED_COLOR: [u8; 3] = [230, 40, 40];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl Image {
    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn cross(&mut self, p: Point, arm: i64, rgb: [u8; 3]) {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for d in -arm..=arm {
            self.put(cx + d, cy, rgb);
            self.put(cx, cy + d, rgb);
        }
    }

    fn circle(&mut self, p: Point, radius: f64, rgb: [u8; 3]) {
        let r = radius.ceil() as i64 + 1;
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let d = ((x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2)).sqrt();
                if (d - radius).abs() < 0.5 {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Class-tinted mask, crosses at ground-truth tips and circles at predicted ones.
pub fn render(mask: &PartMask, gt: Option<&TipPair>, pred: Option<&TipPair>) -> Image {
    let pixels = mask.labels().iter().flat_map(|&l| CLASS_COLORS[l as usize]).collect();
    let mut img = Image {
        width: mask.width(),
        height: mask.height(),
        pixels,
    };
    if let Some(t) = gt {
        img.cross(t.left, 3, GT_COLOR);
        img.cross(t.right, 3, GT_COLOR);
    }
    if let Some(t) = pred {
        img.circle(t.left, 3.0, PRED_COLOR);
        img.circle(t.right, 3.0, PRED_COLOR);
    }
    img
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, img.encode_ppm()).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GRIPPER;

    #[test]
    fn header_tints_and_markers() {
        let mut m = PartMask::background(32, 16).unwrap();
        m.set(1, 1, GRIPPER);
        let gt = TipPair::new(Point::new(10.0, 8.0), Point::new(20.0, 8.0));
        let pred = TipPair::new(Point::new(10.0, 8.0), Point::new(25.0, 8.0));
        let img = render(&m, Some(&gt), Some(&pred));
        let bytes = img.encode_ppm();
        assert!(bytes.starts_with(b"P6\n32 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 16 * 3);
        assert_eq!(img.get(1, 1), CLASS_COLORS[3]);
        assert_eq!(img.get(0, 0), CLASS_COLORS[0]);
        assert_eq!(img.get(20, 8), GT_COLOR);
        assert_eq!(img.get(28, 8), PRED_COLOR);
        assert_eq!(img.get(25, 8), CLASS_COLORS[0]);
    }
}
