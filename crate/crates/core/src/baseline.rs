//! Hand-crafted tip detector: split the gripper mask into 8-connected
//! components, fit a principal axis to each, and take the on-axis pixel
//! farthest from the wrist as the tip.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::{PartMask, Point, TipPair, GRIPPER, SHAFT, WRIST};

/// Pixels within this perpendicular distance of the axis count as on-axis.
pub const AXIS_BAND: f64 = 1.5;
/// Components smaller than this cannot define an axis and are ignored.
pub const MIN_COMPONENT_AREA: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BaselineError {
    #[error("component of {0} pixel(s) has no principal axis")]
    DegenerateComponent(usize),
    #[error("mask has no gripper pixels")]
    NoGripperPixels,
    #[error("mask has neither wrist nor shaft pixels to anchor the tip search")]
    NoWristPixels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    pub centroid: Point,
}

impl Component {
    fn from_pixels(pixels: Vec<(usize, usize)>) -> Self {
        let centroid = centroid_of(&pixels);
        Self { pixels, centroid }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn centroid_of(pixels: &[(usize, usize)]) -> Point {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    Point::new(sx / n, sy / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub tips: TipPair,
    /// Fewer than two usable gripper components; both tips are the same pixel.
    pub degenerate: bool,
    /// Unit principal axis of each component used, pointing away from the wrist.
    pub axes: Vec<[f64; 2]>,
    /// Distance reference the tips were measured from.
    pub wrist: Point,
    /// The wrist class was empty and the shaft axis endpoint was used instead.
    pub wrist_fallback: bool,
}

/// 8-connected components of `grid` (row-major, `width` × `height`), largest first.
/// Equal areas keep discovery (row-major) order.
pub fn connected_components(grid: &[bool], width: usize, height: usize) -> Vec<Component> {
    assert_eq!(grid.len(), width * height, "grid length does not match dimensions");
    let mut seen = vec![false; grid.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..grid.len() {
        if !grid[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % width, i / width);
            pixels.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if grid[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(Component::from_pixels(pixels));
    }
    out.sort_by(|a, b| b.area().cmp(&a.area()));
    out
}

/// Dominant direction of the component's centered pixel cloud, signed to
/// point away from `wrist`.
pub fn principal_axis(component: &Component, wrist: Point) -> Result<[f64; 2], BaselineError> {
    if component.area() < MIN_COMPONENT_AREA {
        return Err(BaselineError::DegenerateComponent(component.area()));
    }
    let c = component.centroid;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &component.pixels {
        let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx + syy <= 0.0 {
        return Err(BaselineError::DegenerateComponent(component.area()));
    }
    // Jacobi rotation that diagonalizes the 2x2 scatter matrix; its angle is
    // the orientation of the largest singular direction.
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (mut ux, mut uy) = (angle.cos(), angle.sin());
    if ux * (c.x - wrist.x) + uy * (c.y - wrist.y) < 0.0 {
        ux = -ux;
        uy = -uy;
    }
    Ok([ux, uy])
}

/// Farthest pixel from `wrist` among those within [`AXIS_BAND`] of the line
/// through the centroid along `axis`.
fn farthest_on_axis(component: &Component, axis: [f64; 2], wrist: Point) -> Point {
    let c = component.centroid;
    let on_axis = |&&(x, y): &&(usize, usize)| {
        let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
        (dx * axis[1] - dy * axis[0]).abs() <= AXIS_BAND
    };
    let band: Vec<&(usize, usize)> = component.pixels.iter().filter(on_axis).collect();
    let candidates: Vec<&(usize, usize)> = if band.is_empty() {
        component.pixels.iter().collect()
    } else {
        band
    };
    farthest(candidates.into_iter().copied(), wrist)
}

/// First pixel (in iteration order) at maximal distance from `from`.
fn farthest(pixels: impl Iterator<Item = (usize, usize)>, from: Point) -> Point {
    let mut best = None::<(f64, Point)>;
    for (x, y) in pixels {
        let p = Point::new(x as f64, y as f64);
        let d = p.dist(from);
        if best.map_or(true, |(bd, _)| d > bd) {
            best = Some((d, p));
        }
    }
    best.expect("non-empty pixel set").1
}

fn normalize(x: f64, y: f64) -> Option<[f64; 2]> {
    let n = x.hypot(y);
    (n > 0.0).then(|| [x / n, y / n])
}

pub fn detect_tips(mask: &PartMask) -> Result<BaselineResult, BaselineError> {
    let gripper = mask.pixels_with(GRIPPER);
    if gripper.is_empty() {
        return Err(BaselineError::NoGripperPixels);
    }
    let gripper_centroid = centroid_of(&gripper);
    let wrist_px = mask.pixels_with(WRIST);
    let shaft_px = mask.pixels_with(SHAFT);
    let shaft_centroid = (!shaft_px.is_empty()).then(|| centroid_of(&shaft_px));

    let (wrist, wrist_fallback) = if !wrist_px.is_empty() {
        (centroid_of(&wrist_px), false)
    } else {
        (shaft_endpoint(&shaft_px, gripper_centroid)?, true)
    };

    // Forward direction of the instrument, used only for chirality.
    let forward = shaft_centroid
        .and_then(|s| normalize(wrist.x - s.x, wrist.y - s.y))
        .or_else(|| normalize(gripper_centroid.x - wrist.x, gripper_centroid.y - wrist.y))
        .unwrap_or([1.0, 0.0]);

    let comps: Vec<Component> = connected_components(&mask.indicator(GRIPPER), mask.width(), mask.height())
        .into_iter()
        .filter(|c| c.area() >= MIN_COMPONENT_AREA)
        .collect();

    let mut axes = Vec::new();
    let mut found = Vec::new();
    for comp in comps.iter().take(2) {
        match principal_axis(comp, wrist) {
            Ok(axis) => {
                axes.push(axis);
                found.push(farthest_on_axis(comp, axis, wrist));
            }
            Err(_) => found.push(farthest(comp.pixels.iter().copied(), wrist)),
        }
    }
    if found.is_empty() {
        // only specks: take the farthest gripper pixel outright
        let p = farthest(gripper.iter().copied(), wrist);
        if let Some(a) = normalize(p.x - wrist.x, p.y - wrist.y) {
            axes.push(a);
        }
        found.push(p);
    }

    let degenerate = found.len() < 2;
    let tips = if degenerate {
        TipPair::new(found[0], found[0])
    } else {
        let side = |p: Point| (p.x - wrist.x) * forward[1] - (p.y - wrist.y) * forward[0];
        // the left jaw sits at a negative cross product with the forward direction
        if side(found[0]) <= side(found[1]) {
            TipPair::new(found[0], found[1])
        } else {
            TipPair::new(found[1], found[0])
        }
    };
    Ok(BaselineResult {
        tips,
        degenerate,
        axes,
        wrist,
        wrist_fallback,
    })
}

/// Gripper-side end of the shaft's principal axis.
fn shaft_endpoint(shaft: &[(usize, usize)], gripper_centroid: Point) -> Result<Point, BaselineError> {
    if shaft.is_empty() {
        return Err(BaselineError::NoWristPixels);
    }
    let comp = Component::from_pixels(shaft.to_vec());
    let c = comp.centroid;
    let Ok(axis) = principal_axis(&comp, gripper_centroid) else {
        return Ok(c);
    };
    let (lo, hi) = comp.pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
        let t = (x as f64 - c.x) * axis[0] + (y as f64 - c.y) * axis[1];
        (lo.min(t), hi.max(t))
    });
    let a = Point::new(c.x + lo * axis[0], c.y + lo * axis[1]);
    let b = Point::new(c.x + hi * axis[0], c.y + hi * axis[1]);
    Ok(if a.dist(gripper_centroid) <= b.dist(gripper_centroid) { a } else { b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BACKGROUND;

    fn grid_with(width: usize, height: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut g = vec![false; width * height];
        for &(x, y) in on {
            g[y * width + x] = true;
        }
        g
    }

    #[test]
    fn two_blocks_and_diagonal_touch() {
        let mut on = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                on.push((x, y));
                on.push((x + 10, y + 5));
            }
        }
        let comps = connected_components(&grid_with(16, 16, &on), 16, 16);
        assert_eq!(comps.len(), 2);
        assert!(comps.iter().all(|c| c.area() == 9));
        assert_eq!(comps[0].centroid, Point::new(1.0, 1.0));

        let diag = connected_components(&grid_with(4, 4, &[(0, 0), (1, 1)]), 4, 4);
        assert_eq!(diag.len(), 1);
        assert!(connected_components(&vec![false; 16], 4, 4).is_empty());
    }

    fn rect_component(cx: f64, cy: f64, len: f64, wid: f64, angle: f64) -> Component {
        let (c, s) = (angle.cos(), angle.sin());
        let mut px = Vec::new();
        for y in 0..128usize {
            for x in 0..128usize {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if u.abs() <= len / 2.0 && v.abs() <= wid / 2.0 {
                    px.push((x, y));
                }
            }
        }
        Component::from_pixels(px)
    }

    #[test]
    fn axis_of_horizontal_bar() {
        let px: Vec<_> = (0..20).flat_map(|x| (0..4).map(move |y| (x + 30, y + 10))).collect();
        let comp = Component::from_pixels(px);
        let axis = principal_axis(&comp, Point::new(0.0, 11.5)).unwrap();
        assert!((axis[0] - 1.0).abs() < 1e-12 && axis[1].abs() < 1e-12);
        let flipped = principal_axis(&comp, Point::new(100.0, 11.5)).unwrap();
        assert!((flipped[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn axis_of_rotated_rectangle_matches_eigenvector() {
        let comp = rect_component(64.0, 64.0, 60.0, 8.0, 30f64.to_radians());
        // independent route: closed-form eigenvector of the 2x2 covariance
        let c = comp.centroid;
        let n = comp.area() as f64;
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        for &(x, y) in &comp.pixels {
            let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
            a += dx * dx / n;
            b += dx * dy / n;
            d += dy * dy / n;
        }
        let lambda = 0.5 * (a + d) + (0.25 * (a - d).powi(2) + b * b).sqrt();
        let (ex, ey) = (b, lambda - a);
        let norm = ex.hypot(ey);
        let axis = principal_axis(&comp, Point::new(0.0, 0.0)).unwrap();
        assert!((axis[0] * ex / norm + axis[1] * ey / norm).abs() > 1.0 - 1e-12);
        let err = (axis[0] * 30f64.to_radians().cos() + axis[1] * 30f64.to_radians().sin())
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        assert!(err < 2.0, "axis off by {err} degrees");
    }

    #[test]
    fn single_pixel_is_degenerate() {
        let comp = Component::from_pixels(vec![(3, 3)]);
        assert_eq!(
            principal_axis(&comp, Point::default()),
            Err(BaselineError::DegenerateComponent(1))
        );
    }

    fn mask_with(width: usize, height: usize, paint: impl Fn(usize, usize) -> u8) -> PartMask {
        let mut labels = vec![BACKGROUND; width * height];
        for y in 0..height {
            for x in 0..width {
                labels[y * width + x] = paint(x, y);
            }
        }
        PartMask::new(width, height, labels).unwrap()
    }

    #[test]
    fn bar_tip_is_right_end_and_matches_brute_force() {
        let mask = mask_with(128, 128, |x, y| {
            let (dx, dy) = (x as f64 - 40.0, y as f64 - 64.0);
            if (46..86).contains(&x) && (62..66).contains(&y) {
                GRIPPER
            } else if dx.hypot(dy) <= 5.0 {
                WRIST
            } else if (10..36).contains(&x) && (60..68).contains(&y) {
                SHAFT
            } else {
                BACKGROUND
            }
        });
        let res = detect_tips(&mask).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.tips.left, res.tips.right);
        assert_eq!(res.tips.left.x, 85.0);

        // brute force over every gripper pixel on the fitted axis
        let grip = mask.pixels_with(GRIPPER);
        let c = centroid_of(&grip);
        let w = res.wrist;
        let oracle = grip
            .iter()
            .map(|&(x, y)| Point::new(x as f64, y as f64))
            .filter(|p| (p.y - c.y).abs() <= AXIS_BAND)
            .max_by(|a, b| a.dist(w).partial_cmp(&b.dist(w)).unwrap())
            .unwrap();
        assert_eq!(res.tips.left.dist(w), oracle.dist(w));
    }

    #[test]
    fn missing_classes() {
        let empty = PartMask::background(16, 16).unwrap();
        assert_eq!(detect_tips(&empty), Err(BaselineError::NoGripperPixels));
        let only_grip = mask_with(16, 16, |x, _| if x > 8 { GRIPPER } else { BACKGROUND });
        assert_eq!(detect_tips(&only_grip), Err(BaselineError::NoWristPixels));
        let no_wrist = mask_with(32, 16, |x, y| match (x, y) {
            (0..=15, 6..=9) => SHAFT,
            (16..=30, 7..=8) => GRIPPER,
            _ => BACKGROUND,
        });
        let res = detect_tips(&no_wrist).unwrap();
        assert!(res.wrist_fallback);
        assert_eq!(res.tips.left, Point::new(30.0, 7.0));
    }
}
