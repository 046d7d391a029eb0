//! Input encoding, attention maps, heatmap targets and decoding.
//!
//! Quarter-resolution grid cell `(row, col)` corresponds to full-resolution
//! point `(4·col, 4·row)`.

use crate::dataset::{PartMask, Point, TipPair, GRIPPER, NUM_CLASSES};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const STRIDE: usize = 4;

/// One-hot encoding of the label classes: `N×4×H×W`.
pub fn encode_input<T: Scalar>(masks: &[&PartMask]) -> Tensor<T> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = vec![T::zero(); masks.len() * NUM_CLASSES * h * w];
    for (s, m) in masks.iter().enumerate() {
        assert_eq!((m.height(), m.width()), (h, w), "batch masks differ in size");
        for (i, &l) in m.labels().iter().enumerate() {
            data[(s * NUM_CLASSES + l as usize) * h * w + i] = T::one();
        }
    }
    Tensor::from_vec(&[masks.len(), NUM_CLASSES, h, w], data).expect("encode shape")
}

/// Gripper indicator average-pooled 4×, mapped to `[alpha_min, 1]`: `N×1×H/4×W/4`.
pub fn attention_map<T: Scalar>(masks: &[&PartMask], alpha_min: f64) -> Tensor<T> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let (qh, qw) = (h / STRIDE, w / STRIDE);
    let mut data = Vec::with_capacity(masks.len() * qh * qw);
    for m in masks {
        for qy in 0..qh {
            for qx in 0..qw {
                let mut hits = 0usize;
                for y in qy * STRIDE..(qy + 1) * STRIDE {
                    for x in qx * STRIDE..(qx + 1) * STRIDE {
                        hits += (m.get(x, y) == GRIPPER) as usize;
                    }
                }
                let frac = hits as f64 / (STRIDE * STRIDE) as f64;
                data.push(T::c(alpha_min + (1.0 - alpha_min) * frac));
            }
        }
    }
    Tensor::from_vec(&[masks.len(), 1, qh, qw], data).expect("attention shape")
}

/// Unnormalized Gaussian peaks (max 1) at each tip: `2×H/4×W/4`,
/// channel 0 left, channel 1 right.
pub fn render_target<T: Scalar>(tips: &TipPair, height: usize, width: usize, sigma: f64) -> Tensor<T> {
    let (qh, qw) = (height / STRIDE, width / STRIDE);
    let mut data = Vec::with_capacity(2 * qh * qw);
    for p in [tips.left, tips.right] {
        let (cu, cv) = (p.x / STRIDE as f64, p.y / STRIDE as f64);
        for v in 0..qh {
            for u in 0..qw {
                let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                data.push(T::c((-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    Tensor::from_vec(&[2, qh, qw], data).expect("target shape")
}

/// Stacks per-frame targets into `N×2×H/4×W/4`.
pub fn render_targets<T: Scalar>(tips: &[TipPair], height: usize, width: usize, sigma: f64) -> Tensor<T> {
    let (qh, qw) = (height / STRIDE, width / STRIDE);
    let mut data = Vec::with_capacity(tips.len() * 2 * qh * qw);
    for t in tips {
        data.extend(render_target::<T>(t, height, width, sigma).into_data());
    }
    Tensor::from_vec(&[tips.len(), 2, qh, qw], data).expect("targets shape")
}

/// Ground-truth coordinates as `N×2×2` (`[left.x, left.y, right.x, right.y]` per frame).
pub fn coords_tensor<T: Scalar>(tips: &[TipPair]) -> Tensor<T> {
    let data = tips
        .iter()
        .flat_map(|t| [t.left.x, t.left.y, t.right.x, t.right.y])
        .map(T::c)
        .collect();
    Tensor::from_vec(&[tips.len(), 2, 2], data).expect("coords shape")
}

pub fn tips_from_coords<T: Scalar>(coords: &[T]) -> TipPair {
    let v: Vec<f64> = coords.iter().map(|c| c.to_f64().unwrap()).collect();
    TipPair::new(Point::new(v[0], v[1]), Point::new(v[2], v[3]))
}

/// Differentiable decode: spatial softmax of `heatmap / tau`, expected grid
/// position, scaled to full resolution. Returns `N×2×2`.
pub fn soft_argmax<T: Scalar>(g: &mut Graph<T>, heatmap: Var, tau: f64) -> Result<Var, TensorError> {
    let p = g.spatial_softmax(heatmap, tau)?;
    let c = g.expected_coords(p)?;
    Ok(g.scale(c, STRIDE as f64))
}

/// Argmax decode of one `2×h×w` heatmap with a quarter-cell shift toward the
/// larger neighbor on each axis.
pub fn hard_decode<T: Scalar>(heatmap: &[T], qh: usize, qw: usize) -> TipPair {
    assert_eq!(heatmap.len(), 2 * qh * qw, "heatmap size");
    let decode = |plane: &[T]| {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        let (row, col) = (best / qw, best % qw);
        let mut x = col as f64;
        let mut y = row as f64;
        let at = |r: usize, c: usize| plane[r * qw + c];
        if col > 0 && col + 1 < qw {
            let (l, r) = (at(row, col - 1), at(row, col + 1));
            if r > l {
                x += 0.25;
            } else if l > r {
                x -= 0.25;
            }
        }
        if row > 0 && row + 1 < qh {
            let (u, d) = (at(row - 1, col), at(row + 1, col));
            if d > u {
                y += 0.25;
            } else if u > d {
                y -= 0.25;
            }
        }
        Point::new(x * STRIDE as f64, y * STRIDE as f64)
    };
    TipPair::new(decode(&heatmap[..qh * qw]), decode(&heatmap[qh * qw..]))
}

pub const L1_WEIGHT: f64 = 0.1;
pub const MSE_WEIGHT: f64 = 100.0;

/// `0.1 · L1(coords) + 100 · MSE(heatmap)`.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_heatmap: Var,
    target_heatmap: &Tensor<T>,
    pred_coords: Var,
    gt_coords: &Tensor<T>,
) -> Result<Var, TensorError> {
    let l1 = g.l1_loss(pred_coords, gt_coords)?;
    let mse = g.mse_loss(pred_heatmap, target_heatmap)?;
    let a = g.scale(l1, L1_WEIGHT);
    let b = g.scale(mse, MSE_WEIGHT);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SHAFT, WRIST};

    fn mask_from(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> PartMask {
        let labels = (0..width * height).map(|i| f(i % width, i / width)).collect();
        PartMask::new(width, height, labels).unwrap()
    }

    #[test]
    fn one_hot_partition_and_inverse() {
        let m = mask_from(16, 16, |x, y| ((x + 3 * y) % 4) as u8);
        let t = encode_input::<f32>(&[&m]);
        assert_eq!(t.shape(), &[1, 4, 16, 16]);
        let d = t.data();
        for i in 0..256 {
            let vals: Vec<f32> = (0..4).map(|c| d[c * 256 + i]).collect();
            assert_eq!(vals.iter().sum::<f32>(), 1.0);
            let argmax = vals.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(argmax as u8, m.labels()[i]);
        }
        let g = mask_from(16, 16, |_, _| GRIPPER);
        assert_eq!(encode_input::<f32>(&[&g]).data()[3 * 256], 1.0);
    }

    #[test]
    fn attention_extremes_and_range() {
        let none = mask_from(32, 16, |_, _| SHAFT);
        assert!(attention_map::<f64>(&[&none], 0.1).data().iter().all(|&v| v == 0.1));
        let all = mask_from(32, 16, |_, _| GRIPPER);
        assert!(attention_map::<f64>(&[&all], 0.1).data().iter().all(|&v| v == 1.0));
        let half = mask_from(32, 16, |x, _| if x % 2 == 0 { GRIPPER } else { WRIST });
        let a = attention_map::<f64>(&[&half], 0.2);
        assert_eq!(a.shape(), &[1, 1, 4, 8]);
        assert!(a.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn target_peak_and_decay() {
        let tips = TipPair::new(Point::new(40.0, 24.0), Point::new(100.0, 60.0));
        let t = render_target::<f64>(&tips, 128, 160, 2.0);
        assert_eq!(t.shape(), &[2, 32, 40]);
        assert_eq!(t.data()[6 * 40 + 10], 1.0);
        // 6σ = 12 cells away
        assert!(t.data()[6 * 40 + 22] < 1.6e-8);
        assert!(t.data().iter().all(|&v| v <= 1.0));
        let off = render_target::<f64>(&TipPair::new(Point::new(41.0, 25.0), Point::new(3.0, 3.0)), 128, 160, 2.0);
        assert!(off.data()[..32 * 40].iter().all(|&v| v < 1.0));
    }

    #[test]
    fn hard_decode_isolated_peak_and_refinement() {
        let (qh, qw) = (8, 10);
        let mut hm = vec![0.0f64; 2 * qh * qw];
        hm[3 * qw + 5] = 1.0;
        hm[qh * qw + 2 * qw + 7] = 1.0;
        hm[qh * qw + 2 * qw + 8] = 0.5;
        let t = hard_decode(&hm, qh, qw);
        assert_eq!(t.left, Point::new(20.0, 12.0));
        assert_eq!(t.right, Point::new(29.0, 8.0));
    }

    #[test]
    fn hard_decode_ties_prefer_top_left() {
        let (qh, qw) = (4, 4);
        let mut hm = vec![0.0f32; 2 * qh * qw];
        hm[qw + 2] = 1.0;
        hm[2 * qw + 1] = 1.0;
        assert_eq!(hard_decode(&hm, qh, qw).left, Point::new(8.0, 4.0));
    }

    #[test]
    fn soft_argmax_concentrated_and_uniform() {
        let (qh, qw) = (6, 8);
        let mut g = Graph::<f64>::new();
        let mut hm = vec![0.0; 2 * qh * qw];
        hm[4 * qw + 3] = 1.0;
        let h = g.constant(Tensor::from_vec(&[1, 2, qh, qw], hm).unwrap());
        let c = soft_argmax(&mut g, h, 1e-3).unwrap();
        let v = g.value(c).data();
        assert!((v[0] - 12.0).abs() < 1e-6 && (v[1] - 16.0).abs() < 1e-6);
        // second channel is constant: grid centroid
        assert!((v[2] - 4.0 * 3.5).abs() < 1e-9 && (v[3] - 4.0 * 2.5).abs() < 1e-9);
    }

    #[test]
    fn loss_weights() {
        let tips = [TipPair::new(Point::new(40.0, 24.0), Point::new(80.0, 64.0))];
        let target = render_targets::<f64>(&tips, 128, 160, 2.0);
        let gt = coords_tensor::<f64>(&tips);
        let mut g = Graph::new();
        let h = g.param(target.clone());
        let exact = g.param(gt.clone());
        let l = composite_loss(&mut g, h, &target, exact, &gt).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let shifted = Tensor::from_vec(&[1, 2, 2], gt.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let c = g.param(shifted);
        let l = composite_loss(&mut g, h, &target, c, &gt).unwrap();
        assert!((g.value(l).item() - 0.1).abs() < 1e-12);
        assert_eq!((L1_WEIGHT, MSE_WEIGHT), (0.1, 100.0));
    }
}
