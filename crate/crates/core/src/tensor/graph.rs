//! Wengert-list autodiff. Nodes are appended after their parents, so walking
//! the list backwards is a reverse topological order and each node is
//! visited once.

use rayon::prelude::*;

use super::conv::{self, ConvGeom};
use super::{lane_dot_by, lane_sum, shape_err, Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Smallest slice handed to one thread by elementwise kernels.
const MIN_PAR: usize = 1 << 14;

/// `f` applied elementwise in parallel; order-independent, so results do not
/// depend on the thread count.
fn par_map<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync + Send) -> Vec<T> {
    x.par_iter().with_min_len(MIN_PAR).map(|&v| f(v)).collect()
}

fn par_zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    a.par_iter().zip(b).with_min_len(MIN_PAR).map(|(&x, &y)| f(x, y)).collect()
}

/// Per-plane reduction over NCHW data, then summed per channel in sample
/// order.
fn channel_sums<T: Scalar>(planes: usize, c: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    let per: Vec<T> = (0..planes).into_par_iter().map(f).collect();
    let mut out = vec![T::zero(); c];
    for (i, v) in per.into_iter().enumerate() {
        out[i % c] += v;
    }
    out
}

/// Calls `f(plane index, output plane)` for every `hw`-sized plane of `out`.
fn par_planes<T: Scalar>(out: &mut [T], hw: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    let min = (MIN_PAR / hw.max(1)).max(1);
    out.par_chunks_mut(hw).with_min_len(min).enumerate().for_each(|(i, p)| f(i, p));
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics from a train-mode batch norm, for running
/// estimate updates. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Bilinear sampling table for one axis (align-corners=false).
#[derive(Debug, Clone)]
struct AxisMap<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

impl<T: Scalar> AxisMap<T> {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut m = Self {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            m.lo.push(lo);
            m.hi.push(hi);
            m.frac.push(T::c(src - lo as f64));
        }
        m
    }
}

/// `(x - mean[c]) * inv_std[c]` over NCHW planes of `hw` elements.
fn normalize<T: Scalar>(x: &[T], hw: usize, mean: &[T], inv_std: &[T]) -> Vec<T> {
    let c = mean.len();
    let mut out = vec![T::zero(); x.len()];
    par_planes(&mut out, hw, |i, dst| {
        let (m, k) = (mean[i % c], inv_std[i % c]);
        let src = &x[i * hw..(i + 1) * hw];
        dst.iter_mut().zip(src).for_each(|(o, &v)| *o = (v - m) * k);
    });
    out
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, T),
    Resample {
        input: Var,
        rows: AxisMap<T>,
        cols: AxisMap<T>,
    },
    Concat(Vec<Var>),
    SpatialSoftmax {
        input: Var,
        tau: T,
    },
    ExpectedCoords(Var),
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => t
            .data_mut()
            .par_iter_mut()
            .zip(&g)
            .with_min_len(MIN_PAR)
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(Tensor::from_vec(shape, g).expect("gradient shape")),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding a trainable value.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that needs no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4()
    }

    /// Cross-correlation with zero "same" padding (`k / 2`) and stride 1 or 2.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (n, cin, h, w) = self.dims4(input)?;
        let (cout, wcin, kh, kw) = self.dims4(weight)?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(input), self.shape(weight)),
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: format!("stride {stride} not in {{1, 2}}"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
        };
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[n, cout, geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let ng = self.ng(&parents);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.dims4(input)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batchnorm2d", format!("{c} channels vs affine parameters")));
        }
        Ok((n, c, h * w))
    }

    fn push_bn(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let shape = self.shape(input).to_vec();
        let hw = shape[2] * shape[3];
        let c = shape[1];
        let mut out = vec![T::zero(); xhat.len()];
        par_planes(&mut out, hw, |i, dst| {
            let (gc, bc) = (g[i % c], b[i % c]);
            let src = &xhat[i * hw..(i + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(o, &xh)| *o = gc * xh + bc);
        });
        let ng = self.ng(&[input, gamma, beta]);
        self.push(
            Tensor::from_vec(&shape, out).expect("bn shape"),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// Train-mode batch norm over N×H×W per channel.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.check_affine(input, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let x = self.value(input).data();
        let m = n * hw;
        let plane = |i: usize| &x[i * hw..(i + 1) * hw];
        let mut mean = channel_sums(n * c, c, |i| lane_sum(plane(i)));
        let mt = T::c(m as f64);
        mean.iter_mut().for_each(|v| *v = *v / mt);
        let var = channel_sums(n * c, c, |i| {
            let mc = mean[i % c];
            lane_dot_by(plane(i), plane(i), |v, _| (v - mc) * (v - mc))
        });
        let inv_std: Vec<T> = var.iter().map(|&v| (v / mt + T::c(eps)).sqrt().recip()).collect();
        let xhat = normalize(x, hw, &mean, &inv_std);
        let unbiased = T::c((m as f64 - 1.0).max(1.0));
        let stats = BatchStats {
            var: var.iter().map(|&v| v / unbiased).collect(),
            mean,
        };
        Ok((self.push_bn(input, gamma, beta, xhat, inv_std, true), stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, hw) = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics length"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| (v + T::c(eps)).sqrt().recip()).collect();
        let xhat = normalize(self.value(input).data(), hw, running_mean, &inv_std);
        Ok(self.push_bn(input, gamma, beta, xhat, inv_std, false))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = par_map(t.data(), |v| v.max(T::zero()));
        let value = Tensor::from_vec(t.shape(), out).unwrap();
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = par_zip(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::from_vec(self.shape(a), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Elementwise product. `b` may have the same shape as `a` or, for rank-4
    /// `a`, a single channel broadcast across `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = if sa == sb {
            false
        } else if sa.len() == 4 && sb.len() == 4 && sb[1] == 1 && sa[0] == sb[0] && sa[2..] == sb[2..] {
            true
        } else {
            return Err(shape_err("mul", format!("{sa:?} vs {sb:?}")));
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = if broadcast {
            let (c, hw) = (sa[1], sa[2] * sa[3]);
            av.iter()
                .enumerate()
                .map(|(i, &x)| x * bv[(i / (c * hw)) * hw + i % hw])
                .collect()
        } else {
            par_zip(av, bv, |x, y| x * y)
        };
        let value = Tensor::from_vec(&sa, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, broadcast }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::c(factor);
        let t = self.value(x);
        let value = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v * f).collect()).unwrap();
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, f), ng)
    }

    /// Bilinear resize to `out_h × out_w` with the align-corners=false
    /// convention: output cell `o` samples source coordinate
    /// `(o + 0.5) * in / out - 0.5`, clamped at 0 and at the last cell.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input)?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("resize_bilinear", "empty output"));
        }
        let rows = AxisMap::<T>::new(h, out_h);
        let cols = AxisMap::<T>::new(w, out_w);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        par_planes(&mut out, out_h * out_w, |i, dst| {
            let plane = &x[i * h * w..(i + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        });
        let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        let ng = self.ng(&[input]);
        Ok(self.push(value, Op::Resample { input, rows, cols }, ng))
    }

    /// Resize by a power-of-two factor in {1/8, 1/4, 1/2, 1, 2, 4, 8}.
    pub fn bilinear_resample(&mut self, input: Var, factor: f64) -> Result<Var> {
        let (_, _, h, w) = self.dims4(input)?;
        let size = |len: usize| -> Result<usize> {
            let f = factor * len as f64;
            if [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0].contains(&factor) && f.fract() == 0.0 && f >= 1.0 {
                Ok(f as usize)
            } else {
                Err(TensorError::Invalid {
                    op: "bilinear_resample",
                    detail: format!("factor {factor} on length {len}"),
                })
            }
        };
        let (oh, ow) = (size(h)?, size(w)?);
        if factor == 1.0 {
            return Ok(input);
        }
        self.resize_bilinear(input, oh, ow)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.dims4(first)?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.dims4(v)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(first), self.shape(v))));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        let ng = self.ng(inputs);
        Ok(self.push(value, Op::Concat(inputs.to_vec()), ng))
    }

    /// Softmax of `x / tau` over each H×W plane.
    pub fn spatial_softmax(&mut self, input: Var, tau: f64) -> Result<Var> {
        let (_, _, h, w) = self.dims4(input)?;
        if !(tau > 0.0) {
            return Err(TensorError::Invalid {
                op: "spatial_softmax",
                detail: format!("temperature {tau} must be positive"),
            });
        }
        let t = T::c(tau);
        let x = self.value(input);
        let mut out = vec![T::zero(); x.numel()];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s - max) / t).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let ng = self.ng(&[input]);
        Ok(self.push(value, Op::SpatialSoftmax { input, tau: t }, ng))
    }

    /// Expected `(column, row)` of each plane under a distribution: N×C×2.
    pub fn expected_coords(&mut self, probs: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(probs)?;
        let p = self.value(probs).data();
        let mut out = Vec::with_capacity(n * c * 2);
        for plane in p.chunks(h * w) {
            let (mut ex, mut ey) = (T::zero(), T::zero());
            for (i, &v) in plane.iter().enumerate() {
                ex += v * T::c((i % w) as f64);
                ey += v * T::c((i / w) as f64);
            }
            out.push(ex);
            out.push(ey);
        }
        let value = Tensor::from_vec(&[n, c, 2], out)?;
        let ng = self.ng(&[probs]);
        Ok(self.push(value, Op::ExpectedCoords(probs), ng))
    }

    fn check_target(&self, op: &'static str, pred: Var, target: &Tensor<T>) -> Result<()> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        Ok(())
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("l1_loss", pred, target)?;
        let p = self.value(pred).data();
        let n = T::c(p.len() as f64);
        let v = p.iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::L1 {
                pred,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared difference against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("mse_loss", pred, target)?;
        let p = self.value(pred).data();
        let n = T::c(p.len() as f64);
        let v = p.iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    /// `Σ w·x`, reducing any tensor to a scalar with fixed weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        self.check_target("weighted_sum", input, weights)?;
        let v = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let ng = self.ng(&[input]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar output. Gradients are kept for leaves only.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        if self.value(output).numel() != 1 {
            return Err(shape_err("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let gy = gy.data();
            self.backprop_node(node, gy, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if self.wants(v) {
            add_into(&mut grads[v.0], self.shape(v), g);
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gy,
                    self.wants(*input),
                );
                if let Some(dx) = cg.dx {
                    self.send(grads, *input, dx);
                }
                self.send(grads, *weight, cg.dw);
                if let Some(b) = bias {
                    self.send(grads, *b, cg.db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*input);
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let g = self.value(*gamma).data();
                let r = |i: usize| i * hw..(i + 1) * hw;
                let dgamma = channel_sums(n * c, c, |i| lane_dot_by(&gy[r(i)], &xhat[r(i)], |d, xh| d * xh));
                let dbeta = channel_sums(n * c, c, |i| lane_sum(&gy[r(i)]));
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let m = T::c((n * hw) as f64);
                    par_planes(&mut dx, hw, |i, d| {
                        let (gp, xp) = (&gy[r(i)], &xhat[r(i)]);
                        let ch = i % c;
                        let scale = g[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mb, mg) = (dbeta[ch] / m, dgamma[ch] / m);
                            for ((d, &gv), &xh) in d.iter_mut().zip(gp).zip(xp) {
                                *d = scale * (gv - mb - xh * mg);
                            }
                        } else {
                            d.iter_mut().zip(gp).for_each(|(d, &gv)| *d = scale * gv);
                        }
                    });
                    self.send(grads, *input, dx);
                }
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = par_zip(gy, xv, |d, v| if v > T::zero() { d } else { T::zero() });
                self.send(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, gy.to_vec());
                self.send(grads, *b, gy.to_vec());
            }
            Op::Mul { a, b, broadcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if !broadcast {
                    if self.wants(*a) {
                        self.send(grads, *a, gy.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                    }
                    if self.wants(*b) {
                        self.send(grads, *b, gy.iter().zip(av).map(|(&d, &x)| d * x).collect());
                    }
                } else {
                    let sa = self.shape(*a);
                    let (c, hw) = (sa[1], sa[2] * sa[3]);
                    let bidx = |i: usize| (i / (c * hw)) * hw + i % hw;
                    if self.wants(*a) {
                        self.send(grads, *a, gy.iter().enumerate().map(|(i, &d)| d * bv[bidx(i)]).collect());
                    }
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); bv.len()];
                        for (i, (&d, &x)) in gy.iter().zip(av).enumerate() {
                            db[bidx(i)] += d * x;
                        }
                        self.send(grads, *b, db);
                    }
                }
            }
            Op::Scale(x, f) => self.send(grads, *x, gy.iter().map(|&d| d * *f).collect()),
            Op::Resample { input, rows, cols } => {
                let (_, _, h, w) = self.dims4(*input).unwrap();
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                par_planes(&mut dx, h * w, |i, dplane| {
                    let gplane = &gy[i * oh * ow..(i + 1) * oh * ow];
                    for oy in 0..oh {
                        let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                        for ox in 0..ow {
                            let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                            let d = gplane[oy * ow + ox];
                            let (top, bot) = (d * (T::one() - fy), d * fy);
                            dplane[y0 * w + x0] += top * (T::one() - fx);
                            dplane[y0 * w + x1] += top * fx;
                            dplane[y1 * w + x0] += bot * (T::one() - fx);
                            dplane[y1 * w + x1] += bot * fx;
                        }
                    }
                });
                self.send(grads, *input, dx);
            }
            Op::Concat(inputs) => {
                let shape = node.value.shape();
                let (n, total_c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            g.extend_from_slice(&gy[start..start + c * hw]);
                        }
                        self.send(grads, v, g);
                    }
                    offset += c;
                }
            }
            Op::SpatialSoftmax { input, tau } => {
                let shape = node.value.shape();
                let hw = shape[2] * shape[3];
                let p = node.value.data();
                let mut dx = vec![T::zero(); p.len()];
                for ((dplane, pplane), gplane) in dx.chunks_mut(hw).zip(p.chunks(hw)).zip(gy.chunks(hw)) {
                    let dot: T = pplane.iter().zip(gplane).map(|(&a, &b)| a * b).sum();
                    for ((d, &pv), &g) in dplane.iter_mut().zip(pplane).zip(gplane) {
                        *d = pv * (g - dot) / *tau;
                    }
                }
                self.send(grads, *input, dx);
            }
            Op::ExpectedCoords(probs) => {
                let (_, _, h, w) = self.dims4(*probs).unwrap();
                let mut dp = vec![T::zero(); self.value(*probs).numel()];
                for (plane, g) in dp.chunks_mut(h * w).zip(gy.chunks(2)) {
                    for (i, d) in plane.iter_mut().enumerate() {
                        *d = g[0] * T::c((i % w) as f64) + g[1] * T::c((i / w) as f64);
                    }
                }
                self.send(grads, *probs, dp);
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred).data();
                let k = gy[0] / T::c(p.len() as f64);
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| {
                        let diff = a - b;
                        if diff > T::zero() {
                            k
                        } else if diff < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(grads, *pred, d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let k = gy[0] * T::c(2.0 / p.len() as f64);
                self.send(grads, *pred, p.iter().zip(target).map(|(&a, &b)| k * (a - b)).collect());
            }
            Op::WeightedSum { input, weights } => {
                self.send(grads, *input, weights.iter().map(|&w| w * gy[0]).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn identity_and_ones_kernels() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 4], (0..12).map(f64::from).collect()));
        let w = g.param(t(&[1, 1, 1, 1], vec![1.0]));
        let b = g.param(t(&[1], vec![0.0]));
        let y = g.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let k = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(ones, k, None, 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2 * 5 + 2], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[2], 6.0);

        let y2 = g.conv2d(ones, k, None, 2).unwrap();
        assert_eq!(g.shape(y2), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.param(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1), Err(TensorError::Shape { .. })));
        let even = g.param(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.conv2d(x, even, None, 1).is_err());
    }

    #[test]
    fn batchnorm_standardizes_and_rejects_single_sample() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 7919) % 97) as f64 * 0.3 - 4.0).collect();
        let x = g.constant(t(&[2, 3, 4, 4], data));
        let gamma = g.param(Tensor::full(&[3], 1.0));
        let beta = g.param(Tensor::zeros(&[3]));
        let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        let gamma2 = g.param(Tensor::full(&[3], 2.0));
        let beta2 = g.param(Tensor::full(&[3], 3.0));
        let (y2, _) = g.batchnorm_train(x, gamma2, beta2, 1e-5).unwrap();
        for (out, m_want, v_want) in [(y, 0.0, 1.0), (y2, 3.0, 4.0)] {
            let v = g.value(out).data();
            for ch in 0..3 {
                let vals: Vec<f64> = (0..2)
                    .flat_map(|s| v[(s * 3 + ch) * 16..(s * 3 + ch + 1) * 16].to_vec())
                    .collect();
                let mean = vals.iter().sum::<f64>() / 32.0;
                let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 32.0;
                assert!((mean - m_want).abs() < 1e-5);
                assert!((var - v_want).abs() < 1e-4 * v_want);
            }
        }
        let single = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert_eq!(
            g.batchnorm_train(single, gamma, beta, 1e-5).unwrap_err(),
            TensorError::BatchTooSmall(1)
        );
    }

    #[test]
    fn relu_softmax_and_coords() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], vec![-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let mut hot = vec![0.0; 12];
        hot[7] = 1.0;
        let h = g.constant(t(&[1, 1, 3, 4], hot));
        let p = g.spatial_softmax(h, 0.01).unwrap();
        assert!(g.value(p).data()[7] >= 1.0 - 1e-9);
        let c = g.expected_coords(p).unwrap();
        let xy = g.value(c).data();
        assert!((xy[0] - 3.0).abs() < 1e-9 && (xy[1] - 1.0).abs() < 1e-9);
        assert!(g.spatial_softmax(h, 0.0).is_err());
    }

    #[test]
    fn resample_upsample_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 8, 8], 3.5f64));
        for f in [0.25, 0.5, 2.0, 4.0] {
            let y = g.bilinear_resample(x, f).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        }
        assert!(g.bilinear_resample(x, 0.3).is_err());
        let down = g.constant(t(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]));
        let y = g.bilinear_resample(down, 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn losses_on_known_values() {
        let mut g = Graph::new();
        let p = g.param(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let target = t(&[4], vec![0.0, 1.0, 2.0, 3.0]);
        let l1 = g.l1_loss(p, &target).unwrap();
        assert_eq!(g.value(l1).item(), 1.0);
        let pv = g.value(p).clone();
        let same = g.l1_loss(p, &pv).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let mse = g.mse_loss(p, &target).unwrap();
        assert_eq!(g.value(mse).item(), 1.0);
        assert!(g.mse_loss(p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn backward_visits_shared_nodes_once_and_sums() {
        // y = x * x (same var twice) => dy/dx = 2x
        let mut g = Graph::new();
        let x = g.param(t(&[3], vec![1.0, -2.0, 0.5]));
        let y = g.mul(x, x).unwrap();
        let s = g.weighted_sum(y, &Tensor::full(&[3], 1.0)).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
        assert!(g.backward(y).is_err());
    }
}
