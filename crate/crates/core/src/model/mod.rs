//! Small multi-resolution heatmap network for gripper tip localization.
//!
//! Layout:
//! - stem: 3×3 stride-2 conv to 1/2 resolution
//! - stage 1: branches at 1/2 and 1/4 (the latter from a stride-2
//!   transition), two residual blocks each, one cross-resolution exchange
//! - stage 2: adds 1/8 and 1/16 branches, two residual blocks each, one
//!   exchange across all four
//! - fusion: every level resampled to 1/4, concatenated, 1×1 conv + BN + ReLU
//! - the fused feature is multiplied by the gripper attention map and fed to
//!   a 3×3 conv + BN + ReLU + 1×1 conv head producing two heatmaps
//! - soft-argmax turns the heatmaps into coordinates

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PartMask, TipPair, NUM_CLASSES};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{BatchStats, Graph, Scalar, Tensor, TensorError, Var};

pub mod heatmap;

pub use heatmap::{
    attention_map, composite_loss, coords_tensor, encode_input, hard_decode, render_target, render_targets,
    soft_argmax, tips_from_coords,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input is {got_w}x{got_h}, model expects {want_w}x{want_h}")]
    InputSize {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the 1/2 branch; the 1/4, 1/8, 1/16 branches use 2×, 4×, 8×.
    pub base_channels: usize,
    pub fused_channels: usize,
    /// Target Gaussian width in quarter-resolution cells.
    pub sigma: f64,
    /// Soft-argmax temperature.
    pub tau: f64,
    /// Attention floor outside the gripper.
    pub alpha_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 160,
            base_channels: 16,
            fused_channels: 64,
            sigma: 2.0,
            tau: 0.1,
            alpha_min: 0.1,
        }
    }
}

impl ModelConfig {
    /// A tiny configuration used for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 32,
            base_channels: 2,
            fused_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad("height and width must be positive multiples of 16");
        }
        if self.base_channels == 0 || self.fused_channels == 0 {
            return bad("channel counts must be positive");
        }
        if !(self.sigma > 0.0) || !(self.tau > 0.0) {
            return bad("sigma and tau must be positive");
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return bad("alpha_min must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn branch_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn quarter_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are returned for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// Bias-free conv followed by batch norm.
#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    weight: usize,
    stride: usize,
    norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    first: ConvNorm,
    second: ConvNorm,
}

/// 1×1 projection between branches of an exchange.
#[derive(Debug, Clone, Copy)]
struct Link {
    target: usize,
    source: usize,
    proj: ConvNorm,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Vec<ResBlock>>,
    links: Vec<Link>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvNorm,
    to_quarter: ConvNorm,
    stage1: Stage,
    to_eighth: ConvNorm,
    to_sixteenth: ConvNorm,
    stage2: Stage,
    fuse: ConvNorm,
    head_conv: ConvNorm,
    head_out_w: usize,
    head_out_b: usize,
}

/// Named parameter registry used while laying out the network.
struct Builder<T> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stat_names: Vec<String>,
    stats: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// He-uniform initialization over the fan-in.
    fn conv_weight(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> usize {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| T::c(self.rng.gen_range(-bound..bound)))
            .collect();
        self.param(format!("{name}.weight"), Tensor::from_vec(&[cout, cin, k, k], data).unwrap())
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stat_names.push(name.to_string());
        self.stats.push((Tensor::zeros(&[c]), Tensor::full(&[c], T::one())));
        Norm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvNorm {
        ConvNorm {
            weight: self.conv_weight(&format!("{name}.conv"), cout, cin, k),
            stride,
            norm: self.norm(&format!("{name}.bn"), cout),
        }
    }

    fn stage(&mut self, name: &str, channels: &[usize]) -> Stage {
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                (0..2)
                    .map(|i| ResBlock {
                        first: self.conv_norm(&format!("{name}.branch{b}.block{i}.a"), c, c, 3, 1),
                        second: self.conv_norm(&format!("{name}.branch{b}.block{i}.b"), c, c, 3, 1),
                    })
                    .collect()
            })
            .collect();
        let mut links = Vec::new();
        for target in 0..channels.len() {
            for source in 0..channels.len() {
                if target != source {
                    let proj = self.conv_norm(
                        &format!("{name}.exchange.{source}to{target}"),
                        channels[source],
                        channels[target],
                        1,
                        1,
                    );
                    links.push(Link { target, source, proj });
                }
            }
        }
        Stage { blocks, links }
    }
}

/// Result of one forward pass. The graph is kept so a loss can be attached
/// and differentiated.
pub struct Forward<T> {
    pub graph: Graph<T>,
    pub heatmap: Var,
    pub coords: Var,
    pub pyramid: [Var; 4],
    pub fused: Var,
    /// Graph leaf of every parameter, in registry order.
    pub params: Vec<Var>,
    /// Batch statistics per norm layer (train mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

/// Prediction for one mask.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    /// `2×H/4×W/4`.
    pub heatmap: Tensor<T>,
    /// Soft-argmax coordinates.
    pub tips: TipPair,
    /// Argmax-with-refinement coordinates.
    pub hard_tips: TipPair,
}

#[derive(Debug, Clone)]
pub struct ToolTipNet<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stat_names: Vec<String>,
    stats: Vec<(Tensor<T>, Tensor<T>)>,
}

struct Ctx<'a, T> {
    g: Graph<T>,
    vars: Vec<Var>,
    mode: Mode,
    stats: &'a [(Tensor<T>, Tensor<T>)],
    batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv_norm(&mut self, x: Var, cn: &ConvNorm) -> Result<Var, TensorError> {
        let y = self.g.conv2d(x, self.vars[cn.weight], None, cn.stride)?;
        self.norm(y, &cn.norm)
    }

    fn norm(&mut self, x: Var, n: &Norm) -> Result<Var, TensorError> {
        let (gamma, beta) = (self.vars[n.gamma], self.vars[n.beta]);
        match self.mode {
            Mode::Train => {
                let (y, st) = self.g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                self.batch_stats.push((n.stats, st));
                Ok(y)
            }
            Mode::Eval => {
                let (m, v) = &self.stats[n.stats];
                self.g.batchnorm_eval(x, gamma, beta, m.data(), v.data(), BN_EPS)
            }
        }
    }

    fn conv_norm_relu(&mut self, x: Var, cn: &ConvNorm) -> Result<Var, TensorError> {
        let y = self.conv_norm(x, cn)?;
        Ok(self.g.relu(y))
    }

    fn res_block(&mut self, x: Var, b: &ResBlock) -> Result<Var, TensorError> {
        let y = self.conv_norm_relu(x, &b.first)?;
        let y = self.conv_norm(y, &b.second)?;
        let y = self.g.add(y, x)?;
        Ok(self.g.relu(y))
    }

    /// Runs the residual blocks of each branch, then adds every other
    /// branch into each target after a 1×1 projection and resampling.
    fn stage(&mut self, inputs: &[Var], stage: &Stage) -> Result<Vec<Var>, TensorError> {
        let mut outs = Vec::with_capacity(inputs.len());
        for (x, blocks) in inputs.iter().zip(&stage.blocks) {
            let mut y = *x;
            for b in blocks {
                y = self.res_block(y, b)?;
            }
            outs.push(y);
        }
        let mut fused = Vec::with_capacity(outs.len());
        for target in 0..outs.len() {
            let mut acc = outs[target];
            for link in stage.links.iter().filter(|l| l.target == target) {
                let src = outs[link.source];
                let factor = 2f64.powi(link.source as i32 - target as i32);
                // project at the lower of the two resolutions
                let moved = if factor > 1.0 {
                    let p = self.conv_norm(src, &link.proj)?;
                    self.g.bilinear_resample(p, factor)?
                } else {
                    let r = self.g.bilinear_resample(src, factor)?;
                    self.conv_norm(r, &link.proj)?
                };
                acc = self.g.add(acc, moved)?;
            }
            fused.push(self.g.relu(acc));
        }
        Ok(fused)
    }
}

impl<T: Scalar> ToolTipNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.branch_channels();
        let cf = config.fused_channels;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        };
        let stem = b.conv_norm("stem", NUM_CLASSES, c1, 3, 2);
        let to_quarter = b.conv_norm("transition1", c1, c2, 3, 2);
        let stage1 = b.stage("stage1", &[c1, c2]);
        let to_eighth = b.conv_norm("transition2.eighth", c2, c3, 3, 2);
        let to_sixteenth = b.conv_norm("transition2.sixteenth", c3, c4, 3, 2);
        let stage2 = b.stage("stage2", &[c1, c2, c3, c4]);
        let fuse = b.conv_norm("fuse", c1 + c2 + c3 + c4, cf, 1, 1);
        let head_conv = b.conv_norm("head.hidden", cf, cf, 3, 1);
        // small output weights keep the initial heatmaps near zero
        let bound = 1e-3;
        let data = (0..2 * cf).map(|_| T::c(b.rng.gen_range(-bound..bound))).collect();
        let head_out_w = b.param("head.out.weight".into(), Tensor::from_vec(&[2, cf, 1, 1], data).unwrap());
        let head_out_b = b.param("head.out.bias".into(), Tensor::zeros(&[2]));
        let layout = Layout {
            stem,
            to_quarter,
            stage1,
            to_eighth,
            to_sixteenth,
            stage2,
            fuse,
            head_conv,
            head_out_w,
            head_out_b,
        };
        Ok(Self {
            config,
            layout,
            names: b.names,
            params: b.params,
            stat_names: b.stat_names,
            stats: b.stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.stats
    }

    fn check_input(&self, masks: &[&PartMask]) -> Result<(), ModelError> {
        for m in masks {
            if (m.width(), m.height()) != (self.config.width, self.config.height) {
                return Err(ModelError::InputSize {
                    want_w: self.config.width,
                    want_h: self.config.height,
                    got_w: m.width(),
                    got_h: m.height(),
                });
            }
        }
        if masks.is_empty() {
            return Err(ModelError::InvalidConfig("empty batch".into()));
        }
        Ok(())
    }

    /// Full forward pass: encode → backbone → fuse → attention → head → soft-argmax.
    pub fn forward(&self, masks: &[&PartMask], mode: Mode) -> Result<Forward<T>, ModelError> {
        let att = attention_map(masks, self.config.alpha_min);
        self.forward_with_attention(masks, mode, Some(att))
    }

    /// Forward pass with an explicit `N×1×H/4×W/4` attention map, or none.
    pub fn forward_with_attention(
        &self,
        masks: &[&PartMask],
        mode: Mode,
        attention: Option<Tensor<T>>,
    ) -> Result<Forward<T>, ModelError> {
        self.check_input(masks)?;
        let mut g = Graph::new();
        let vars = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut ctx = Ctx {
            g,
            vars,
            mode,
            stats: &self.stats,
            batch_stats: Vec::new(),
        };
        let x = ctx.g.constant(encode_input(masks));
        let pyramid = self.backbone(&mut ctx, x)?;
        let fused = self.fuse(&mut ctx, &pyramid)?;
        let att = attention.map(|a| ctx.g.constant(a));
        let heatmap = self.head(&mut ctx, fused, att)?;
        let coords = soft_argmax(&mut ctx.g, heatmap, self.config.tau)?;
        Ok(Forward {
            graph: ctx.g,
            heatmap,
            coords,
            pyramid,
            fused,
            params: ctx.vars,
            batch_stats: ctx.batch_stats,
        })
    }

    fn backbone(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<[Var; 4], TensorError> {
        let l = &self.layout;
        let half = ctx.conv_norm_relu(x, &l.stem)?;
        let quarter = ctx.conv_norm_relu(half, &l.to_quarter)?;
        let s1 = ctx.stage(&[half, quarter], &l.stage1)?;
        let eighth = ctx.conv_norm_relu(s1[1], &l.to_eighth)?;
        let sixteenth = ctx.conv_norm_relu(eighth, &l.to_sixteenth)?;
        let s2 = ctx.stage(&[s1[0], s1[1], eighth, sixteenth], &l.stage2)?;
        Ok([s2[0], s2[1], s2[2], s2[3]])
    }

    fn fuse(&self, ctx: &mut Ctx<'_, T>, pyramid: &[Var; 4]) -> Result<Var, TensorError> {
        let mut levels = Vec::with_capacity(4);
        for (i, &p) in pyramid.iter().enumerate() {
            // level i sits at 1/2^(i+1); bring it to 1/4
            let factor = 2f64.powi(i as i32 - 1);
            levels.push(ctx.g.bilinear_resample(p, factor)?);
        }
        let cat = ctx.g.concat_channels(&levels)?;
        ctx.conv_norm_relu(cat, &self.layout.fuse)
    }

    fn head(&self, ctx: &mut Ctx<'_, T>, fused: Var, attention: Option<Var>) -> Result<Var, TensorError> {
        let l = &self.layout;
        let gated = match attention {
            Some(a) => ctx.g.mul(fused, a)?,
            None => fused,
        };
        let hidden = ctx.conv_norm_relu(gated, &l.head_conv)?;
        ctx.g.conv2d(hidden, ctx.vars[l.head_out_w], Some(ctx.vars[l.head_out_b]), 1)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, batch_stats: &[(usize, BatchStats<T>)]) {
        let m = T::c(BN_MOMENTUM);
        for (idx, st) in batch_stats {
            let (mean, var) = &mut self.stats[*idx];
            for (r, &b) in mean.data_mut().iter_mut().zip(&st.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in var.data_mut().iter_mut().zip(&st.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }

    /// Eval-mode prediction for a batch of masks.
    pub fn predict_batch(&self, masks: &[&PartMask]) -> Result<Vec<Prediction<T>>, ModelError> {
        let fwd = self.forward(masks, Mode::Eval)?;
        let (qh, qw) = self.config.quarter_size();
        let hm = fwd.graph.value(fwd.heatmap).data();
        let coords = fwd.graph.value(fwd.coords).data();
        Ok((0..masks.len())
            .map(|s| {
                let plane = &hm[s * 2 * qh * qw..(s + 1) * 2 * qh * qw];
                Prediction {
                    heatmap: Tensor::from_vec(&[2, qh, qw], plane.to_vec()).unwrap(),
                    tips: tips_from_coords(&coords[s * 4..(s + 1) * 4]),
                    hard_tips: hard_decode(plane, qh, qw),
                }
            })
            .collect())
    }

    pub fn predict(&self, mask: &PartMask) -> Result<Prediction<T>, ModelError> {
        Ok(self.predict_batch(&[mask])?.remove(0))
    }

    fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut named: Vec<(String, &Tensor<T>)> = self.names.iter().cloned().zip(self.params.iter()).collect();
        for (name, (m, v)) in self.stat_names.iter().zip(&self.stats) {
            named.push((format!("{name}.running_mean"), m));
            named.push((format!("{name}.running_var"), v));
        }
        checkpoint::save(path, self.checkpoint_meta(), &named)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`save`](Self::save).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let (header, tensors) = checkpoint::load::<T>(path)?;
        let config: ModelConfig = serde_json::from_value(header.meta["model"].clone())
            .map_err(|e| CheckpointError::MetadataMismatch(format!("model config: {e}")))?;
        let mut net = Self::new(config, 0)?;
        net.assign(tensors)?;
        Ok(net)
    }

    /// Loads a checkpoint and insists it was written for `config`.
    pub fn load_expecting(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self, ModelError> {
        let net = Self::load(path)?;
        if net.config != *config {
            return Err(CheckpointError::MetadataMismatch(format!(
                "checkpoint config {:?} differs from expected {:?}",
                net.config, config
            ))
            .into());
        }
        Ok(net)
    }

    fn assign(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<(), ModelError> {
        let expected = self.params.len() + 2 * self.stats.len();
        if tensors.len() != expected {
            return Err(CheckpointError::MetadataMismatch(format!(
                "{} tensors stored, model has {expected}",
                tensors.len()
            ))
            .into());
        }
        let mut it = tensors.into_iter();
        let mismatch = |want: &str, got: &str| {
            ModelError::from(CheckpointError::MetadataMismatch(format!("expected {want}, found {got}")))
        };
        for (name, slot) in self.names.iter().zip(self.params.iter_mut()) {
            let (n, t) = it.next().unwrap();
            if &n != name || t.shape() != slot.shape() {
                return Err(mismatch(name, &n));
            }
            *slot = t;
        }
        for (name, (m, v)) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            for (suffix, slot) in [("running_mean", m), ("running_var", v)] {
                let (n, t) = it.next().unwrap();
                let want = format!("{name}.{suffix}");
                if n != want || t.shape() != slot.shape() {
                    return Err(mismatch(&want, &n));
                }
                *slot = t;
            }
        }
        Ok(())
    }

    /// Composite loss on a batch with the given ground truth.
    pub fn loss_graph(&self, masks: &[&PartMask], tips: &[TipPair], mode: Mode) -> Result<(Forward<T>, Var), ModelError> {
        let mut fwd = self.forward(masks, mode)?;
        let target = render_targets(tips, self.config.height, self.config.width, self.config.sigma);
        let gt = coords_tensor(tips);
        let loss = composite_loss(&mut fwd.graph, fwd.heatmap, &target, fwd.coords, &gt)?;
        Ok((fwd, loss))
    }
}

impl ToolTipNet<f64> {
    /// Finite-difference check of `∂objective/∂θ` on the listed
    /// `(param, element)` entries, in train mode. `objective` reduces a
    /// forward pass to a scalar. Each entry is differenced at every step in
    /// `steps` and scored by its best step, so a ReLU kink that falls inside
    /// one stencil does not count against the gradient. Returns the worst
    /// per-entry relative error.
    pub fn param_grad_check<F>(
        &self,
        masks: &[&PartMask],
        entries: &[(usize, usize)],
        steps: &[f64],
        objective: F,
    ) -> Result<f64, ModelError>
    where
        F: Fn(&mut Forward<f64>) -> Result<Var, TensorError>,
    {
        let run = |net: &Self| -> Result<(Forward<f64>, Var), ModelError> {
            let mut fwd = net.forward(masks, Mode::Train)?;
            let out = objective(&mut fwd)?;
            Ok((fwd, out))
        };
        let (fwd, out) = run(self)?;
        let grads = fwd.graph.backward(out)?;
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for &(p, i) in entries {
            let analytic = grads.get(fwd.params[p]).map_or(0.0, |g| g.data()[i]);
            let orig = self.params[p].data()[i];
            let mut eval = |v: f64| -> Result<f64, ModelError> {
                probe.params[p].data_mut()[i] = v;
                let (f, o) = run(&probe)?;
                Ok(f.graph.value(o).item())
            };
            let mut best = f64::INFINITY;
            for &step in steps {
                let numeric = (eval(orig + step)? - eval(orig - step)?) / (2.0 * step);
                best = best.min(crate::tensor::gradcheck::relative_error(analytic, numeric));
            }
            probe.params[p].data_mut()[i] = orig;
            worst = worst.max(best);
        }
        Ok(worst)
    }

    /// [`param_grad_check`](Self::param_grad_check) of the training loss.
    pub fn loss_grad_check(
        &self,
        masks: &[&PartMask],
        tips: &[TipPair],
        entries: &[(usize, usize)],
        steps: &[f64],
    ) -> Result<f64, ModelError> {
        let (h, w, sigma) = (self.config.height, self.config.width, self.config.sigma);
        let target = render_targets(tips, h, w, sigma);
        let gt = coords_tensor(tips);
        self.param_grad_check(masks, entries, steps, |f| {
            composite_loss(&mut f.graph, f.heatmap, &target, f.coords, &gt)
        })
    }

    /// Redraws the output conv at He scale. The default near-zero init leaves
    /// backbone gradients below what central differences resolve in f64.
    pub fn randomize_head_output(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &mut self.params[self.layout.head_out_w];
        let bound = (6.0 / self.config.fused_channels as f64).sqrt();
        w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    }

    /// Samples `count` entries spread round-robin over the parameters whose
    /// names satisfy `keep`.
    pub fn sample_entries_where(&self, count: usize, seed: u64, keep: impl Fn(&str) -> bool) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<usize> = (0..self.params.len()).filter(|&p| keep(&self.names[p])).collect();
        if pool.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|k| {
                let p = pool[k % pool.len()];
                (p, rng.gen_range(0..self.params[p].numel()))
            })
            .collect()
    }

    /// Samples `count` parameter entries spread across all tensors.
    pub fn sample_entries(&self, count: usize, seed: u64) -> Vec<(usize, usize)> {
        self.sample_entries_where(count, seed, |_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;
    use crate::synth::{rasterize, InstrumentPose};
    use crate::tensor::gradcheck::MODEL_STEPS;

    fn toy_pose(angle: f64, open: f64) -> InstrumentPose {
        InstrumentPose {
            wrist: Point::new(14.0, 16.0),
            shaft_angle: angle,
            shaft_length: 12.0,
            shaft_width: 4.0,
            wrist_radius: 3.0,
            jaw_length: 9.0,
            jaw_base_width: 2.5,
            jaw_tip_width: 1.5,
            open_left: open,
            open_right: open,
        }
    }

    fn toy_batch() -> (Vec<PartMask>, Vec<TipPair>) {
        [(0.2, 0.4), (3.0, 0.0), (1.4, 0.3)]
            .iter()
            .map(|&(a, o)| rasterize(&toy_pose(a, o), 32, 32).unwrap())
            .unzip()
    }

    #[test]
    fn pyramid_and_output_shapes() {
        let net = ToolTipNet::<f32>::new(ModelConfig { height: 128, width: 160, ..ModelConfig::default() }, 1).unwrap();
        let m = PartMask::background(160, 128).unwrap();
        let fwd = net.forward(&[&m, &m], Mode::Train).unwrap();
        let g = &fwd.graph;
        assert_eq!(g.shape(fwd.pyramid[0]), &[2, 16, 64, 80]);
        assert_eq!(g.shape(fwd.pyramid[1]), &[2, 32, 32, 40]);
        assert_eq!(g.shape(fwd.pyramid[2]), &[2, 64, 16, 20]);
        assert_eq!(g.shape(fwd.pyramid[3]), &[2, 128, 8, 10]);
        assert_eq!(g.shape(fwd.fused), &[2, 64, 32, 40]);
        assert_eq!(g.shape(fwd.heatmap), &[2, 2, 32, 40]);
        assert_eq!(g.shape(fwd.coords), &[2, 2, 2]);
        assert!(g.value(fwd.heatmap).all_finite() && g.value(fwd.coords).all_finite());
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { height: 100, ..ModelConfig::default() };
        assert!(matches!(ToolTipNet::<f32>::new(bad, 0), Err(ModelError::InvalidConfig(_))));
        let bad = ModelConfig { alpha_min: 1.0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let net = ToolTipNet::<f32>::new(ModelConfig::toy(), 0).unwrap();
        let wrong = PartMask::background(48, 32).unwrap();
        assert!(matches!(net.predict(&wrong), Err(ModelError::InputSize { .. })));
    }

    #[test]
    fn attention_floor_changes_the_prediction() {
        let (masks, _) = toy_batch();
        let cfg = ModelConfig::toy();
        let a = ToolTipNet::<f64>::new(cfg.clone(), 5).unwrap();
        let mut b = ToolTipNet::<f64>::new(ModelConfig { alpha_min: 0.5, ..cfg }, 5).unwrap();
        b.params_mut().clone_from_slice(a.params());
        let ha = a.predict(&masks[0]).unwrap().heatmap;
        let hb = b.predict(&masks[0]).unwrap().heatmap;
        assert!(ha.data().iter().zip(hb.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (masks, _) = toy_batch();
        let refs: Vec<&PartMask> = masks.iter().collect();
        let mut net = ToolTipNet::<f64>::new(ModelConfig::toy(), 2).unwrap();
        let fwd = net.forward(&refs, Mode::Train).unwrap();
        let (idx, st) = &fwd.batch_stats[0];
        net.update_running_stats(&fwd.batch_stats);
        let (m, v) = &net.running_stats()[*idx];
        assert!((m.data()[0] - 0.1 * st.mean[0]).abs() < 1e-12);
        assert!((v.data()[0] - (0.9 + 0.1 * st.var[0])).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        let (masks, _) = toy_batch();
        let net = ToolTipNet::<f32>::new(ModelConfig::toy(), 9).unwrap();
        net.save(&path).unwrap();
        let back = ToolTipNet::<f32>::load(&path).unwrap();
        assert_eq!(back.params(), net.params());
        let p0 = net.predict(&masks[1]).unwrap();
        let p1 = back.predict(&masks[1]).unwrap();
        assert_eq!(p0.heatmap, p1.heatmap);
        let other = ModelConfig { fused_channels: 8, ..ModelConfig::toy() };
        assert!(matches!(
            ToolTipNet::<f32>::load_expecting(&path, &other),
            Err(ModelError::Checkpoint(CheckpointError::MetadataMismatch(_)))
        ));
    }

    #[test]
    fn all_background_input_is_finite() {
        let net = ToolTipNet::<f32>::new(ModelConfig::toy(), 3).unwrap();
        let m = PartMask::background(32, 32).unwrap();
        let p = net.predict(&m).unwrap();
        assert!(p.heatmap.all_finite());
        assert!(p.tips.left.x.is_finite() && p.tips.right.y.is_finite());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (masks, tips) = toy_batch();
        let refs: Vec<&PartMask> = masks.iter().collect();
        let mut net = ToolTipNet::<f64>::new(ModelConfig::toy(), 4).unwrap();
        net.randomize_head_output(1);
        let entries = net.sample_entries(net.params().len() * 2, 11);
        let worst = net.loss_grad_check(&refs, &tips, &entries, &MODEL_STEPS).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }
}
