//! Model-level properties: gradients through the backbone, fusion and head,
//! attention behaviour, and training convergence and determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tooltip_core::dataset::{PartMask, Point, TipPair};
use tooltip_core::eval::Frame;
use tooltip_core::model::{Mode, ModelConfig, ToolTipNet};
use tooltip_core::synth::{rasterize, InstrumentPose};
use tooltip_core::tensor::gradcheck::MODEL_STEPS;
use tooltip_core::tensor::optim::{cosine_lr, AdamState};
use tooltip_core::tensor::{Graph, Tensor, TensorError, Var};
use tooltip_core::train::{train_epoch, TrainConfig};

fn pose(angle: f64, open: f64) -> InstrumentPose {
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

fn toy_frames() -> (Vec<PartMask>, Vec<TipPair>) {
    [(0.2, 0.4), (3.0, 0.0), (1.4, 0.3)]
        .iter()
        .map(|&(a, o)| rasterize(&pose(a, o), 32, 32).unwrap())
        .unzip()
}

/// Weighted sum with fixed pseudo-random weights.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let n = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    g.weighted_sum(v, &w)
}

fn is_backbone(name: &str) -> bool {
    ["stem", "transition", "stage"].iter().any(|p| name.starts_with(p))
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let (masks, _) = toy_frames();
    let refs: Vec<&PartMask> = masks.iter().collect();
    let net = ToolTipNet::<f64>::new(ModelConfig::toy(), 21).unwrap();
    let entries = net.sample_entries_where(120, 3, is_backbone);
    assert_eq!(entries.len(), 120);
    let worst = net
        .param_grad_check(&refs, &entries, &MODEL_STEPS, |f| {
            let mut total = probe(&mut f.graph, f.pyramid[0], 0)?;
            for (k, &level) in f.pyramid.iter().enumerate().skip(1) {
                let s = probe(&mut f.graph, level, k as u64)?;
                total = f.graph.add(total, s)?;
            }
            Ok(total)
        })
        .unwrap();
    assert!(worst < 1e-5, "backbone worst relative error {worst:e}");
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let (masks, _) = toy_frames();
    let refs: Vec<&PartMask> = masks.iter().collect();
    let net = ToolTipNet::<f64>::new(ModelConfig::toy(), 22).unwrap();
    let entries = net.sample_entries_where(40, 4, |n| n.starts_with("fuse") || n.starts_with("stage2"));
    let worst = net
        .param_grad_check(&refs, &entries, &MODEL_STEPS, |f| probe(&mut f.graph, f.fused, 9))
        .unwrap();
    assert!(worst < 1e-5, "fusion worst relative error {worst:e}");
}

#[test]
fn full_loss_gradient_on_parameter_subset() {
    let (masks, tips) = toy_frames();
    let refs: Vec<&PartMask> = masks.iter().collect();
    let mut net = ToolTipNet::<f64>::new(ModelConfig::toy(), 23).unwrap();
    net.randomize_head_output(5);
    let entries = net.sample_entries(300, 6);
    let worst = net.loss_grad_check(&refs, &tips, &entries, &MODEL_STEPS).unwrap();
    assert!(worst < 1e-4, "loss worst relative error {worst:e}");
}

#[test]
fn unit_attention_is_the_identity() {
    let (masks, _) = toy_frames();
    let refs: Vec<&PartMask> = masks.iter().collect();
    let net = ToolTipNet::<f32>::new(ModelConfig::toy(), 24).unwrap();
    let ones = Tensor::full(&[3, 1, 8, 8], 1.0f32);
    let a = net.forward_with_attention(&refs, Mode::Eval, Some(ones)).unwrap();
    let b = net.forward_with_attention(&refs, Mode::Eval, None).unwrap();
    assert_eq!(a.graph.value(a.heatmap), b.graph.value(b.heatmap));

    let floor = Tensor::full(&[3, 1, 8, 8], 0.1f32);
    let c = net.forward_with_attention(&refs, Mode::Eval, Some(floor)).unwrap();
    assert_ne!(a.graph.value(a.heatmap), c.graph.value(c.heatmap));
}

#[test]
fn attention_floor_keeps_feature_gradients_alive() {
    // attention at the floor everywhere, as for a frame with no gripper pixels
    let (masks, _) = toy_frames();
    let refs: Vec<&PartMask> = masks.iter().collect();
    let net = ToolTipNet::<f64>::new(ModelConfig::toy(), 25).unwrap();
    let floor = Tensor::full(&[3, 1, 8, 8], net.config().alpha_min);
    let mut fwd = net.forward_with_attention(&refs, Mode::Train, Some(floor)).unwrap();
    let out = probe(&mut fwd.graph, fwd.heatmap, 1).unwrap();
    let grads = fwd.graph.backward(out).unwrap();
    for (name, &v) in net.param_names().iter().zip(&fwd.params) {
        if name.starts_with("fuse") || name.starts_with("stage2") {
            let g = grads.get(v).expect("parameter gradient");
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} gets no gradient");
        }
    }
}

fn frame_set(n: usize) -> Vec<Frame> {
    (0..n)
        .map(|i| {
            let (mask, tips) = rasterize(&pose(0.4 * i as f64, 0.1 * (i % 4) as f64), 32, 32).unwrap();
            Frame {
                id: format!("f{i}"),
                mask,
                tips,
                closed: None,
            }
        })
        .collect()
}

fn toy_train_config(seed: u64, augment: bool) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed,
        augment,
        model: ModelConfig {
            base_channels: 4,
            fused_channels: 8,
            ..ModelConfig::toy()
        },
        ..TrainConfig::default()
    }
}

fn first_epoch_loss(cfg: &TrainConfig, frames: &[Frame]) -> f64 {
    let mut net = ToolTipNet::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
    let mut adam = AdamState::new(net.params());
    train_epoch(&mut net, &mut adam, frames, 0, cfg).unwrap()
}

#[test]
fn fixed_seed_reproduces_the_loss_curve_bitwise() {
    let frames = frame_set(10);
    let cfg = toy_train_config(3, false);
    let curve = |cfg: &TrainConfig| {
        let mut net = ToolTipNet::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut adam = AdamState::new(net.params());
        (0..cfg.epochs)
            .map(|e| train_epoch(&mut net, &mut adam, &frames, e, cfg).unwrap().to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(curve(&cfg), curve(&cfg));
    let aug = toy_train_config(3, true);
    assert_eq!(first_epoch_loss(&aug, &frames).to_bits(), first_epoch_loss(&aug, &frames).to_bits());
    let other = toy_train_config(4, false);
    assert_ne!(first_epoch_loss(&cfg, &frames), first_epoch_loss(&other, &frames));
}

#[test]
fn overfits_a_single_frame() {
    let (mask, tips) = rasterize(&pose(0.9, 0.35), 32, 32).unwrap();
    let cfg = ModelConfig {
        base_channels: 4,
        fused_channels: 8,
        ..ModelConfig::toy()
    };
    let mut net = ToolTipNet::<f32>::new(cfg, 8).unwrap();
    let mut adam = AdamState::new(net.params());
    let masks = [&mask, &mask];
    let gts = [tips, tips];
    let mut first = None;
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let (fwd, loss) = net.loss_graph(&masks, &gts, Mode::Train).unwrap();
        last = fwd.graph.value(loss).item() as f64;
        first.get_or_insert(last);
        let mut g = fwd.graph.backward(loss).unwrap();
        let grads: Vec<_> = fwd.params.iter().map(|&v| g.take(v).unwrap()).collect();
        adam.step(net.params_mut(), &grads, 1e-2);
        net.update_running_stats(&fwd.batch_stats);
    }
    let first = first.unwrap();
    assert!(last < 0.01 * first, "loss {first} -> {last}");
}

#[test]
fn logged_lr_follows_the_cosine_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tooltip_core::synth::SynthConfig {
        width: 32,
        height: 32,
        shaft_length: tooltip_core::synth::ParamRange { min: 8.0, max: 12.0 },
        shaft_width: tooltip_core::synth::ParamRange { min: 3.0, max: 4.0 },
        wrist_radius: tooltip_core::synth::ParamRange { min: 2.5, max: 3.0 },
        jaw_length: tooltip_core::synth::ParamRange { min: 6.0, max: 8.0 },
        jaw_base_width: tooltip_core::synth::ParamRange { min: 2.0, max: 2.5 },
        jaw_tip_width: tooltip_core::synth::ParamRange { min: 1.0, max: 1.5 },
        ..Default::default()
    };
    tooltip_core::synth::generate_dataset(40, &cfg, dir.path().join("data")).unwrap();
    let data = tooltip_core::dataset::Dataset::open(dir.path().join("data")).unwrap();
    let tc = toy_train_config(1, true);
    let out = tooltip_core::train::train(&data, &tc, dir.path().join("run"), |_| {}).unwrap();
    assert_eq!(out.log.len(), 3);
    for e in &out.log {
        assert_eq!(e.lr, cosine_lr(e.epoch, 3, 1e-4, 0.0));
        assert!(e.val_rmse.is_finite() && (0.0..=1.0).contains(&e.val_acc));
    }
    let text = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "train_loss", "val_rmse", "val_acc"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }
    assert!(dir.path().join("run/best.ckpt").is_file());
    let best = out.log.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch].val_rmse, best);
}
