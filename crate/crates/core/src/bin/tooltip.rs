use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tooltip_core::dataset::{read_mask, Dataset, Point, Split, TipPair};
use tooltip_core::eval::{self, Comparison, Predictor};
use tooltip_core::model::{ModelConfig, ToolTipNet};
use tooltip_core::synth::{generate_dataset, SynthConfig};
use tooltip_core::tensor::gradcheck;
use tooltip_core::train::{self, TrainConfig};
use tooltip_core::{baseline, overlay};

#[derive(Parser)]
#[command(name = "tooltip", version, about = "Instrument tip localization from part masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the heatmap model.
    Train(TrainArgs),
    /// Evaluate the model or the baseline on one split.
    Eval(EvalArgs),
    /// Predict tips for a single mask.
    Predict(PredictArgs),
    /// Evaluate model and baseline side by side.
    Compare(CompareArgs),
    /// Render a mask with tip markers as PPM.
    Render(RenderArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    closed_frac: f64,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 12)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 64)]
    fused_channels: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also write per-frame results as JSON lines.
    #[arg(long)]
    frames_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Write the comparison as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth tips as `lx ly rx ry`.
    #[arg(long, num_args = 4, value_names = ["LX", "LY", "RX", "RY"])]
    gt: Option<Vec<f64>>,
    /// Draw model predictions from this checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Draw baseline predictions.
    #[arg(long, conflicts_with = "ckpt")]
    baseline: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_model(path: &PathBuf) -> Result<ToolTipNet<f32>> {
    ToolTipNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => {
            let cfg = SynthConfig {
                width: a.width,
                height: a.height,
                closed_fraction: a.closed_frac,
                seed: a.seed,
                ..SynthConfig::default()
            };
            let manifest = generate_dataset(a.n, &cfg, &a.out)?;
            println!("wrote {} frames to {}", a.n, manifest.display());
        }
        Command::Train(a) => {
            let data = Dataset::open(&a.data)?;
            let (height, width) = match data.records.first() {
                Some(r) => {
                    let m = data.load_mask(r)?;
                    (m.height(), m.width())
                }
                None => bail!("dataset is empty"),
            };
            let cfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch,
                lr: a.lr,
                seed: a.seed,
                augment: !a.no_augment,
                model: ModelConfig {
                    height,
                    width,
                    base_channels: a.base_channels,
                    fused_channels: a.fused_channels,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            };
            let out = train::train(&data, &cfg, &a.out, |e| {
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:.5}  val_rmse {:.2}  val_acc {:.3}  ({:.0}s)",
                    e.epoch, e.lr, e.train_loss, e.val_rmse, e.val_acc, e.seconds
                );
            })?;
            println!("best epoch {} -> {}", out.best_epoch, out.best_checkpoint.display());
        }
        Command::Eval(a) => {
            let data = Dataset::open(&a.data)?;
            let frames = eval::load_frames(&data, a.split)?;
            let model = a.ckpt.as_ref().map(load_model).transpose()?;
            let predictor = model.as_ref().map_or(Predictor::Baseline, Predictor::Model);
            let results = eval::predict_frames(&frames, predictor)?;
            if let Some(path) = &a.frames_out {
                let lines: Vec<String> = results.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
                std::fs::write(path, lines.join("\n") + "\n").with_context(|| path.display().to_string())?;
            }
            let report = eval::summarize(predictor.name(), &results, a.threshold)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print_report(&report);
            }
        }
        Command::Predict(a) => {
            let mask = read_mask(&a.mask)?;
            let tips = match &a.ckpt {
                Some(ckpt) => load_model(ckpt)?.predict(&mask)?.tips,
                None => {
                    let r = baseline::detect_tips(&mask)?;
                    if r.degenerate {
                        eprintln!("warning: fewer than two jaw components, tips coincide");
                    }
                    r.tips
                }
            };
            println!("left: {:.2} {:.2}", tips.left.x, tips.left.y);
            println!("right: {:.2} {:.2}", tips.right.x, tips.right.y);
        }
        Command::Compare(a) => {
            let data = Dataset::open(&a.data)?;
            let frames = eval::load_frames(&data, a.split)?;
            let model = load_model(&a.ckpt)?;
            let cmp = Comparison {
                model: eval::evaluate(&frames, Predictor::Model(&model), a.threshold)?,
                baseline: eval::evaluate(&frames, Predictor::Baseline, a.threshold)?,
            };
            if let Some(path) = &a.json {
                std::fs::write(path, serde_json::to_string_pretty(&cmp)?).with_context(|| path.display().to_string())?;
            }
            println!("{}", eval::format_comparison(&cmp));
        }
        Command::Render(a) => {
            let mask = read_mask(&a.mask)?;
            let gt = a
                .gt
                .map(|v| TipPair::new(Point::new(v[0], v[1]), Point::new(v[2], v[3])));
            let pred = match (&a.ckpt, a.baseline) {
                (Some(ckpt), _) => Some(load_model(ckpt)?.predict(&mask)?.tips),
                (None, true) => Some(eval::baseline_predict(&mask).0),
                (None, false) => None,
            };
            overlay::write_ppm(&overlay::render(&mask, gt.as_ref(), pred.as_ref()), &a.out)?;
        }
        Command::Gradcheck(a) => {
            let mut ok = true;
            for c in gradcheck::op_suite(a.seed)? {
                ok &= c.passed();
                println!(
                    "{:<36} worst {:.2e}  tol {:.0e}  {}",
                    c.name,
                    c.worst,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            let worst = model_check(a.seed)?;
            let passed = worst < 1e-4;
            ok &= passed;
            println!(
                "{:<36} worst {:.2e}  tol 1e-4  {}",
                "model parameter subset",
                worst,
                if passed { "ok" } else { "FAIL" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn print_report(r: &eval::EvalReport) {
    println!("{} on {} frames", r.method, r.frame_count);
    let row = |name: &str, frames: usize, rmse: f64, acc: f64, degen: Option<f64>| {
        let degen = degen.map_or(String::new(), |d| format!("  degenerate {d:.2}"));
        println!("  {name:<8} frames {frames:>5}  mean_rmse {rmse:>7.2}  acc {acc:.3}{degen}");
    };
    row("all", r.frame_count, r.mean_rmse, r.accuracy, r.degenerate_rate);
    for (name, st) in [("open", &r.open), ("closed", &r.closed), ("unknown", &r.unknown)] {
        if let Some(st) = st {
            row(name, st.frames, st.mean_rmse, st.accuracy, st.degenerate_rate);
        }
    }
    println!("  accuracy counts RMSE < {:.2} px at native mask resolution", r.threshold);
}

fn model_check(seed: u64) -> Result<f64> {
    use tooltip_core::synth::{rasterize, InstrumentPose};
    let masks_tips: Vec<_> = [(0.2, 0.4), (3.0, 0.0), (1.4, 0.3)]
        .iter()
        .map(|&(angle, open)| {
            let pose = InstrumentPose {
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
            };
            rasterize(&pose, 32, 32)
        })
        .collect::<Result<_, _>>()?;
    let (masks, tips): (Vec<_>, Vec<_>) = masks_tips.into_iter().unzip();
    let refs: Vec<_> = masks.iter().collect();
    let mut net = ToolTipNet::<f64>::new(ModelConfig::toy(), seed)?;
    net.randomize_head_output(seed + 1);
    let entries = net.sample_entries(2 * net.params().len(), seed + 2);
    Ok(net.loss_grad_check(&refs, &tips, &entries, &gradcheck::MODEL_STEPS)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
