//! Central finite-difference verification of analytic gradients (f64 only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

/// `|analytic - numeric| / max(1e-8, |numeric|)`, worst over all entries.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Builds `f` on fresh graphs and compares `∂f/∂input` against central
/// differences with the given step for every entry of every input.
/// Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zero).data().to_vec();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

pub const DEFAULT_STEP: f64 = 1e-5;
/// Steps used for whole-model checks, where some ReLU input usually sits
/// within `DEFAULT_STEP` of zero.
pub const MODEL_STEPS: [f64; 2] = [DEFAULT_STEP, 1e-6];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with `|x| ∈ [0.1, 1)`, keeping relu away from its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Reduces an op output to a scalar with fixed random weights.
fn reduce(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(v), -1.0, 1.0);
    g.weighted_sum(v, &w)
}

/// One named case of the op-level suite.
pub struct OpCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

/// Finite-difference check of every differentiable op on small random
/// shapes.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = DEFAULT_STEP;
    let tol = 1e-6;
    let mut out = Vec::new();
    let mut push = |name, worst| out.push(OpCheck { name, worst, tolerance: tol });

    for (name, stride, k, bias) in [
        ("conv2d 3x3 stride 1", 1, 3, true),
        ("conv2d 3x3 stride 2", 2, 3, true),
        ("conv2d 1x1 stride 1", 1, 1, false),
        ("conv2d 5x5 stride 2", 2, 5, true),
    ] {
        let x = random(&mut rng, &[2, 3, 6, 5], -1.0, 1.0);
        let w = random(&mut rng, &[2, 3, k, k], -1.0, 1.0);
        let b = random(&mut rng, &[2], -1.0, 1.0);
        let inputs = if bias { vec![x, w, b] } else { vec![x, w] };
        let worst = grad_check(&inputs, step, |g, v| {
            let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride)?;
            reduce(g, y, 1)
        })?;
        push(name, worst);
    }

    let x = random(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
    let gamma = random(&mut rng, &[2], 0.5, 1.5);
    let beta = random(&mut rng, &[2], -0.5, 0.5);
    let worst = grad_check(&[x.clone(), gamma.clone(), beta.clone()], step, |g, v| {
        let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        reduce(g, y, 2)
    })?;
    push("batchnorm2d train", worst);
    let (rm, rv) = ([0.1, -0.2], [0.8, 1.3]);
    let worst = grad_check(&[x, gamma, beta], step, |g, v| {
        let y = g.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
        reduce(g, y, 3)
    })?;
    push("batchnorm2d eval", worst);

    let x = away_from_zero(&mut rng, &[2, 2, 3, 3]);
    let worst = grad_check(&[x], step, |g, v| {
        let y = g.relu(v[0]);
        reduce(g, y, 4)
    })?;
    push("relu", worst);

    let a = random(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let worst = grad_check(&[a.clone(), b], step, |g, v| {
        let y = g.add(v[0], v[1])?;
        reduce(g, y, 5)
    })?;
    push("add", worst);
    let b_same = random(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let worst = grad_check(&[a.clone(), b_same], step, |g, v| {
        let y = g.mul(v[0], v[1])?;
        reduce(g, y, 6)
    })?;
    push("elementwise_mul", worst);
    let b_one = random(&mut rng, &[2, 1, 3, 4], 0.1, 1.0);
    let worst = grad_check(&[a, b_one], step, |g, v| {
        let y = g.mul(v[0], v[1])?;
        reduce(g, y, 7)
    })?;
    push("elementwise_mul channel broadcast", worst);

    for (name, factor, h, w) in [
        ("bilinear_resample x1/8", 0.125, 8, 16),
        ("bilinear_resample x1/4", 0.25, 8, 12),
        ("bilinear_resample x1/2", 0.5, 6, 8),
        ("bilinear_resample x2", 2.0, 3, 4),
        ("bilinear_resample x4", 4.0, 2, 3),
        ("bilinear_resample x8", 8.0, 1, 2),
    ] {
        let x = random(&mut rng, &[2, 2, h, w], -1.0, 1.0);
        let worst = grad_check(&[x], step, |g, v| {
            let y = g.bilinear_resample(v[0], factor)?;
            reduce(g, y, 8)
        })?;
        push(name, worst);
    }

    let a = random(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let worst = grad_check(&[a, b], step, |g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        reduce(g, y, 9)
    })?;
    push("concat_channels", worst);

    let x = random(&mut rng, &[2, 2, 3, 4], -1.0, 1.0);
    let worst = grad_check(&[x.clone()], step, |g, v| {
        let y = g.spatial_softmax(v[0], 0.5)?;
        reduce(g, y, 10)
    })?;
    push("spatial_softmax", worst);
    let worst = grad_check(&[x], step, |g, v| {
        let p = g.spatial_softmax(v[0], 0.5)?;
        let c = g.expected_coords(p)?;
        reduce(g, c, 11)
    })?;
    push("expected_coords", worst);

    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let worst = grad_check(&[x], step, |g, v| {
        let y = g.scale(v[0], -2.5);
        reduce(g, y, 12)
    })?;
    push("scale", worst);

    // targets offset by at least 0.1 from predictions keep |x| away from the kink
    let pred = random(&mut rng, &[2, 2, 2], -1.0, 1.0);
    let offs = away_from_zero(&mut rng, &[2, 2, 2]);
    let target = Tensor::from_vec(
        &[2, 2, 2],
        pred.data().iter().zip(offs.data()).map(|(p, o)| p - o).collect(),
    )?;
    let worst = grad_check(&[pred.clone()], step, |g, v| g.l1_loss(v[0], &target))?;
    push("l1_loss", worst);
    let target = random(&mut rng, &[2, 2, 2], -1.0, 1.0);
    let worst = grad_check(&[pred], step, |g, v| g.mse_loss(v[0], &target))?;
    push("mse_loss", worst);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_1e6() {
        for c in op_suite(7).unwrap() {
            assert!(c.passed(), "{}: worst relative error {:e}", c.name, c.worst);
        }
    }

    #[test]
    fn linear_op_is_exact_to_1e10() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[4, 5], -1.0, 1.0);
        let b = random(&mut rng, &[4, 5], -1.0, 1.0);
        // central differences are exact for linear maps at any step; a wide
        // step keeps cancellation error out of the comparison
        let worst = grad_check(&[a, b], 1e-2, |g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y, 0)
        })
        .unwrap();
        assert!(worst < 1e-10, "{worst:e}");
    }

    #[test]
    fn relu_away_from_kink_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = away_from_zero(&mut rng, &[3, 7]);
        let worst = grad_check(&[x], DEFAULT_STEP, |g, v| {
            let y = g.relu(v[0]);
            reduce(g, y, 1)
        })
        .unwrap();
        assert!(worst < 1e-8, "{worst:e}");
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let build = |g: &mut Graph<f64>, which: u8| {
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, 1).unwrap();
            let r = g.relu(y);
            let a = reduce(g, r, 1).unwrap();
            let p = g.spatial_softmax(y, 0.7).unwrap();
            let b = reduce(g, p, 2).unwrap();
            let out = match which {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            };
            (xv, wv, out)
        };
        let grad_of = |which| {
            let mut g = Graph::new();
            let (xv, wv, out) = build(&mut g, which);
            let gr = g.backward(out).unwrap();
            (gr.get(xv).unwrap().clone(), gr.get(wv).unwrap().clone())
        };
        let (xa, wa) = grad_of(0);
        let (xb, wb) = grad_of(1);
        let (xs, ws) = grad_of(2);
        for (s, (a, b)) in xs.data().iter().zip(xa.data().iter().zip(xb.data())) {
            assert!((s - (a + b)).abs() < 1e-12);
        }
        for (s, (a, b)) in ws.data().iter().zip(wa.data().iter().zip(wb.data())) {
            assert!((s - (a + b)).abs() < 1e-12);
        }
    }
}
