//! Central finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both
/// vectors are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the analytic gradient of `f` with respect to each tensor in
/// `inputs` against central differences. `f` must build a scalar from the
/// input leaves it is given. Returns the worst relative error over inputs.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Central-difference gradient of a scalar function of one flat vector.
pub fn numeric_gradient(
    x: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        work[i] = x[i] + step;
        let plus = f(&work)?;
        work[i] = x[i] - step;
        let minus = f(&work)?;
        work[i] = x[i];
        out[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Outcome of one family of gradient checks.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    /// Largest relative error over all instances.
    pub worst: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// Random linear functional of `v`, so every output entry reaches the loss.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = rand_tensor(&mut rng, g.shape(v), 1.0);
    g.weighted_sum(v, &w)
}

fn case(
    name: &str,
    instances: usize,
    seed: u64,
    mut one: impl FnMut(&mut rand_chacha::ChaCha8Rng, u64) -> Result<f64>,
) -> Result<CaseReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        worst = worst.max(one(&mut rng, k as u64)?);
    }
    Ok(CaseReport {
        name: name.to_string(),
        instances,
        worst,
        tolerance: OP_TOLERANCE,
    })
}

/// Finite-difference checks of every differentiable operation, `instances`
/// random draws each.
pub fn op_suite(instances: usize) -> Result<Vec<CaseReport>> {
    use super::NormMode;
    use rand::Rng;
    let h = FD_STEP;
    let mut out = Vec::new();
    out.push(case("add_scale_sum", instances, 1, |r, k| {
        let (a, b) = (rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[3, 4], 1.0));
        check(&[a, b], h, |g, v| {
            let s = g.add(v[0], v[1])?;
            let s = g.scale(s, -1.7);
            let p = project(g, s, k)?;
            let t = g.sum(v[0]);
            g.add(p, t)
        })
    })?);
    for (name, f) in [("relu", 0usize), ("tanh", 1), ("sigmoid", 2)] {
        out.push(case(name, instances, 2 + f as u64, |r, k| {
            // Keep inputs away from the relu kink.
            let mut x = rand_tensor(r, &[4, 5], 2.0);
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.01;
                }
            }
            check(&[x], h, |g, v| {
                let y = match f {
                    0 => g.relu(v[0]),
                    1 => g.tanh(v[0]),
                    _ => g.sigmoid(v[0]),
                };
                project(g, y, k)
            })
        })?);
    }
    out.push(case("grad_reverse", instances, 5, |r, k| {
        let x = rand_tensor(r, &[2, 3], 1.0);
        let lambda = r.gen_range(0.0..2.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.grad_reverse(xv, lambda)?;
        let y = g.tanh(y);
        let l = project(&mut g, y, k)?;
        let analytic = g
            .backward(l)?
            .wrt(xv)
            .expect("input gradient")
            .data()
            .to_vec();
        let numeric = numeric_gradient(x.data(), h, |d| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::from_vec(x.shape(), d.to_vec())?);
            let y = g.tanh(xv);
            let l = project(&mut g, y, k)?;
            Ok(g.value(l).item())
        })?;
        let reversed: Vec<f64> = numeric.iter().map(|v| -lambda * v).collect();
        Ok(relative_error(&analytic, &reversed))
    })?);
    out.push(case("linear", instances, 6, |r, k| {
        let (n, i, o) = (1 + k as usize % 3, 2 + k as usize % 4, 1 + k as usize % 5);
        let x = rand_tensor(r, &[n, i], 1.0);
        let w = rand_tensor(r, &[o, i], 1.0);
        let b = rand_tensor(r, &[o], 1.0);
        check(&[x, w, b], h, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, k)
        })
    })?);
    out.push(case("conv2d", instances, 7, |r, k| {
        let ci = 1 + k as usize % 3;
        let x = rand_tensor(r, &[1 + k as usize % 2, ci, 4, 3], 1.0);
        let w = rand_tensor(r, &[2, ci, 3, 3], 1.0);
        let b = rand_tensor(r, &[2], 1.0);
        check(&[x, w, b], h, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y, k)
        })
    })?);
    out.push(case("batch_norm_train", instances, 8, |r, k| {
        let x = rand_tensor(r, &[2, 2, 3, 4], 2.0);
        let gamma = rand_tensor(r, &[2], 1.5);
        let beta = rand_tensor(r, &[2], 1.0);
        let lens = [4, 1 + k as usize % 4];
        check(&[x, gamma, beta], h, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Train, Some(&lens))?;
            project(g, y, k)
        })
    })?);
    out.push(case("batch_norm_eval", instances, 9, |r, k| {
        let x = rand_tensor(r, &[2, 2, 2, 3], 2.0);
        let gamma = rand_tensor(r, &[2], 1.5);
        let beta = rand_tensor(r, &[2], 1.0);
        let mean = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let var = [r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)];
        check(&[x, gamma, beta], h, |g, v| {
            let (y, _) = g.batch_norm(
                v[0],
                v[1],
                v[2],
                NormMode::Eval {
                    mean: &mean,
                    var: &var,
                },
                None,
            )?;
            project(g, y, k)
        })
    })?);
    out.push(case("max_pool2d", instances, 10, |r, k| {
        let x = rand_tensor(r, &[2, 2, 4, 6], 1.0);
        let lens = [6, 2 + k as usize % 4];
        check(&[x], h, |g, v| {
            let y = g.max_pool2d(v[0], 2, 2, Some(&lens))?;
            project(g, y, k)
        })
    })?);
    out.push(case("to_sequence", instances, 11, |r, k| {
        let x = rand_tensor(r, &[2, 3, 2, 4], 1.0);
        check(&[x], h, |g, v| {
            let y = g.to_sequence(v[0])?;
            project(g, y, k)
        })
    })?);
    out.push(case("gru", instances, 12, |r, k| {
        let (n, t, f, hd) = (2, 4, 3, 2 + k as usize % 2);
        let x = rand_tensor(r, &[n, t, f], 1.0);
        let wx = rand_tensor(r, &[3 * hd, f], 0.8);
        let wh = rand_tensor(r, &[3 * hd, hd], 0.8);
        let b = rand_tensor(r, &[3 * hd], 0.5);
        let h0 = rand_tensor(r, &[n, hd], 0.5);
        let lens = [t, 1 + k as usize % t];
        check(&[x, wx, wh, b, h0], h, |g, v| {
            let y = g.gru(v[0], v[1], v[2], v[3], Some(v[4]), Some(&lens))?;
            project(g, y, k)
        })
    })?);
    out.push(case("last_step", instances, 13, |r, k| {
        let x = rand_tensor(r, &[3, 4, 2], 1.0);
        let lens = [4, 1 + k as usize % 4, 2];
        check(&[x], h, |g, v| {
            let y = g.last_step(v[0], Some(&lens))?;
            project(g, y, k)
        })
    })?);
    out.push(case("squared_error", instances, 14, |r, k| {
        let p = rand_tensor(r, &[2, 3, 4], 1.0);
        let t = rand_tensor(r, &[2, 3, 4], 1.0);
        let lens = [3, 1 + k as usize % 3];
        check(&[p], h, |g, v| g.squared_error(v[0], &t, Some(&lens)))
    })?);
    out.push(case("weighted_bce", instances, 15, |r, _| {
        let p = Tensor::from_vec(&[4, 1], (0..4).map(|_| r.gen_range(0.05..0.95)).collect())?;
        let labels: Vec<f64> = (0..4).map(|i| (i % 2) as f64).collect();
        let w: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..2.0)).collect();
        check(&[p], h, |g, v| g.weighted_bce(v[0], &labels, &w))
    })?);
    Ok(out)
}
