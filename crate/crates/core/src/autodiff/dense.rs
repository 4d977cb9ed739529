//! Affine map over the last axis: `y = x W^T + b`, `W: [O, F]`.

use crate::par::Exec;

pub fn forward(exec: Exec, x: &[f64], w: &[f64], b: &[f64], features: usize) -> Vec<f64> {
    let outs = b.len();
    let rows = x.len() / features;
    let mut y = vec![0.0; rows * outs];
    exec.for_each_chunk_mut(&mut y, outs, |r, dst| {
        let xr = &x[r * features..(r + 1) * features];
        for (o, (yo, wo)) in dst.iter_mut().zip(w.chunks_exact(features)).enumerate() {
            *yo = b[o] + xr.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>();
        }
    });
    y
}

pub struct DenseGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn backward(
    exec: Exec,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    features: usize,
    outs: usize,
    need_input: bool,
) -> DenseGrads {
    let rows = x.len() / features;
    let mut weight = vec![0.0; w.len()];
    exec.for_each_chunk_mut(&mut weight, features, |o, dst| {
        for r in 0..rows {
            let g = grad_out[r * outs + o];
            if g == 0.0 {
                continue;
            }
            for (d, xv) in dst.iter_mut().zip(&x[r * features..(r + 1) * features]) {
                *d += g * xv;
            }
        }
    });
    let bias = (0..outs)
        .map(|o| (0..rows).map(|r| grad_out[r * outs + o]).sum())
        .collect();
    let input = need_input.then(|| {
        let mut gi = vec![0.0; x.len()];
        exec.for_each_chunk_mut(&mut gi, features, |r, dst| {
            for (o, wo) in w.chunks_exact(features).enumerate() {
                let g = grad_out[r * outs + o];
                if g == 0.0 {
                    continue;
                }
                for (d, wv) in dst.iter_mut().zip(wo) {
                    *d += g * wv;
                }
            }
        });
        gi
    });
    DenseGrads {
        input,
        weight,
        bias,
    }
}
