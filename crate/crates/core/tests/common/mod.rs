//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use sstda::acoustics::Point;
use sstda::autodiff::Tensor;

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mirror `p` across one of the six walls.
pub fn mirror(p: Point, wall: usize, dims: Point) -> Point {
    let axis = wall / 2;
    let mut q = p;
    q[axis] = if wall.is_multiple_of(2) {
        -p[axis]
    } else {
        2.0 * dims[axis] - p[axis]
    };
    q
}

/// Images by explicit wall-reflection sequences, deduplicated by position.
pub fn brute_force_images(dims: Point, src: Point, max_order: usize) -> Vec<(Point, usize)> {
    let mut found: Vec<(Point, usize)> = vec![(src, 0)];
    let mut frontier = vec![(src, usize::MAX)];
    for order in 1..=max_order {
        let mut next = vec![];
        for (p, last) in &frontier {
            for wall in 0..6 {
                if wall == *last {
                    continue;
                }
                let q = mirror(*p, wall, dims);
                if !found.iter().any(|(f, _)| dist(*f, q) < 1e-9) {
                    found.push((q, order));
                    next.push((q, wall));
                }
            }
        }
        frontier = next;
    }
    found
}

/// Impulse response as a sum of Hann-windowed sinc pulses, one per mirrored
/// image, with pressure reflection `sqrt(1 - alpha)` per bounce and
/// spherical spreading.
pub fn rir_oracle(
    dims: Point,
    alpha: f64,
    src: Point,
    mic: Point,
    max_order: usize,
    len: usize,
    fs: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (pos, order) in brute_force_images(dims, src, max_order) {
        let d = dist(pos, mic);
        let amp = (1.0 - alpha).powf(order as f64 / 2.0) / (4.0 * PI * d);
        let tau = d / 343.0 * fs;
        for (n, o) in out.iter_mut().enumerate() {
            let t = n as f64 - tau;
            if t.abs() <= 40.5 {
                let sinc = if t == 0.0 {
                    1.0
                } else {
                    (PI * t).sin() / (PI * t)
                };
                *o += amp * 0.5 * (1.0 + (2.0 * PI * t / 81.0).cos()) * sinc;
            }
        }
    }
    out
}

/// One STFT coefficient by direct summation: periodic Hann window of
/// `window` samples, zero-padded to `fft` points.
pub fn dft_bin(x: &[f64], start: usize, window: usize, fft: usize, k: usize) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    for n in 0..window {
        let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / window as f64).cos();
        let v = x[start + n] * w;
        let a = -2.0 * PI * (k * n) as f64 / fft as f64;
        re += v * a.cos();
        im += v * a.sin();
    }
    (re, im)
}

/// Step-by-step scalar GRU with gates ordered update, reset, candidate.
pub fn gru_oracle(x: &[Vec<f64>], wx: &Tensor, wh: &Tensor, b: &Tensor, h: usize) -> Vec<Vec<f64>> {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let f = x[0].len();
    let wxa = |row: usize, j: usize| wx.data()[row * f + j];
    let wha = |row: usize, j: usize| wh.data()[row * h + j];
    let mut state = vec![0.0; h];
    let mut out = vec![];
    for xt in x {
        let mut z = vec![0.0; h];
        let mut r = vec![0.0; h];
        for i in 0..h {
            let mut az = b.data()[i];
            let mut ar = b.data()[h + i];
            for j in 0..f {
                az += wxa(i, j) * xt[j];
                ar += wxa(h + i, j) * xt[j];
            }
            for j in 0..h {
                az += wha(i, j) * state[j];
                ar += wha(h + i, j) * state[j];
            }
            z[i] = sig(az);
            r[i] = sig(ar);
        }
        let mut next = vec![0.0; h];
        for i in 0..h {
            let mut an = b.data()[2 * h + i];
            for j in 0..f {
                an += wxa(2 * h + i, j) * xt[j];
            }
            for j in 0..h {
                an += wha(2 * h + i, j) * r[j] * state[j];
            }
            let n = an.tanh();
            next[i] = (1.0 - z[i]) * n + z[i] * state[i];
        }
        state = next;
        out.push(state.clone());
    }
    out
}

/// 3x3 same-padding cross-correlation by nested loops, `[N, C_out, H, W]`.
pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let xs = x.shape();
    let (n, ci, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
    let co = w.shape()[0];
    let at = |s: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= hh as isize || j >= ww as isize {
            0.0
        } else {
            x.data()[((s * ci + c) * hh + i as usize) * ww + j as usize]
        }
    };
    let mut out = Vec::with_capacity(n * co * hh * ww);
    for s in 0..n {
        for o in 0..co {
            for i in 0..hh {
                for j in 0..ww {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let wv = w.data()[((o * ci + c) * 3 + di) * 3 + dj];
                                acc += wv
                                    * at(
                                        s,
                                        c,
                                        i as isize + di as isize - 1,
                                        j as isize + dj as isize - 1,
                                    );
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Piecewise-linear interpolation through `(i / (n - 1), x_(i))`, found by scanning.
pub fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 1 {
        return s[0];
    }
    let step = 1.0 / (n - 1) as f64;
    for i in 0..n - 1 {
        let (a, b) = (i as f64 * step, (i + 1) as f64 * step);
        if q >= a - 1e-15 && q <= b + 1e-15 {
            let t = ((q - a) / step).clamp(0.0, 1.0);
            return s[i] * (1.0 - t) + s[i + 1] * t;
        }
    }
    unreachable!()
}

/// Largest elementwise error relative to the largest reference magnitude.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    got.iter()
        .zip(want)
        .fold(0.0f64, |a, (g, w)| a.max((g - w).abs()))
        / scale
}
