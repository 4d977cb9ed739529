//! Fused GRU layer with backpropagation through time.
//!
//! Gate rows are stacked `[update; reset; candidate]` in both the input
//! weights `w_x: [3H, F]` and the recurrent weights `w_h: [3H, H]`, with one
//! bias `b: [3H]`:
//!
//! ```text
//! z = sigmoid(Wz x + Uz h + bz)
//! r = sigmoid(Wr x + Ur h + br)
//! n = tanh(Wn x + Un (r * h) + bn)
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Sequences shorter than the padded length stop updating at their true
//! length; padded output rows are zero.

use crate::par::Exec;

#[derive(Clone, Copy, Debug)]
pub struct GruDims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Per-step activations kept for the backward pass, `[N, T, H]` each.
pub struct GruCache {
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `out[o] += sum_i m[o, i] * v[i]` for a row-major `m` with `v.len()` columns.
fn matvec_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out[i] += sum_o m[o, i] * v[o]`.
fn matvec_t_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&vo, row) in v.iter().zip(m.chunks_exact(cols)) {
        if vo == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += vo * a;
        }
    }
}

/// `m[o, i] += a[o] * b[i]`.
fn outer_acc(a: &[f64], b: &[f64], m: &mut [f64]) {
    let cols = b.len();
    for (&ao, row) in a.iter().zip(m.chunks_exact_mut(cols)) {
        if ao == 0.0 {
            continue;
        }
        for (r, bi) in row.iter_mut().zip(b) {
            *r += ao * bi;
        }
    }
}

struct SampleForward {
    out: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    exec: Exec,
    x: &[f64],
    w_x: &[f64],
    w_h: &[f64],
    b: &[f64],
    h0: Option<&[f64]>,
    lengths: &[usize],
    d: GruDims,
) -> (Vec<f64>, GruCache) {
    let hd = d.hidden;
    let per = exec.map_range(d.batch, |s| {
        let len = lengths[s].min(d.steps);
        let mut res = SampleForward {
            out: vec![0.0; d.steps * hd],
            h_prev: vec![0.0; d.steps * hd],
            z: vec![0.0; d.steps * hd],
            r: vec![0.0; d.steps * hd],
            n: vec![0.0; d.steps * hd],
        };
        let mut h = h0.map_or_else(|| vec![0.0; hd], |h| h[s * hd..(s + 1) * hd].to_vec());
        let mut gx = vec![0.0; 3 * hd];
        let mut gh = vec![0.0; 2 * hd];
        let mut rh = vec![0.0; hd];
        let mut un = vec![0.0; hd];
        for t in 0..len {
            let xt = &x[(s * d.steps + t) * d.input..][..d.input];
            gx.copy_from_slice(b);
            matvec_acc(w_x, xt, &mut gx);
            gh.iter_mut().for_each(|v| *v = 0.0);
            matvec_acc(&w_h[..2 * hd * hd], &h, &mut gh);
            let o = t * hd;
            for j in 0..hd {
                res.z[o + j] = sigmoid(gx[j] + gh[j]);
                res.r[o + j] = sigmoid(gx[hd + j] + gh[hd + j]);
                rh[j] = res.r[o + j] * h[j];
            }
            un.iter_mut().for_each(|v| *v = 0.0);
            matvec_acc(&w_h[2 * hd * hd..], &rh, &mut un);
            for j in 0..hd {
                let nn = (gx[2 * hd + j] + un[j]).tanh();
                let z = res.z[o + j];
                res.n[o + j] = nn;
                res.h_prev[o + j] = h[j];
                h[j] = (1.0 - z) * nn + z * h[j];
            }
            res.out[o..o + hd].copy_from_slice(&h);
        }
        res
    });
    let total = d.batch * d.steps * hd;
    let mut out = Vec::with_capacity(total);
    let mut cache = GruCache {
        h_prev: Vec::with_capacity(total),
        z: Vec::with_capacity(total),
        r: Vec::with_capacity(total),
        n: Vec::with_capacity(total),
    };
    for p in per {
        out.extend_from_slice(&p.out);
        cache.h_prev.extend_from_slice(&p.h_prev);
        cache.z.extend_from_slice(&p.z);
        cache.r.extend_from_slice(&p.r);
        cache.n.extend_from_slice(&p.n);
    }
    (out, cache)
}

pub struct GruGrads {
    pub input: Option<Vec<f64>>,
    pub w_x: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b: Vec<f64>,
    pub h0: Vec<f64>,
}

struct SampleGrads {
    input: Vec<f64>,
    w_x: Vec<f64>,
    w_h: Vec<f64>,
    b: Vec<f64>,
    h0: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    exec: Exec,
    x: &[f64],
    w_x: &[f64],
    w_h: &[f64],
    cache: &GruCache,
    grad_out: &[f64],
    lengths: &[usize],
    d: GruDims,
    need_input: bool,
) -> GruGrads {
    let hd = d.hidden;
    let per = exec.map_range(d.batch, |s| {
        let len = lengths[s].min(d.steps);
        let mut g = SampleGrads {
            input: vec![0.0; if need_input { d.steps * d.input } else { 0 }],
            w_x: vec![0.0; w_x.len()],
            w_h: vec![0.0; w_h.len()],
            b: vec![0.0; 3 * hd],
            h0: vec![0.0; hd],
        };
        let mut carry = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd];
        let mut rh = vec![0.0; hd];
        let mut drh = vec![0.0; hd];
        let (uz_ur, un) = w_h.split_at(2 * hd * hd);
        for t in (0..len).rev() {
            let o = (s * d.steps + t) * hd;
            let hp = &cache.h_prev[o..o + hd];
            let z = &cache.z[o..o + hd];
            let r = &cache.r[o..o + hd];
            let nv = &cache.n[o..o + hd];
            let mut dhp = vec![0.0; hd];
            for j in 0..hd {
                let dh = grad_out[o + j] + carry[j];
                let dn = dh * (1.0 - z[j]);
                let dz = dh * (hp[j] - nv[j]);
                dhp[j] = dh * z[j];
                da[2 * hd + j] = dn * (1.0 - nv[j] * nv[j]);
                da[j] = dz * z[j] * (1.0 - z[j]);
                rh[j] = r[j] * hp[j];
            }
            let dcand = &da[2 * hd..];
            outer_acc(dcand, &rh, &mut g.w_h[2 * hd * hd..]);
            drh.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(un, dcand, &mut drh);
            for j in 0..hd {
                let dr = drh[j] * hp[j];
                dhp[j] += drh[j] * r[j];
                da[hd + j] = dr * r[j] * (1.0 - r[j]);
            }
            outer_acc(&da[..2 * hd], hp, &mut g.w_h[..2 * hd * hd]);
            matvec_t_acc(uz_ur, &da[..2 * hd], &mut dhp);
            let xt = &x[(s * d.steps + t) * d.input..][..d.input];
            outer_acc(&da, xt, &mut g.w_x);
            for (bj, dj) in g.b.iter_mut().zip(&da) {
                *bj += dj;
            }
            if need_input {
                matvec_t_acc(w_x, &da, &mut g.input[t * d.input..(t + 1) * d.input]);
            }
            carry = dhp;
        }
        g.h0 = carry;
        g
    });
    let mut out = GruGrads {
        input: need_input.then(|| Vec::with_capacity(d.batch * d.steps * d.input)),
        w_x: vec![0.0; w_x.len()],
        w_h: vec![0.0; w_h.len()],
        b: vec![0.0; 3 * hd],
        h0: Vec::with_capacity(d.batch * hd),
    };
    for p in per {
        if let Some(inp) = out.input.as_mut() {
            inp.extend_from_slice(&p.input);
        }
        for (a, v) in out.w_x.iter_mut().zip(&p.w_x) {
            *a += v;
        }
        for (a, v) in out.w_h.iter_mut().zip(&p.w_h) {
            *a += v;
        }
        for (a, v) in out.b.iter_mut().zip(&p.b) {
            *a += v;
        }
        out.h0.extend_from_slice(&p.h0);
    }
    out
}
