//! 3x3 same-padding cross-correlation over `[N, C, H, W]` tensors.
//!
//! Each input plane is copied once into a zero-bordered `(H+2) x (W+2)` buffer.
//! Output rows are then produced in that padded row pitch, which turns every
//! `(c_in, ky, kx)` tap into one long contiguous multiply-add; the two junk
//! columns per row are dropped afterwards.

use crate::par::Exec;

/// Geometry of a conv call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn pitch(&self) -> usize {
        self.width + 2
    }
    fn padded_plane(&self) -> usize {
        (self.height + 2) * self.pitch()
    }
    fn wide_plane(&self) -> usize {
        self.height * self.pitch()
    }
    fn plane(&self) -> usize {
        self.height * self.width
    }
    /// Number of wide-layout outputs touched by every tap.
    fn span(&self) -> usize {
        self.wide_plane() - 2
    }
}

/// Zero-bordered copy of every input plane.
pub fn pad_input(exec: Exec, x: &[f64], d: ConvDims) -> Vec<f64> {
    let pitch = d.pitch();
    let mut padded = vec![0.0; d.batch * d.c_in * d.padded_plane()];
    exec.for_each_chunk_mut(&mut padded, d.padded_plane(), |p, dst| {
        let src = &x[p * d.plane()..(p + 1) * d.plane()];
        for y in 0..d.height {
            let row = (y + 1) * pitch + 1;
            dst[row..row + d.width].copy_from_slice(&src[y * d.width..(y + 1) * d.width]);
        }
    });
    padded
}

/// Forward pass on an already padded input.
pub fn forward_padded(
    exec: Exec,
    padded: &[f64],
    weight: &[f64],
    bias: &[f64],
    d: ConvDims,
) -> Vec<f64> {
    let pitch = d.pitch();
    let span = d.span();
    let mut out = vec![0.0; d.batch * d.c_out * d.plane()];
    exec.for_each_chunk_mut(&mut out, d.plane(), |p, dst| {
        let (n, co) = (p / d.c_out, p % d.c_out);
        let mut wide = vec![bias[co]; d.wide_plane()];
        for ci in 0..d.c_in {
            let src = &padded[(n * d.c_in + ci) * d.padded_plane()..][..d.padded_plane()];
            let kernel = &weight[(co * d.c_in + ci) * 9..][..9];
            accumulate_taps(&mut wide[..span], src, kernel, pitch);
        }
        for y in 0..d.height {
            dst[y * d.width..(y + 1) * d.width]
                .copy_from_slice(&wide[y * pitch..y * pitch + d.width]);
        }
    });
    out
}

/// Plain forward pass.
pub fn forward(exec: Exec, x: &[f64], weight: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let padded = pad_input(exec, x, d);
    forward_padded(exec, &padded, weight, bias, d)
}

/// `out[i] += sum_t kernel[t] * src[i + off_t]` over the nine 3x3 offsets
/// `off_t = ky * pitch + kx`.
fn accumulate_taps(out: &mut [f64], src: &[f64], kernel: &[f64], pitch: usize) {
    let n = out.len();
    let t: [&[f64]; 9] = std::array::from_fn(|t| &src[(t / 3) * pitch + t % 3..][..n]);
    let k: [f64; 9] = kernel.try_into().expect("3x3 kernel");
    let (t0, t1, t2, t3, t4, t5, t6, t7, t8) =
        (t[0], t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8]);
    for i in 0..n {
        out[i] += k[0] * t0[i]
            + k[1] * t1[i]
            + k[2] * t2[i]
            + k[3] * t3[i]
            + k[4] * t4[i]
            + k[5] * t5[i]
            + k[6] * t6[i]
            + k[7] * t7[i]
            + k[8] * t8[i];
    }
}

/// `dots[t] = sum_i g[i] * src[i + off_t]` for the nine 3x3 offsets.
fn tap_dots(g: &[f64], src: &[f64], pitch: usize) -> [f64; 9] {
    const LANES: usize = 4;
    let n = g.len();
    let taps: [&[f64]; 9] = std::array::from_fn(|t| &src[(t / 3) * pitch + t % 3..][..n]);
    let mut acc = [[0.0; LANES]; 9];
    let full = n / LANES * LANES;
    for (c, gc) in g[..full].chunks_exact(LANES).enumerate() {
        let gc: &[f64; LANES] = gc.try_into().expect("chunk");
        for (a, tap) in acc.iter_mut().zip(&taps) {
            let sc: &[f64; LANES] = tap[c * LANES..(c + 1) * LANES].try_into().expect("chunk");
            for j in 0..LANES {
                a[j] += gc[j] * sc[j];
            }
        }
    }
    let mut dots = [0.0; 9];
    for ((d, a), tap) in dots.iter_mut().zip(&acc).zip(&taps) {
        let tail: f64 = g[full..].iter().zip(&tap[full..]).map(|(x, y)| x * y).sum();
        *d = (a[0] + a[1]) + (a[2] + a[3]) + tail;
    }
    dots
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn backward(
    exec: Exec,
    padded: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: ConvDims,
    need_input: bool,
) -> ConvGrads {
    let pitch = d.pitch();
    let span = d.span();

    // Upstream gradient in the wide layout; junk columns stay zero.
    let mut wide = vec![0.0; d.batch * d.c_out * d.wide_plane()];
    exec.for_each_chunk_mut(&mut wide, d.wide_plane(), |p, dst| {
        let src = &grad_out[p * d.plane()..(p + 1) * d.plane()];
        for y in 0..d.height {
            dst[y * pitch..y * pitch + d.width]
                .copy_from_slice(&src[y * d.width..(y + 1) * d.width]);
        }
    });

    let bias_grad: Vec<f64> = (0..d.c_out)
        .map(|co| {
            (0..d.batch)
                .map(|n| {
                    grad_out[(n * d.c_out + co) * d.plane()..][..d.plane()]
                        .iter()
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();

    let mut weight_grad = vec![0.0; weight.len()];
    exec.for_each_chunk_mut(&mut weight_grad, d.c_in * 9, |co, dst| {
        for n in 0..d.batch {
            let g = &wide[(n * d.c_out + co) * d.wide_plane()..][..d.wide_plane()];
            for ci in 0..d.c_in {
                let src = &padded[(n * d.c_in + ci) * d.padded_plane()..][..d.padded_plane()];
                let dots = tap_dots(&g[..span], src, pitch);
                for (t, v) in dots.iter().enumerate() {
                    dst[ci * 9 + t] += v;
                }
            }
        }
    });

    let input = need_input.then(|| {
        let mut grad_in = vec![0.0; d.batch * d.c_in * d.plane()];
        exec.for_each_chunk_mut(&mut grad_in, d.plane(), |p, dst| {
            let (n, ci) = (p / d.c_in, p % d.c_in);
            // Upstream planes with a zero apron so every tap reads in bounds.
            let apron = 2 * pitch + 2;
            let mut acc = vec![0.0; d.padded_plane()];
            let mut flipped = [0.0; 9];
            let mut gpad = vec![0.0; d.padded_plane() + 2 * apron];
            for co in 0..d.c_out {
                let g = &wide[(n * d.c_out + co) * d.wide_plane()..][..d.wide_plane()];
                let kernel = &weight[(co * d.c_in + ci) * 9..][..9];
                for (t, f) in flipped.iter_mut().enumerate() {
                    *f = kernel[8 - t];
                }
                gpad[apron..apron + span].copy_from_slice(&g[..span]);
                accumulate_taps(&mut acc, &gpad[apron - (2 * pitch + 2)..], &flipped, pitch);
            }
            for y in 0..d.height {
                let row = (y + 1) * pitch + 1;
                dst[y * d.width..(y + 1) * d.width].copy_from_slice(&acc[row..row + d.width]);
            }
        });
        grad_in
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias: bias_grad,
    }
}
