use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::rir::{rir_length, simulate_rir};
use super::{MicArray, MultichannelAudio, RoomSpec, Trajectory, DEFAULT_SAMPLE_RATE};
use crate::error::{arg_err, Result};
use crate::par;

pub const DEFAULT_BLOCK_MS: f64 = 50.0;

struct Block {
    /// First and one-past-last output sample this block contributes to.
    lo: usize,
    hi: usize,
    center: f64,
    prev_center: Option<f64>,
    next_center: Option<f64>,
}

impl Block {
    fn weight(&self, t: usize, len: f64) -> f64 {
        let t = t as f64;
        if t <= self.center {
            self.prev_center.map_or(1.0, |c| (t - c) / len)
        } else {
            self.next_center.map_or(1.0, |c| (c - t) / len)
        }
    }
}

fn plan_blocks(samples: usize, block: usize) -> Vec<Block> {
    let count = samples.div_ceil(block);
    let center = |b: usize| (b as f64 + 0.5) * block as f64;
    (0..count)
        .map(|b| {
            let prev_center = (b > 0).then(|| center(b - 1));
            let next_center = (b + 1 < count).then(|| center(b + 1));
            Block {
                lo: prev_center.map_or(0, |c| c.ceil() as usize),
                hi: next_center.map_or(samples, |c| (c.floor() as usize + 1).min(samples)),
                center: center(b),
                prev_center,
                next_center,
            }
        })
        .collect()
}

/// Linear convolution through a zero-padded FFT.
pub(crate) fn fft_convolve(planner: &mut FftPlanner<f64>, a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![];
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut v = vec![Complex64::default(); n];
        for (d, s) in v.iter_mut().zip(x) {
            d.re = *s;
        }
        v
    };
    let (mut fa, mut fb) = (load(a), load(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|z| z.re / n as f64).collect()
}

/// Renders `dry` along `traj` with one RIR per (block, mic) taken at the
/// block-center position. Per-block convolutions are cross-faded with linear
/// ramps running between adjacent block centers.
pub fn render_moving_source(
    dry: &[f64],
    traj: &Trajectory,
    room: &RoomSpec,
    array: &MicArray,
    block_ms: f64,
    max_order: usize,
) -> Result<MultichannelAudio> {
    if !(block_ms > 0.0) {
        return Err(arg_err!("block length must be positive, got {block_ms} ms"));
    }
    if dry.len() != traj.num_samples() {
        return Err(arg_err!(
            "dry signal has {} samples, trajectory {}",
            dry.len(),
            traj.num_samples()
        ));
    }
    if dry.is_empty() {
        return Err(arg_err!("empty dry signal"));
    }
    array.validate(room)?;
    let fs = DEFAULT_SAMPLE_RATE;
    let samples = dry.len();
    let block = ((block_ms * fs as f64 / 1000.0).round() as usize).max(1);
    let blocks = plan_blocks(samples, block);
    let rir_len = rir_length(room, max_order, fs);
    let sources: Vec<_> = blocks
        .iter()
        .map(|b| traj.positions[(b.center.floor() as usize).min(samples - 1)])
        .collect();

    let channels: Vec<Result<Vec<f64>>> = par::map_range(array.len(), |m| {
        let mic = array.absolute(m);
        let mut planner = FftPlanner::new();
        let mut out = vec![0.0; samples];
        for (b, src) in blocks.iter().zip(&sources) {
            let rir = simulate_rir(room, *src, mic, max_order, rir_len, fs)?;
            let start = (b.lo + 1).saturating_sub(rir_len);
            let conv = fft_convolve(&mut planner, &dry[start..b.hi], &rir);
            for t in b.lo..b.hi {
                out[t] += b.weight(t, block as f64) * conv[t - start];
            }
        }
        Ok(out)
    });
    MultichannelAudio::new(channels.into_iter().collect::<Result<_>>()?, fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        let blocks = plan_blocks(1000, 160);
        for t in 0..1000 {
            let total: f64 = blocks
                .iter()
                .filter(|b| (b.lo..b.hi).contains(&t))
                .map(|b| b.weight(t, 160.0))
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "t = {t}: {total}");
        }
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..11).map(|i| (i as f64 * 1.3).cos()).collect();
        let got = fft_convolve(&mut FftPlanner::new(), &a, &b);
        for (n, g) in got.iter().enumerate() {
            let mut direct = 0.0;
            for (k, bk) in b.iter().enumerate() {
                if n >= k && n - k < a.len() {
                    direct += a[n - k] * bk;
                }
            }
            assert!((g - direct).abs() < 1e-12);
        }
    }
}
