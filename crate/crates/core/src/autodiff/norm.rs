//! Per-channel batch normalization over `[N, C, H, W]` with optional
//! per-sample valid widths. Positions at or beyond a sample's width are
//! excluded from the statistics and produce exact zeros.

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct NormDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Batch statistics from a train-mode pass; variance is unbiased, as used for
/// running-statistic updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub struct NormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

fn valid_width(lengths: Option<&[usize]>, n: usize, width: usize) -> usize {
    lengths.map_or(width, |l| l[n].min(width))
}

/// Visits each valid `(flat_index)` of channel `c`.
fn for_valid(d: NormDims, lengths: Option<&[usize]>, c: usize, mut f: impl FnMut(usize)) {
    for n in 0..d.batch {
        let w = valid_width(lengths, n, d.width);
        let base = (n * d.channels + c) * d.height * d.width;
        for y in 0..d.height {
            let row = base + y * d.width;
            for i in row..row + w {
                f(i);
            }
        }
    }
}

pub fn valid_count(d: NormDims, lengths: Option<&[usize]>) -> usize {
    (0..d.batch)
        .map(|n| valid_width(lengths, n, d.width) * d.height)
        .sum()
}

/// Train mode uses batch statistics; eval mode uses the supplied running
/// mean/variance.
pub fn forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
    lengths: Option<&[usize]>,
    d: NormDims,
) -> (Vec<f64>, NormCache, Option<BatchStats>) {
    let mut out = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; d.channels];
    let count = valid_count(d, lengths);
    let mut stats = BatchStats {
        mean: vec![0.0; d.channels],
        var_unbiased: vec![0.0; d.channels],
    };
    for c in 0..d.channels {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let mut sum = 0.0;
                for_valid(d, lengths, c, |i| sum += x[i]);
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for_valid(d, lengths, c, |i| sq += (x[i] - mean).powi(2));
                stats.mean[c] = mean;
                stats.var_unbiased[c] = if count > 1 {
                    sq / (count - 1) as f64
                } else {
                    0.0
                };
                (mean, sq / count as f64)
            }
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = is;
        for_valid(d, lengths, c, |i| {
            let xh = (x[i] - mean) * is;
            x_hat[i] = xh;
            out[i] = gamma[c] * xh + beta[c];
        });
    }
    let train = running.is_none();
    (
        out,
        NormCache {
            x_hat,
            inv_std,
            train,
        },
        train.then_some(stats),
    )
}

pub struct NormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn backward(
    cache: &NormCache,
    gamma: &[f64],
    grad_out: &[f64],
    lengths: Option<&[usize]>,
    d: NormDims,
) -> NormGrads {
    let count = valid_count(d, lengths) as f64;
    let mut input = vec![0.0; grad_out.len()];
    let mut g_gamma = vec![0.0; d.channels];
    let mut g_beta = vec![0.0; d.channels];
    for c in 0..d.channels {
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for_valid(d, lengths, c, |i| {
            sum_dy += grad_out[i];
            sum_dy_xh += grad_out[i] * cache.x_hat[i];
        });
        g_gamma[c] = sum_dy_xh;
        g_beta[c] = sum_dy;
        let scale = gamma[c] * cache.inv_std[c];
        if cache.train {
            let (mdy, mdyx) = (sum_dy / count, sum_dy_xh / count);
            for_valid(d, lengths, c, |i| {
                input[i] = scale * (grad_out[i] - mdy - cache.x_hat[i] * mdyx);
            });
        } else {
            for_valid(d, lengths, c, |i| input[i] = scale * grad_out[i]);
        }
    }
    NormGrads {
        input,
        gamma: g_gamma,
        beta: g_beta,
    }
}
