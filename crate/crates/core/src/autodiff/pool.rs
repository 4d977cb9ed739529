//! Non-overlapping max pooling over `[N, C, H, W]`, floor mode.

#[derive(Clone, Copy, Debug)]
pub struct PoolDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl PoolDims {
    pub fn out_height(&self) -> usize {
        self.height / self.k_h
    }
    pub fn out_width(&self) -> usize {
        self.width / self.k_w
    }
}

/// Pooled width of a sample with `len` valid columns.
pub fn pooled_length(len: usize, k_w: usize) -> usize {
    len / k_w
}

/// Returns pooled values plus, per output, the flat input index of the
/// winning element (first occurrence on ties). Output columns beyond a
/// sample's pooled length are zero with no winner.
pub fn forward(x: &[f64], lengths: Option<&[usize]>, d: PoolDims) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (d.out_height(), d.out_width());
    let mut out = vec![0.0; d.batch * d.channels * oh * ow];
    let mut arg = vec![usize::MAX; out.len()];
    for n in 0..d.batch {
        let valid = lengths.map_or(ow, |l| pooled_length(l[n], d.k_w).min(ow));
        for c in 0..d.channels {
            let plane = (n * d.channels + c) * d.height * d.width;
            let oplane = (n * d.channels + c) * oh * ow;
            for oy in 0..oh {
                for ox in 0..valid {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..d.k_h {
                        let row = plane + (oy * d.k_h + ky) * d.width + ox * d.k_w;
                        for i in row..row + d.k_w {
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[oplane + oy * ow + ox] = best;
                    arg[oplane + oy * ow + ox] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub fn backward(arg: &[usize], grad_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&i, &go) in arg.iter().zip(grad_out) {
        if i != usize::MAX {
            g[i] += go;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_mode_chains() {
        let mut k = 257;
        let mut seen = vec![];
        for p in [4, 2, 2, 2, 2] {
            k /= p;
            seen.push(k);
        }
        assert_eq!(seen, vec![64, 32, 16, 8, 4]);
        let mut l = 49;
        let mut seen = vec![];
        for p in [1, 1, 1, 1, 5] {
            l = pooled_length(l, p);
            seen.push(l);
        }
        assert_eq!(seen, vec![49, 49, 49, 49, 9]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let d = PoolDims {
            batch: 1,
            channels: 1,
            height: 4,
            width: 4,
            k_h: 2,
            k_w: 2,
        };
        let x = vec![1.0; 16];
        let (out, arg) = forward(&x, None, d);
        assert_eq!(out, vec![1.0; 4]);
        let g = backward(&arg, &[1.0; 4], 16);
        let hot: Vec<usize> = g
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }
}
