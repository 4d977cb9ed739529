use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{distance, MicArray, MultichannelAudio, DEFAULT_SOUND_SPEED};
use crate::error::{arg_err, Error, Result};

const NFFT: usize = 256;
const HOP: usize = NFFT / 2;
/// Relative tolerance on negative eigenvalues before a target is rejected.
const PSD_JITTER: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    SphericalIsotropic,
    SpatiallyWhite,
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Spherically isotropic coherence `sinc(2 pi f d / c)` for every mic pair.
pub fn coherence_matrix(array: &MicArray, freq_hz: f64, sound_speed: f64) -> DMatrix<f64> {
    let m = array.len();
    DMatrix::from_fn(m, m, |i, j| {
        let d = distance(array.positions[i], array.positions[j]);
        sinc(2.0 * std::f64::consts::PI * freq_hz * d / sound_speed)
    })
}

/// Symmetric square root `V sqrt(Lambda) V^T` of `gamma`. Unlike a bare
/// eigenvector factor it varies smoothly with frequency.
fn mixing_matrix(gamma: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(gamma);
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v: &f64| a.max(v.abs()))
        .max(1.0);
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -PSD_JITTER * scale {
            return Err(Error::Numerical(format!(
                "target coherence matrix is not positive semidefinite (eigenvalue {lam:e})"
            )));
        }
        let s = lam.max(0.0).sqrt();
        scaled.column_mut(j).iter_mut().for_each(|v| *v *= s);
    }
    Ok(scaled * eig.eigenvectors.transpose())
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit-variance noise whose inter-channel coherence follows `model`.
pub fn generate_diffuse_noise(
    array: &MicArray,
    num_samples: usize,
    sample_rate: u32,
    model: NoiseModel,
    seed: u64,
) -> Result<MultichannelAudio> {
    if num_samples == 0 {
        return Err(arg_err!("noise length must be positive"));
    }
    let m = array.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if model == NoiseModel::SpatiallyWhite {
        let chans = (0..m).map(|_| white(&mut rng, num_samples)).collect();
        return MultichannelAudio::new(chans, sample_rate);
    }

    let frames = (num_samples + NFFT).div_ceil(HOP) + 1;
    let padded = (frames - 1) * HOP + NFFT;
    let raw: Vec<Vec<f64>> = (0..m).map(|_| white(&mut rng, padded)).collect();
    let window: Vec<f64> = crate::features::hann(NFFT)
        .iter()
        .map(|w| w.sqrt())
        .collect();

    let mixers = (0..=NFFT / 2)
        .map(|k| {
            let f = k as f64 * sample_rate as f64 / NFFT as f64;
            mixing_matrix(coherence_matrix(array, f, DEFAULT_SOUND_SPEED))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(NFFT);
    let inv = planner.plan_fft_inverse(NFFT);
    let mut out = vec![vec![0.0; padded]; m];
    let mut spec = vec![vec![Complex64::default(); NFFT]; m];
    let mut mixed = vec![vec![Complex64::default(); NFFT]; m];
    for fr in 0..frames {
        let start = fr * HOP;
        for (c, s) in spec.iter_mut().enumerate() {
            for (i, v) in s.iter_mut().enumerate() {
                *v = Complex64::new(raw[c][start + i] * window[i], 0.0);
            }
            fwd.process(s);
        }
        for k in 0..NFFT {
            let mix = &mixers[k.min(NFFT - k)];
            for (i, row) in mixed.iter_mut().enumerate() {
                row[k] = (0..m).map(|j| spec[j][k] * mix[(i, j)]).sum();
            }
        }
        for (c, row) in mixed.iter_mut().enumerate() {
            inv.process(row);
            for (i, v) in row.iter().enumerate() {
                out[c][start + i] += v.re / NFFT as f64 * window[i];
            }
        }
    }
    let chans = out
        .into_iter()
        .map(|c| c[NFFT - HOP..NFFT - HOP + num_samples].to_vec())
        .collect();
    MultichannelAudio::new(chans, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_mics_fully_coherent() {
        let arr = MicArray {
            positions: vec![[0.0; 3], [0.0; 3]],
            origin: [1.0; 3],
        };
        for f in [0.0, 1000.0, 7999.0] {
            let g = coherence_matrix(&arr, f, 343.0);
            assert_eq!(g[(0, 1)], 1.0);
        }
    }

    #[test]
    fn first_sinc_zero() {
        let arr = MicArray {
            positions: vec![[0.0; 3], [0.06, 0.0, 0.0]],
            origin: [1.0; 3],
        };
        let f: f64 = 0.5 * 343.0 / 0.06;
        assert!((f - 2858.33).abs() < 0.01);
        assert!(coherence_matrix(&arr, f, 343.0)[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn mixing_reproduces_target() {
        let arr = MicArray::circular9([0.0; 3]);
        let g = coherence_matrix(&arr, 1500.0, 343.0);
        let c = mixing_matrix(g.clone()).unwrap();
        assert!((&c * c.transpose() - g).abs().max() < 1e-10);
    }

    #[test]
    fn indefinite_target_is_rejected() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(mixing_matrix(g).is_err());
    }
}
