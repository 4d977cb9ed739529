//! Network input features, voice activity, and DoA likelihood coding.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::acoustics::MultichannelAudio;
use crate::autodiff::Tensor;
use crate::error::{arg_err, shape_err, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 32 ms at 16 kHz.
pub const WINDOW: usize = 512;
/// 20 ms at 16 kHz.
pub const HOP: usize = 320;
pub const FFT_SIZE: usize = 512;
pub const NUM_BINS: usize = FFT_SIZE / 2 + 1;

/// Number of candidate azimuths; grid step is one degree over `[0, 180)`.
pub const NUM_DIRECTIONS: usize = 180;
/// Width of the Gaussian likelihood bump, degrees.
pub const SIGMA_DEG: f64 = 16.0;
pub const DEFAULT_VAD_THRESHOLD: f64 = 0.3;

/// Frame layout shared by the STFT and the VAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub window: usize,
    pub hop: usize,
}

impl Default for Framing {
    fn default() -> Self {
        Framing {
            window: WINDOW,
            hop: HOP,
        }
    }
}

impl Framing {
    /// `floor((S - window) / hop) + 1`, or 0 when shorter than one window.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.hop + 1
        }
    }

    /// Sample index at the center of frame `l`.
    pub fn frame_center(&self, l: usize) -> usize {
        l * self.hop + self.window / 2
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT, laid out `[M][K][L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub sample_rate: u32,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, m: usize, k: usize, l: usize) -> Complex64 {
        self.data[(m * self.bins + k) * self.frames + l]
    }
}

/// Reusable forward transform for the fixed analysis setup.
pub struct StftPlan {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    framing: Framing,
}

impl Default for StftPlan {
    fn default() -> Self {
        let mut planner = FftPlanner::new();
        StftPlan {
            fft: planner.plan_fft_forward(FFT_SIZE),
            window: hann(WINDOW),
            framing: Framing::default(),
        }
    }
}

impl StftPlan {
    pub fn stft(&self, audio: &MultichannelAudio) -> Result<Spectrogram> {
        if audio.sample_rate != SAMPLE_RATE {
            return Err(arg_err!(
                "stft expects {SAMPLE_RATE} Hz audio, got {}",
                audio.sample_rate
            ));
        }
        let s = audio.num_samples();
        let frames = self.framing.frame_count(s);
        if frames == 0 {
            return Err(arg_err!(
                "audio of {s} samples is shorter than one {WINDOW}-sample window"
            ));
        }
        let m = audio.num_channels();
        let mut data = vec![Complex64::default(); m * NUM_BINS * frames];
        let mut buf = vec![Complex64::default(); FFT_SIZE];
        for (c, ch) in audio.samples.iter().enumerate() {
            for l in 0..frames {
                let start = l * self.framing.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(ch[start + i] * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                for k in 0..NUM_BINS {
                    data[(c * NUM_BINS + k) * frames + l] = buf[k];
                }
            }
        }
        Ok(Spectrogram {
            channels: m,
            bins: NUM_BINS,
            frames,
            sample_rate: audio.sample_rate,
            data,
        })
    }
}

/// Hann-windowed 512-point STFT with a 320-sample hop.
pub fn stft(audio: &MultichannelAudio) -> Result<Spectrogram> {
    StftPlan::default().stft(audio)
}

/// Real/imaginary stack `[2M, K, L]`: channel `c` holds the real part of mic
/// `c`, channel `M + c` its imaginary part.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTensor(pub Tensor);

impl InputTensor {
    pub fn frames(&self) -> usize {
        self.0.shape()[2]
    }
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

pub fn stack_reim(spec: &Spectrogram) -> InputTensor {
    let plane = spec.bins * spec.frames;
    let mut out = vec![0.0; 2 * spec.channels * plane];
    for (i, z) in spec.data.iter().enumerate() {
        out[i] = z.re;
        out[spec.channels * plane + i] = z.im;
    }
    InputTensor(
        Tensor::from_vec(&[2 * spec.channels, spec.bins, spec.frames], out)
            .expect("sizes agree by construction"),
    )
}

/// Inverse of [`stack_reim`].
pub fn unstack_reim(x: &InputTensor, sample_rate: u32) -> Result<Spectrogram> {
    let s = x.0.shape();
    if s.len() != 3 || !s[0].is_multiple_of(2) {
        return Err(shape_err!("cannot unstack {:?}", s));
    }
    let (m, bins, frames) = (s[0] / 2, s[1], s[2]);
    let plane = bins * frames;
    let d = x.0.data();
    let data = (0..m * plane)
        .map(|i| Complex64::new(d[i], d[m * plane + i]))
        .collect();
    Ok(Spectrogram {
        channels: m,
        bins,
        frames,
        sample_rate,
        data,
    })
}

/// Per-frame activity flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VadMask(pub Vec<bool>);

impl VadMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|a| **a).count()
    }
}

/// A frame is active when the RMS of channel 0 over the frame exceeds
/// `threshold` times the median frame RMS of the clip.
pub fn energy_vad(audio: &MultichannelAudio, framing: Framing, threshold: f64) -> VadMask {
    let Some(ch) = audio.samples.first() else {
        return VadMask(vec![]);
    };
    let frames = framing.frame_count(ch.len());
    let rms: Vec<f64> = (0..frames)
        .map(|l| {
            let seg = &ch[l * framing.hop..l * framing.hop + framing.window];
            (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt()
        })
        .collect();
    if rms.is_empty() {
        return VadMask(vec![]);
    }
    let mut sorted = rms.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    VadMask(rms.iter().map(|&r| r > threshold * median).collect())
}

/// Per-frame azimuth (radians) with an activity flag. Inactive frames may
/// carry no azimuth.
#[derive(Clone, Debug, PartialEq)]
pub struct DoaTrack {
    pub azimuth: Vec<Option<f64>>,
    pub active: Vec<bool>,
}

impl DoaTrack {
    pub fn len(&self) -> usize {
        self.active.len()
    }
    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
    /// Azimuths of active frames, degrees.
    pub fn active_degrees(&self) -> Vec<f64> {
        self.azimuth
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
            .filter_map(|(z, _)| z.map(f64::to_degrees))
            .collect()
    }
    /// Subset of frames at the given indices.
    pub fn select(&self, indices: &[usize]) -> DoaTrack {
        DoaTrack {
            azimuth: indices.iter().map(|&i| self.azimuth[i]).collect(),
            active: indices.iter().map(|&i| self.active[i]).collect(),
        }
    }
}

/// Gaussian-encoded DoA likelihood, `L x 180`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMap {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl LikelihoodMap {
    pub fn row(&self, l: usize) -> &[f64] {
        &self.values[l * NUM_DIRECTIONS..(l + 1) * NUM_DIRECTIONS]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.frames, NUM_DIRECTIONS], self.values.clone())
            .expect("row-major L x J")
    }

    pub fn select(&self, indices: &[usize]) -> LikelihoodMap {
        let mut values = Vec::with_capacity(indices.len() * NUM_DIRECTIONS);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        LikelihoodMap {
            frames: indices.len(),
            values,
        }
    }
}

/// Likelihood row for one azimuth: `exp(-(phi_i - phi)^2 / (2 sigma^2))` on
/// the one-degree grid, differences in degrees without wrap.
pub fn encode_row(azimuth_rad: f64) -> Result<[f64; NUM_DIRECTIONS]> {
    if !(0.0..std::f64::consts::PI).contains(&azimuth_rad) {
        return Err(arg_err!("azimuth {azimuth_rad} rad outside [0, pi)"));
    }
    let deg = azimuth_rad.to_degrees();
    let mut row = [0.0; NUM_DIRECTIONS];
    for (i, v) in row.iter_mut().enumerate() {
        *v = (-(i as f64 - deg).powi(2) / (2.0 * SIGMA_DEG * SIGMA_DEG)).exp();
    }
    Ok(row)
}

pub fn encode_likelihood(track: &DoaTrack) -> Result<LikelihoodMap> {
    let mut values = vec![0.0; track.len() * NUM_DIRECTIONS];
    for (l, (az, &on)) in track.azimuth.iter().zip(&track.active).enumerate() {
        if !on {
            continue;
        }
        let az = az.ok_or_else(|| arg_err!("active frame {l} has no azimuth"))?;
        values[l * NUM_DIRECTIONS..(l + 1) * NUM_DIRECTIONS].copy_from_slice(&encode_row(az)?);
    }
    Ok(LikelihoodMap {
        frames: track.len(),
        values,
    })
}

/// Grid index of the row maximum, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn decode_peak(map: &LikelihoodMap, activity: &VadMask) -> Result<DoaTrack> {
    if map.frames != activity.len() {
        return Err(shape_err!(
            "likelihood map has {} frames, activity mask {}",
            map.frames,
            activity.len()
        ));
    }
    let azimuth = (0..map.frames)
        .map(|l| activity.0[l].then(|| (argmax(map.row(l)) as f64).to_radians()))
        .collect();
    Ok(DoaTrack {
        azimuth,
        active: activity.0.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mono(x: Vec<f64>) -> MultichannelAudio {
        MultichannelAudio::new(vec![x], SAMPLE_RATE).unwrap()
    }

    #[test]
    fn framing_arithmetic() {
        assert_eq!(Framing::default().frame_count(16_000), 49);
        assert_eq!(Framing::default().frame_count(511), 0);
        assert_eq!(Framing::default().frame_count(512), 1);
    }

    #[test]
    fn short_audio_is_rejected() {
        assert!(stft(&mono(vec![0.0; 300])).is_err());
        let wrong_rate = MultichannelAudio::new(vec![vec![0.0; 1000]], 48_000).unwrap();
        assert!(stft(&wrong_rate).is_err());
    }

    #[test]
    fn zero_input_zero_spectrogram() {
        let s = stft(&mono(vec![0.0; 2000])).unwrap();
        assert!(s.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_concentrates_in_main_lobe() {
        let k0 = 40;
        let f = k0 as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let x: Vec<f64> = (0..4000)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let s = stft(&mono(x)).unwrap();
        for l in 0..s.frames {
            let total: f64 = (0..s.bins).map(|k| s.at(0, k, l).norm_sqr()).sum();
            let peak = s.at(0, k0, l).norm_sqr();
            let lobe: f64 = (k0 - 1..=k0 + 1).map(|k| s.at(0, k, l).norm_sqr()).sum();
            // Periodic Hann puts 2/3 of a bin-centered tone in the center bin
            // and the rest in its two neighbours.
            assert!((peak / total - 2.0 / 3.0).abs() < 1e-9);
            assert!(lobe / total >= 0.9);
        }
    }

    #[test]
    fn reim_stack_layout_and_round_trip() {
        let x: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                (0..1200)
                    .map(|n| ((n * (c + 3)) as f64 * 0.01).sin())
                    .collect()
            })
            .collect();
        let audio = MultichannelAudio::new(x, SAMPLE_RATE).unwrap();
        let s = stft(&audio).unwrap();
        let t = stack_reim(&s);
        assert_eq!(t.0.shape(), &[6, NUM_BINS, s.frames]);
        assert_eq!(unstack_reim(&t, SAMPLE_RATE).unwrap(), s);
        // DC bin of a real signal is real.
        let plane = NUM_BINS * s.frames;
        for l in 0..s.frames {
            assert_eq!(t.0.data()[3 * plane + l], 0.0);
        }
    }

    #[test]
    fn vad_extremes() {
        let silent = energy_vad(
            &mono(vec![0.0; 8000]),
            Framing::default(),
            DEFAULT_VAD_THRESHOLD,
        );
        assert_eq!(silent.active_count(), 0);
        let tone: Vec<f64> = (0..8000).map(|n| (n as f64 * 0.3).sin()).collect();
        let v = energy_vad(&mono(tone), Framing::default(), DEFAULT_VAD_THRESHOLD);
        assert_eq!(v.active_count(), v.len());
    }

    #[test]
    fn likelihood_values() {
        let row = encode_row(90f64.to_radians()).unwrap();
        assert_eq!(row[90], 1.0);
        assert!((row[106] - (-0.5f64).exp()).abs() < 1e-12);
        assert!(encode_row(std::f64::consts::PI).is_err());
        assert!(encode_row(-0.01).is_err());
        let track = DoaTrack {
            azimuth: vec![Some(1.0), None],
            active: vec![true, false],
        };
        let m = encode_likelihood(&track).unwrap();
        assert!(m.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_rules() {
        let uniform = LikelihoodMap {
            frames: 1,
            values: vec![0.4; NUM_DIRECTIONS],
        };
        let d = decode_peak(&uniform, &VadMask(vec![true])).unwrap();
        assert_eq!(d.azimuth[0], Some(0.0));
        let mut v = vec![0.2; NUM_DIRECTIONS];
        v[47] = 0.9;
        let m = LikelihoodMap {
            frames: 1,
            values: v,
        };
        let d = decode_peak(&m, &VadMask(vec![true])).unwrap();
        assert!((d.azimuth[0].unwrap().to_degrees() - 47.0).abs() < 1e-12);
        let d = decode_peak(&m, &VadMask(vec![false])).unwrap();
        assert_eq!(d.azimuth[0], None);
        assert!(decode_peak(&m, &VadMask(vec![])).is_err());
    }
}
