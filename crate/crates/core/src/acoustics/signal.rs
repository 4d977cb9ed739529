use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::MultichannelAudio;
use crate::error::{arg_err, Error, Result};

/// Mono excitation with a per-sample activity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DrySignal {
    pub samples: Vec<f64>,
    pub active: Vec<bool>,
}

struct Bandpass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x: [f64; 2],
    y: [f64; 2],
}

impl Bandpass {
    fn new(center_hz: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * center_hz / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Bandpass {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x[1] - self.a1 * self.y[0] - self.a2 * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// Speech-like excitation: bursts of amplitude-modulated, partly band-passed
/// noise separated by silent pauses.
pub fn speech_like(num_samples: usize, sample_rate: u32, seed: u64) -> DrySignal {
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0; num_samples];
    let mut active = vec![false; num_samples];
    let fade = (0.01 * fs) as usize;
    let mut pos = (rng.gen_range(0.0..0.2) * fs) as usize;
    while pos < num_samples {
        let len = ((rng.gen_range(0.3..1.2) * fs) as usize).min(num_samples - pos);
        let mut bp = Bandpass::new(rng.gen_range(400.0..2500.0), rng.gen_range(0.7..2.0), fs);
        let rate = rng.gen_range(3.0..6.0);
        let phase = rng.gen_range(0.0..std::f64::consts::PI);
        for i in 0..len {
            let w: f64 = StandardNormal.sample(&mut rng);
            let t = i as f64 / fs;
            let env = 0.3 + 0.7 * (std::f64::consts::PI * rate * t + phase).sin().abs();
            let edge = (i.min(len - 1 - i) as f64 / fade.max(1) as f64).min(1.0);
            samples[pos + i] = 0.1 * env * edge * (0.4 * w + 2.0 * bp.tick(w));
            active[pos + i] = true;
        }
        pos += len + (rng.gen_range(0.15..0.5) * fs) as usize;
    }
    DrySignal { samples, active }
}

fn active_power(audio: &MultichannelAudio, mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ch in &audio.samples {
        for (v, _) in ch.iter().zip(mask).filter(|(_, a)| **a) {
            sum += v * v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `speech + g * noise` with `g` chosen so that the channel-averaged power
/// ratio over active samples equals `snr_db`.
pub fn mix_at_snr(
    speech: &MultichannelAudio,
    noise: &MultichannelAudio,
    snr_db: f64,
    active_mask: &[bool],
) -> Result<MultichannelAudio> {
    if speech.num_channels() != noise.num_channels()
        || speech.num_samples() != noise.num_samples()
        || speech.sample_rate != noise.sample_rate
    {
        return Err(arg_err!(
            "speech and noise must agree in channels, length and sample rate"
        ));
    }
    if active_mask.len() != speech.num_samples() {
        return Err(arg_err!(
            "activity mask has {} samples, audio {}",
            active_mask.len(),
            speech.num_samples()
        ));
    }
    let ps = active_power(speech, active_mask);
    let pn = active_power(noise, active_mask);
    if ps == 0.0 {
        return Err(Error::Numerical(
            "speech has zero power over active samples".into(),
        ));
    }
    if pn == 0.0 {
        return Err(Error::Numerical(
            "noise has zero power over active samples".into(),
        ));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = speech
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + gain * b).collect())
        .collect();
    MultichannelAudio::new(samples, speech.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speech_like_has_pauses_and_is_deterministic() {
        let a = speech_like(48_000, 16_000, 3);
        assert_eq!(a, speech_like(48_000, 16_000, 3));
        let on = a.active.iter().filter(|x| **x).count();
        assert!(on > 0 && on < a.active.len());
        for (v, act) in a.samples.iter().zip(&a.active) {
            if !act {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn snr_scaling_rules() {
        let s = MultichannelAudio::new(vec![vec![1.0, -1.0, 1.0, -1.0]], 16_000).unwrap();
        let n = MultichannelAudio::new(vec![vec![-1.0, -1.0, 1.0, 1.0]], 16_000).unwrap();
        let mask = [true; 4];
        let out = mix_at_snr(&s, &n, 0.0, &mask).unwrap();
        assert_eq!(out.samples[0], vec![0.0, -2.0, 2.0, 0.0]);
        let out = mix_at_snr(&s, &n, 20.0, &mask).unwrap();
        assert!((out.samples[0][1] + 1.1).abs() < 1e-12);
        let zero = MultichannelAudio::new(vec![vec![0.0; 4]], 16_000).unwrap();
        assert!(mix_at_snr(&zero, &n, 0.0, &mask).is_err());
        assert!(mix_at_snr(&s, &zero, 0.0, &mask).is_err());
    }
}
