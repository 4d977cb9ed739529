use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sstda::acoustics::MultichannelAudio;
use sstda::features::*;

mod common;
use common::dft_bin;

fn audio(channels: Vec<Vec<f64>>) -> MultichannelAudio {
    MultichannelAudio::new(channels, SAMPLE_RATE).unwrap()
}

#[test]
fn stft_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let len = WINDOW + 2 * HOP;
    let x: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let spec = stft(&audio(x.clone())).unwrap();
    assert_eq!(spec.frames, 3);
    assert_eq!(spec.bins, 257);
    for (m, ch) in x.iter().enumerate() {
        for l in 0..3 {
            for k in [0, 1, 37, 128, 200, 256] {
                let (re, im) = dft_bin(ch, l * HOP, WINDOW, FFT_SIZE, k);
                let got = spec.at(m, k, l);
                let scale = (re * re + im * im).sqrt().max(1e-3);
                assert!(((got.re - re).powi(2) + (got.im - im).powi(2)).sqrt() <= 1e-9 * scale);
            }
        }
    }
}

#[test]
fn one_second_gives_forty_nine_frames() {
    let spec = stft(&audio(vec![vec![0.1; 16_000]; 9])).unwrap();
    let x = stack_reim(&spec);
    assert_eq!(x.0.shape(), &[18, 257, 49]);
}

#[test]
fn vad_finds_constructed_pause() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fs = SAMPLE_RATE as usize;
    let mut x = vec![0.0; 4 * fs];
    for (n, v) in x.iter_mut().enumerate() {
        if n < fs || n >= 3 * fs {
            *v = 0.5 * (n as f64 * 0.21).sin() + 0.1 * rng.gen_range(-1.0..1.0);
        } else {
            *v = 1e-4 * rng.gen_range(-1.0..1.0);
        }
    }
    let framing = Framing::default();
    let vad = energy_vad(&audio(vec![x]), framing, DEFAULT_VAD_THRESHOLD);
    for l in 0..vad.len() {
        let start = l * HOP;
        let end = start + WINDOW;
        let in_burst = end <= fs || start >= 3 * fs;
        let in_pause = start >= fs && end <= 3 * fs;
        let near_edge = [fs, 3 * fs]
            .iter()
            .any(|b| (framing.frame_center(l) as f64 - *b as f64).abs() <= 2.0 * HOP as f64);
        if near_edge {
            continue;
        }
        if in_burst {
            assert!(vad.0[l], "frame {l} should be active");
        }
        if in_pause {
            assert!(!vad.0[l], "frame {l} should be inactive");
        }
    }
}

#[test]
fn on_grid_round_trip_is_exact() {
    let azimuth: Vec<Option<f64>> = (0..180).map(|i| Some((i as f64).to_radians())).collect();
    let track = DoaTrack {
        azimuth: azimuth.clone(),
        active: vec![true; 180],
    };
    let map = encode_likelihood(&track).unwrap();
    assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    let back = decode_peak(&map, &VadMask(vec![true; 180])).unwrap();
    assert_eq!(back.azimuth, azimuth);
}

#[test]
fn encoding_shifts_with_azimuth() {
    let a = encode_row(60f64.to_radians()).unwrap();
    let b = encode_row(61f64.to_radians()).unwrap();
    for i in 1..179 {
        assert!((b[i + 1] - a[i]).abs() < 1e-12);
    }
}

#[test]
fn inactive_rows_are_zero_and_undecoded() {
    let track = DoaTrack {
        azimuth: vec![Some(0.5), Some(1.0), Some(1.5)],
        active: vec![true, false, true],
    };
    let map = encode_likelihood(&track).unwrap();
    assert!(map.row(1).iter().all(|v| *v == 0.0));
    let back = decode_peak(&map, &VadMask(track.active.clone())).unwrap();
    assert_eq!(back.azimuth[1], None);
}

proptest! {
    // The grid stops at 179 degrees without wrap, so (179.5, 180) decodes to
    // 179 and lies outside the half-step bound.
    #[test]
    fn off_grid_round_trip_within_half_degree(deg in 0.0f64..=179.5) {
        let track = DoaTrack { azimuth: vec![Some(deg.to_radians())], active: vec![true] };
        let map = encode_likelihood(&track).unwrap();
        let back = decode_peak(&map, &VadMask(vec![true])).unwrap();
        prop_assert!((back.azimuth[0].unwrap().to_degrees() - deg).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn likelihood_entries_in_unit_interval(deg in 0.0f64..179.999) {
        let row = encode_row(deg.to_radians()).unwrap();
        prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
