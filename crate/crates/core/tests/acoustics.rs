use proptest::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use sstda::acoustics::*;

mod common;
use common::{brute_force_images, dist, rir_oracle};

fn direct_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    (0..out_len)
        .map(|n| (0..h.len().min(n + 1)).map(|k| h[k] * x[n - k]).sum())
        .collect()
}

#[test]
fn direct_path_pulse_at_ten_milliseconds() {
    let room = RoomSpec::new([8.0, 6.0, 3.0], 0.0).unwrap();
    let src = [1.0, 2.0, 1.5];
    let mic = [4.43, 2.0, 1.5];
    let rir = simulate_rir(&room, src, mic, 0, 400, 16_000).unwrap();
    let amp = 1.0 / (4.0 * std::f64::consts::PI * 3.43);
    assert!((rir[160] - amp).abs() < 1e-12 * amp);
    for (i, v) in rir.iter().enumerate() {
        if i != 160 {
            assert!(v.abs() < 1e-12 * amp, "tap {i} = {v}");
        }
    }
    assert!(simulate_rir(&room, src, mic, 0, 150, 16_000).is_err());
}

#[test]
fn fully_absorbing_room_has_no_reflections() {
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.05).unwrap();
    assert_eq!(rt60_to_absorption(&room).unwrap(), 1.0);
    let (src, mic) = ([1.0, 1.2, 1.3], [3.1, 2.2, 1.7]);
    let a = simulate_rir(&room, src, mic, 0, 800, 16_000).unwrap();
    let b = simulate_rir(&room, src, mic, 5, 800, 16_000).unwrap();
    assert_eq!(a, b);
}

#[test]
fn first_order_images_match_hand_mirrors() {
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.4).unwrap();
    let (s, mic) = ([1.0, 1.5, 1.2], [3.0, 2.0, 1.0]);
    let expected = [
        [-1.0, 1.5, 1.2],
        [9.0, 1.5, 1.2],
        [1.0, -1.5, 1.2],
        [1.0, 6.5, 1.2],
        [1.0, 1.5, -1.2],
        [1.0, 1.5, 4.8],
    ];
    let imgs = image_sources(&room, s, mic, 1).unwrap();
    assert_eq!(imgs.len(), 7);
    for e in expected {
        let hit = imgs
            .iter()
            .find(|i| dist(i.position, e) < 1e-12)
            .expect("image present");
        assert_eq!(hit.order, 1);
    }
}

#[test]
fn image_sources_match_brute_force_enumeration() {
    let dims = [6.3, 4.1, 2.9];
    let room = RoomSpec::new(dims, 0.45).unwrap();
    let (src, mic) = ([1.7, 3.2, 1.1], [4.4, 0.9, 1.6]);
    let alpha = rt60_to_absorption(&room).unwrap();
    for max_order in 0..=2 {
        let oracle = brute_force_images(dims, src, max_order);
        let imgs = image_sources(&room, src, mic, max_order).unwrap();
        assert_eq!(imgs.len(), oracle.len(), "order {max_order}");
        for (pos, order) in oracle {
            let d = dist(pos, mic);
            let amp = (1.0 - alpha).powf(order as f64 / 2.0) / (4.0 * std::f64::consts::PI * d);
            let hit = imgs
                .iter()
                .find(|i| dist(i.position, pos) < 1e-9)
                .expect("image present");
            assert_eq!(hit.order, order);
            assert!((hit.distance - d).abs() <= 1e-9 * d);
            assert!((hit.amplitude - amp).abs() <= 1e-9 * amp);
        }
    }
}

#[test]
fn rir_is_sum_of_delayed_kernels() {
    let dims = [5.0, 4.0, 3.0];
    let room = RoomSpec::new(dims, 0.3).unwrap();
    let alpha = rt60_to_absorption(&room).unwrap();
    let (src, mic) = ([1.2, 1.4, 1.3], [3.3, 2.7, 1.1]);
    for order in 0..=2 {
        let rir = simulate_rir(&room, src, mic, order, 2000, 16_000).unwrap();
        let expect = rir_oracle(dims, alpha, src, mic, order, 2000, 16_000.0);
        let scale = expect.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in rir.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-9 * scale, "order {order}");
        }
    }
}

/// Second-order Butterworth high-pass.
fn highpass(x: &[f64], fc: f64, fs: f64) -> Vec<f64> {
    let w0 = 2.0 * std::f64::consts::PI * fc / fs;
    let alpha = w0.sin() / std::f64::consts::SQRT_2;
    let cw = w0.cos();
    let a0 = 1.0 + alpha;
    let (b0, b1, b2) = (
        (1.0 + cw) / 2.0 / a0,
        -(1.0 + cw) / a0,
        (1.0 + cw) / 2.0 / a0,
    );
    let (a1, a2) = (-2.0 * cw / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            (x2, x1, y2, y1) = (x1, v, y1, y);
            y
        })
        .collect()
}

/// T20 estimate from the Schroeder curve of the high-passed response. All
/// image pulses are positive, so the raw tail carries a slowly decaying DC
/// pedestal that is not part of the band-limited decay.
fn schroeder_rt60(rir: &[f64], fs: f64) -> f64 {
    let mut tail: Vec<f64> = highpass(rir, 100.0, fs).iter().map(|v| v * v).collect();
    for i in (0..tail.len() - 1).rev() {
        tail[i] += tail[i + 1];
    }
    let db: Vec<f64> = tail.iter().map(|e| 10.0 * (e / tail[0]).log10()).collect();
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|(_, d)| **d <= -5.0 && **d >= -25.0)
        .map(|(i, d)| (i as f64 / fs, *d))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    -60.0 / slope
}

#[test]
fn schroeder_decay_matches_requested_rt60() {
    for (dims, rt60) in [
        ([5.0, 4.0, 3.0], 0.2),
        ([6.0, 5.0, 3.5], 0.5),
        ([9.0, 7.0, 5.0], 1.0),
        ([4.0, 3.5, 2.8], 0.8),
    ] {
        let room = RoomSpec::new(dims, rt60).unwrap();
        let order = (343.0 * rt60 / dims[2]).ceil() as usize;
        let len = (rt60 * 16_000.0) as usize;
        let rir =
            simulate_rir(&room, [1.3, 1.7, 1.2], [3.1, 2.6, 1.5], order, len, 16_000).unwrap();
        let est = schroeder_rt60(&rir, 16_000.0);
        assert!(
            (est / rt60 - 1.0).abs() <= 0.3,
            "requested {rt60}, estimated {est}"
        );
    }
}

fn welch(x: &[Vec<f64>], i: usize, j: usize) -> Vec<(f64, Complex64, f64, f64)> {
    let n = 256;
    let win: Vec<f64> = (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![(Complex64::default(), 0.0, 0.0); n / 2 + 1];
    let mut start = 0;
    while start + n <= x[i].len() {
        let spec = |c: usize| {
            let mut b: Vec<Complex64> = (0..n)
                .map(|k| Complex64::new(x[c][start + k] * win[k], 0.0))
                .collect();
            fft.process(&mut b);
            b
        };
        let (a, b) = (spec(i), spec(j));
        for k in 0..=n / 2 {
            acc[k].0 += a[k] * b[k].conj();
            acc[k].1 += a[k].norm_sqr();
            acc[k].2 += b[k].norm_sqr();
        }
        start += n / 2;
    }
    acc.into_iter()
        .enumerate()
        .map(|(k, (c, p, q))| (k as f64 * 16_000.0 / n as f64, c, p, q))
        .collect()
}

#[test]
fn diffuse_noise_follows_sinc_coherence() {
    let arr = MicArray::circular9([2.0, 2.0, 1.5]);
    let noise = generate_diffuse_noise(
        &arr,
        60 * 16_000,
        16_000,
        NoiseModel::SphericalIsotropic,
        11,
    )
    .unwrap();
    for (i, j) in [(0, 4), (0, 8), (1, 2), (3, 6)] {
        let d = dist(arr.positions[i], arr.positions[j]);
        for (f, c, p, q) in welch(&noise.samples, i, j) {
            if f == 0.0 || f >= 4000.0 {
                continue;
            }
            let x = 2.0 * std::f64::consts::PI * f * d / 343.0;
            let target = x.sin() / x;
            let measured = c.re / (p * q).sqrt();
            assert!(
                (measured - target).abs() <= 0.1,
                "pair ({i},{j}) f {f}: {measured} vs {target}"
            );
        }
    }
    let var = noise.samples[0].iter().map(|v| v * v).sum::<f64>() / noise.num_samples() as f64;
    assert!((var - 1.0).abs() < 0.05);
}

#[test]
fn spatially_white_noise_is_incoherent() {
    let arr = MicArray::circular9([2.0, 2.0, 1.5]);
    let noise =
        generate_diffuse_noise(&arr, 60 * 16_000, 16_000, NoiseModel::SpatiallyWhite, 5).unwrap();
    for (i, j) in [(0, 1), (0, 8), (2, 6)] {
        let bins = welch(&noise.samples, i, j);
        let msc = bins
            .iter()
            .map(|(_, c, p, q)| c.norm_sqr() / (p * q))
            .sum::<f64>()
            / bins.len() as f64;
        assert!(msc < 0.05, "pair ({i},{j}): {msc}");
    }
}

#[test]
fn noise_is_deterministic() {
    let arr = MicArray::circular9([2.0, 2.0, 1.5]);
    let a = generate_diffuse_noise(&arr, 3000, 16_000, NoiseModel::SphericalIsotropic, 9).unwrap();
    let b = generate_diffuse_noise(&arr, 3000, 16_000, NoiseModel::SphericalIsotropic, 9).unwrap();
    assert_eq!(a, b);
    assert!(generate_diffuse_noise(&arr, 0, 16_000, NoiseModel::SpatiallyWhite, 9).is_err());
}

fn test_room() -> (RoomSpec, MicArray) {
    (
        RoomSpec::new([5.0, 4.0, 3.0], 0.25).unwrap(),
        MicArray::circular9([2.5, 1.5, 1.4]),
    )
}

#[test]
fn static_trajectory_equals_plain_convolution() {
    let (room, arr) = test_room();
    let n = 4000;
    let dry = speech_like(n, 16_000, 4).samples;
    let p = [3.4, 3.1, 1.4];
    let traj = Trajectory::from_waypoints(vec![p, p], n, 16_000).unwrap();
    let out = render_moving_source(&dry, &traj, &room, &arr, 50.0, 3).unwrap();
    let len = rir_length(&room, 3, 16_000);
    for m in [0, 4, 8] {
        let rir = simulate_rir(&room, p, arr.absolute(m), 3, len, 16_000).unwrap();
        let want = direct_convolve(&dry, &rir, n);
        let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in out.samples[m].iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
    }
}

#[test]
fn impulse_through_anechoic_static_scene_is_the_rir() {
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.0).unwrap();
    let arr = MicArray::circular9([2.5, 1.5, 1.4]);
    let n = 2000;
    let mut dry = vec![0.0; n];
    dry[0] = 1.0;
    let p = [3.0, 3.2, 1.4];
    let traj = Trajectory::from_waypoints(vec![p], n, 16_000).unwrap();
    let out = render_moving_source(&dry, &traj, &room, &arr, 50.0, 0).unwrap();
    for m in 0..arr.len() {
        let rir = simulate_rir(&room, p, arr.absolute(m), 0, n, 16_000).unwrap();
        for (a, b) in out.samples[m].iter().zip(&rir) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn crossfade_midpoint_averages_neighbouring_blocks() {
    let (room, arr) = test_room();
    let block = 800;
    let n = 2 * block;
    let dry = speech_like(n, 16_000, 8).samples;
    let traj =
        Trajectory::from_waypoints(vec![[3.5, 2.5, 1.4], [1.5, 3.0, 1.4]], n, 16_000).unwrap();
    let out = render_moving_source(&dry, &traj, &room, &arr, 50.0, 2).unwrap();
    let len = rir_length(&room, 2, 16_000);
    let (p1, p2) = (traj.positions[block / 2], traj.positions[3 * block / 2]);
    for m in [0, 5] {
        let h1 = simulate_rir(&room, p1, arr.absolute(m), 2, len, 16_000).unwrap();
        let h2 = simulate_rir(&room, p2, arr.absolute(m), 2, len, 16_000).unwrap();
        let (c1, c2) = (direct_convolve(&dry, &h1, n), direct_convolve(&dry, &h2, n));
        let want = 0.5 * c1[block] + 0.5 * c2[block];
        assert!((out.samples[m][block] - want).abs() <= 1e-9 * want.abs().max(1e-6));
    }
    assert!(render_moving_source(&dry, &traj, &room, &arr, 0.0, 2).is_err());
}

#[test]
fn mixed_snr_is_exact() {
    let arr = MicArray::circular9([2.0, 2.0, 1.5]);
    let dry = speech_like(16_000, 16_000, 2);
    let speech = MultichannelAudio::new(vec![dry.samples.clone(); arr.len()], 16_000).unwrap();
    let noise =
        generate_diffuse_noise(&arr, 16_000, 16_000, NoiseModel::SpatiallyWhite, 3).unwrap();
    for snr in [-10.0, 0.0, 7.5, 15.0] {
        let mix = mix_at_snr(&speech, &noise, snr, &dry.active).unwrap();
        let (mut ps, mut pn) = (0.0, 0.0);
        for (s, x) in speech.samples.iter().zip(&mix.samples) {
            for ((a, b), on) in s.iter().zip(x).zip(&dry.active) {
                if *on {
                    ps += a * a;
                    pn += (b - a).powi(2);
                }
            }
        }
        let measured = 10.0 * (ps / pn).log10();
        assert!((measured - snr).abs() < 1e-6);
    }
}

#[test]
fn paper_room_bounds_and_degenerate_room() {
    let cfg = DomainSamplerConfig::default();
    for seed in 0..20 {
        let s = sample_scene(&cfg, seed).unwrap();
        for i in 0..3 {
            assert!(
                s.room.dimensions[i] >= cfg.room_min[i] && s.room.dimensions[i] <= cfg.room_max[i]
            );
        }
        assert!(s.room.rt60 >= 0.2 && s.room.rt60 <= 1.0);
        assert!(s.duration_s >= 2.0 && s.duration_s <= 10.0);
    }
    let fixed = DomainSamplerConfig {
        room_min: [5.0, 4.0, 3.0],
        room_max: [5.0, 4.0, 3.0],
        duration_s: [1.0, 1.0],
        ..DomainSamplerConfig::default()
    };
    assert_eq!(
        sample_scene(&fixed, 3).unwrap().room.dimensions,
        [5.0, 4.0, 3.0]
    );
}

#[test]
fn scene_sampling_is_deterministic() {
    let cfg = DomainSamplerConfig {
        duration_s: [1.0, 2.0],
        ..DomainSamplerConfig::pseudo_target()
    };
    assert_eq!(
        sample_scene(&cfg, 42).unwrap(),
        sample_scene(&cfg, 42).unwrap()
    );
    assert_ne!(
        sample_scene(&cfg, 42).unwrap(),
        sample_scene(&cfg, 43).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_scenes_respect_invariants(seed in any::<u64>(), lo in 0.0f64..150.0, width in 10.0f64..90.0) {
        let hi = (lo + width).min(179.0);
        let cfg = DomainSamplerConfig {
            coverage_deg: [lo, hi],
            duration_s: [0.5, 1.0],
            ..DomainSamplerConfig::source_domain()
        };
        let s = sample_scene(&cfg, seed).unwrap();
        prop_assert!(s.array.validate(&s.room).is_ok());
        for p in s.trajectory.positions.iter().step_by(97) {
            prop_assert!(s.room.contains(*p));
            let az = s.array.azimuth_of(*p).to_degrees();
            prop_assert!(az >= lo - 1e-9 && az <= hi + 1e-9, "azimuth {} outside [{}, {}]", az, lo, hi);
        }
    }
}
