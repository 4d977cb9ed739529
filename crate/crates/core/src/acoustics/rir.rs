use std::f64::consts::PI;

use super::{distance, rt60_to_absorption, Point, RoomSpec};
use crate::error::{arg_err, Result};

/// Length of the windowed-sinc fractional delay kernel.
pub const SINC_TAPS: usize = 81;
const HALF: i64 = (SINC_TAPS / 2) as i64;

pub const DEFAULT_ORDER_CAP: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSource {
    pub position: Point,
    /// Total number of wall reflections.
    pub order: usize,
    pub distance: f64,
    pub amplitude: f64,
}

/// Smallest order whose per-axis image distance exceeds `c * rt60`, capped.
pub fn default_max_order(room: &RoomSpec, cap: usize) -> usize {
    if room.rt60 <= 0.0 {
        return 0;
    }
    let reach = room.sound_speed * room.rt60;
    room.dimensions
        .iter()
        .map(|l| (reach / l).ceil() as usize)
        .max()
        .unwrap_or(0)
        .min(cap)
}

/// Sample count that holds every image up to `max_order` plus the kernel tail.
pub fn rir_length(room: &RoomSpec, max_order: usize, sample_rate: u32) -> usize {
    let diag = room.dimensions.iter().map(|d| d * d).sum::<f64>().sqrt();
    let reach = (max_order + 1) as f64 * diag;
    (reach / room.sound_speed * sample_rate as f64).ceil() as usize + HALF as usize + 2
}

/// Per-axis images `2nL + (1 - 2q)s` with their reflection counts.
fn axis_images(len: f64, s: f64, max_order: usize) -> Vec<(f64, usize)> {
    let reach = max_order as i64 / 2 + 1;
    let mut out = Vec::new();
    for n in -reach..=reach {
        for q in 0..2i64 {
            let refl = (2 * n - q).unsigned_abs() as usize;
            if refl <= max_order {
                let x = 2.0 * n as f64 * len + (1 - 2 * q) as f64 * s;
                out.push((x, refl));
            }
        }
    }
    out
}

fn reflection_coefficient(room: &RoomSpec) -> Result<f64> {
    if room.rt60 == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - rt60_to_absorption(room)?).sqrt())
}

/// All image sources of `source` up to `max_order`, with amplitude
/// `(1 - alpha)^(order / 2) / (4 pi d)` relative to `mic`.
pub fn image_sources(
    room: &RoomSpec,
    source: Point,
    mic: Point,
    max_order: usize,
) -> Result<Vec<ImageSource>> {
    room.validate()?;
    if !room.contains(source) || !room.contains(mic) {
        return Err(arg_err!(
            "source {source:?} and mic {mic:?} must lie inside the room"
        ));
    }
    if distance(source, mic) == 0.0 {
        return Err(arg_err!("source and microphone coincide"));
    }
    let beta = reflection_coefficient(room)?;
    let [ax, ay, az] = [0, 1, 2].map(|i| axis_images(room.dimensions[i], source[i], max_order));
    let mut out = Vec::new();
    for &(x, ox) in &ax {
        for &(y, oy) in &ay {
            if ox + oy > max_order {
                continue;
            }
            for &(z, oz) in &az {
                let order = ox + oy + oz;
                if order > max_order {
                    continue;
                }
                let gain = beta.powi(order as i32);
                if gain == 0.0 {
                    continue;
                }
                let position = [x, y, z];
                let d = distance(position, mic);
                out.push(ImageSource {
                    position,
                    order,
                    distance: d,
                    amplitude: gain / (4.0 * PI * d),
                });
            }
        }
    }
    Ok(out)
}

/// Hann-windowed sinc taps for a delay of `tau` samples. Returns the index of
/// the first tap and the taps; an integer delay yields a single unit tap.
pub fn fractional_delay_taps(tau: f64) -> (i64, [f64; SINC_TAPS]) {
    let center = tau.round() as i64;
    let delta = center as f64 - tau;
    let s0 = (PI * delta).sin();
    let step = 2.0 * PI / SINC_TAPS as f64;
    let (ds, dc) = step.sin_cos();
    let (mut sn, mut cs) = (step * (delta - HALF as f64)).sin_cos();
    let mut taps = [0.0; SINC_TAPS];
    for (k, tap) in taps.iter_mut().enumerate() {
        let t = delta + (k as i64 - HALF) as f64;
        *tap = if k as i64 == HALF {
            let sinc = if delta == 0.0 { 1.0 } else { s0 / (PI * delta) };
            0.5 * (1.0 + (step * delta).cos()) * sinc
        } else {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            0.5 * (1.0 + cs) * sign * s0 / (PI * t)
        };
        (sn, cs) = (sn * dc + cs * ds, cs * dc - sn * ds);
    }
    (center - HALF, taps)
}

fn add_taps(rir: &mut [f64], start: i64, taps: &[f64; SINC_TAPS], gain: f64) {
    for (k, t) in taps.iter().enumerate() {
        let i = start + k as i64;
        if i >= 0 && (i as usize) < rir.len() {
            rir[i as usize] += gain * t;
        }
    }
}

/// Image-source room impulse response from `source` to `mic`.
pub fn simulate_rir(
    room: &RoomSpec,
    source: Point,
    mic: Point,
    max_order: usize,
    length_samples: usize,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    let images = image_sources(room, source, mic, max_order)?;
    let fs = sample_rate as f64;
    let direct = distance(source, mic) / room.sound_speed * fs;
    if direct.round() as usize >= length_samples {
        return Err(arg_err!(
            "rir of {length_samples} samples cannot hold the direct path at {direct:.1} samples"
        ));
    }
    let mut rir = vec![0.0; length_samples];
    for img in images {
        let (start, taps) = fractional_delay_taps(img.distance / room.sound_speed * fs);
        add_taps(&mut rir, start, &taps, img.amplitude);
    }
    Ok(rir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_windowed_sinc() {
        let (start, taps) = fractional_delay_taps(100.3);
        assert_eq!(start, 60);
        for (k, v) in taps.iter().enumerate() {
            let t = (start + k as i64) as f64 - 100.3;
            let expect = 0.5 * (1.0 + (2.0 * PI * t / 81.0).cos()) * (PI * t).sin() / (PI * t);
            assert!((v - expect).abs() < 1e-12);
        }
        let (_, pulse) = fractional_delay_taps(7.0);
        assert_eq!(pulse[40], 1.0);
        assert_eq!(pulse.iter().filter(|v| v.abs() > 1e-12).count(), 1);
    }

    #[test]
    fn axis_images_count() {
        let imgs = axis_images(5.0, 1.0, 2);
        assert_eq!(imgs.len(), 5);
        assert!(imgs.contains(&(1.0, 0)));
        assert!(imgs.contains(&(-1.0, 1)));
        assert!(imgs.contains(&(9.0, 1)));
        assert!(imgs.contains(&(11.0, 2)));
        assert!(imgs.contains(&(-9.0, 2)));
    }

    #[test]
    fn default_order_rule() {
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.05).unwrap();
        assert_eq!(default_max_order(&room, 12), 6);
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.8).unwrap();
        assert_eq!(default_max_order(&room, 12), 12);
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.0).unwrap();
        assert_eq!(default_max_order(&room, 12), 0);
    }
}
