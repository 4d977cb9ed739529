//! Room acoustics simulation: shoebox image-source RIRs, moving-source
//! rendering, diffuse noise fields, and randomized scene sampling.

mod noise;
mod render;
mod rir;
mod sampler;
mod signal;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub use noise::{coherence_matrix, generate_diffuse_noise, NoiseModel};
pub use render::{render_moving_source, DEFAULT_BLOCK_MS};
pub use rir::{
    default_max_order, fractional_delay_taps, image_sources, rir_length, simulate_rir, ImageSource,
    DEFAULT_ORDER_CAP, SINC_TAPS,
};
pub use sampler::{sample_scene, DomainSamplerConfig, Scene};
pub use signal::{mix_at_snr, speech_like, DrySignal};

pub type Point = [f64; 3];

pub const DEFAULT_SOUND_SPEED: f64 = 343.0;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

pub(crate) fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Shoebox room with uniform wall absorption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in meters.
    pub dimensions: Point,
    /// Seconds; 0 is anechoic.
    pub rt60: f64,
    pub sound_speed: f64,
}

impl RoomSpec {
    pub fn new(dimensions: Point, rt60: f64) -> Result<Self> {
        let room = RoomSpec {
            dimensions,
            rt60,
            sound_speed: DEFAULT_SOUND_SPEED,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .dimensions
            .iter()
            .any(|d| !(*d > 0.0) || !d.is_finite())
        {
            return Err(arg_err!(
                "room dimensions must be positive, got {:?}",
                self.dimensions
            ));
        }
        if !(self.rt60 >= 0.0) || !self.rt60.is_finite() {
            return Err(arg_err!("rt60 must be >= 0, got {}", self.rt60));
        }
        if !(self.sound_speed > 0.0) {
            return Err(arg_err!("sound speed must be positive"));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface_area(&self) -> f64 {
        let [l, w, h] = self.dimensions;
        2.0 * (l * w + l * h + w * h)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.contains_with_margin(p, 0.0)
    }

    /// True when `p` is at least `margin` away from every wall.
    pub fn contains_with_margin(&self, p: Point, margin: f64) -> bool {
        p.iter()
            .zip(&self.dimensions)
            .all(|(x, d)| *x > margin && *x < d - margin)
    }
}

/// Sabine inversion `0.161 V / (S rt60)`, clamped to 1.
pub fn rt60_to_absorption(room: &RoomSpec) -> Result<f64> {
    if !(room.rt60 > 0.0) {
        return Err(arg_err!(
            "rt60 must be positive for Sabine inversion, got {}",
            room.rt60
        ));
    }
    let alpha = 0.161 * room.volume() / (room.surface_area() * room.rt60);
    if alpha > 1.0 {
        log::warn!(
            "rt60 {} s too short for a {:?} m room: absorption {alpha:.4} clamped to 1",
            room.rt60,
            room.dimensions
        );
        return Ok(1.0);
    }
    Ok(alpha)
}

/// Microphone positions relative to `origin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicArray {
    pub positions: Vec<Point>,
    pub origin: Point,
}

impl MicArray {
    pub const DEFAULT_RADIUS: f64 = 0.03;

    /// Eight microphones on a 3 cm horizontal circle plus one at the center.
    pub fn circular9(origin: Point) -> Self {
        let mut positions: Vec<Point> = (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 4.0;
                [
                    Self::DEFAULT_RADIUS * a.cos(),
                    Self::DEFAULT_RADIUS * a.sin(),
                    0.0,
                ]
            })
            .collect();
        positions.push([0.0; 3]);
        MicArray { positions, origin }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn absolute(&self, i: usize) -> Point {
        let p = self.positions[i];
        [
            p[0] + self.origin[0],
            p[1] + self.origin[1],
            p[2] + self.origin[2],
        ]
    }

    pub fn validate(&self, room: &RoomSpec) -> Result<()> {
        if self.len() < 2 {
            return Err(arg_err!("array needs at least two microphones"));
        }
        for i in 0..self.len() {
            if !room.contains(self.absolute(i)) {
                return Err(arg_err!(
                    "microphone {i} at {:?} is outside the room",
                    self.absolute(i)
                ));
            }
        }
        Ok(())
    }

    /// Horizontal azimuth of `p` seen from the array center, in `(-pi, pi]`.
    pub fn azimuth_of(&self, p: Point) -> f64 {
        (p[1] - self.origin[1]).atan2(p[0] - self.origin[0])
    }
}

/// Per-sample source positions obtained by piecewise-linear interpolation of
/// equally spaced waypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub waypoints: Vec<Point>,
    pub positions: Vec<Point>,
    pub duration_s: f64,
}

impl Trajectory {
    pub fn from_waypoints(
        waypoints: Vec<Point>,
        num_samples: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if waypoints.is_empty() || num_samples == 0 {
            return Err(arg_err!("trajectory needs waypoints and a positive length"));
        }
        let segs = waypoints.len() - 1;
        let positions = (0..num_samples)
            .map(|n| {
                if segs == 0 || num_samples == 1 {
                    return waypoints[0];
                }
                let u = n as f64 / (num_samples - 1) as f64 * segs as f64;
                let i = (u.floor() as usize).min(segs - 1);
                let t = u - i as f64;
                let (a, b) = (waypoints[i], waypoints[i + 1]);
                [
                    a[0] + t * (b[0] - a[0]),
                    a[1] + t * (b[1] - a[1]),
                    a[2] + t * (b[2] - a[2]),
                ]
            })
            .collect();
        Ok(Trajectory {
            waypoints,
            positions,
            duration_s: num_samples as f64 / sample_rate as f64,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.positions.len()
    }
}

/// Sampled multichannel signal, one `Vec` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelAudio {
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl MultichannelAudio {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let len = samples.first().map_or(0, Vec::len);
        if samples.iter().any(|c| c.len() != len) {
            return Err(arg_err!("channels have different lengths"));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio sample".into()));
        }
        if sample_rate == 0 {
            return Err(arg_err!("sample rate must be positive"));
        }
        Ok(MultichannelAudio {
            samples,
            sample_rate,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }
}
