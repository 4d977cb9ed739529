use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MicArray, NoiseModel, Point, RoomSpec, Trajectory, DEFAULT_SAMPLE_RATE};
use crate::error::{config_err, Result};

const TRAJECTORY_TRIES: usize = 200;
const ARRAY_TRIES: usize = 50;

fn default_waypoints() -> [usize; 2] {
    [2, 4]
}
fn default_distance() -> [f64; 2] {
    [1.0, 2.5]
}
fn default_step() -> f64 {
    30.0
}
fn default_array_margin() -> f64 {
    0.5
}
fn default_source_margin() -> f64 {
    0.2
}

/// Ranges from which rooms, trajectories and noise conditions are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSamplerConfig {
    pub room_min: Point,
    pub room_max: Point,
    pub rt60: [f64; 2],
    pub snr_db: [f64; 2],
    pub noise: NoiseModel,
    /// Degrees, inclusive, within `[0, 180)`.
    pub coverage_deg: [f64; 2],
    pub duration_s: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_waypoints")]
    pub waypoints: [usize; 2],
    #[serde(default = "default_distance")]
    pub distance_m: [f64; 2],
    /// Largest azimuth change between consecutive waypoints.
    #[serde(default = "default_step")]
    pub max_step_deg: f64,
    #[serde(default = "default_array_margin")]
    pub array_margin_m: f64,
    #[serde(default = "default_source_margin")]
    pub source_margin_m: f64,
}

impl Default for DomainSamplerConfig {
    fn default() -> Self {
        DomainSamplerConfig {
            room_min: [3.0, 3.0, 2.5],
            room_max: [10.0, 8.0, 6.0],
            rt60: [0.2, 1.0],
            snr_db: [-10.0, 15.0],
            noise: NoiseModel::SphericalIsotropic,
            coverage_deg: [0.0, 180.0],
            duration_s: [2.0, 10.0],
            seed: 0,
            waypoints: default_waypoints(),
            distance_m: default_distance(),
            max_step_deg: default_step(),
            array_margin_m: default_array_margin(),
            source_margin_m: default_source_margin(),
        }
    }
}

impl DomainSamplerConfig {
    /// Low reverberation, spatially white noise, full half-plane coverage.
    pub fn source_domain() -> Self {
        DomainSamplerConfig {
            rt60: [0.2, 0.4],
            noise: NoiseModel::SpatiallyWhite,
            ..Self::default()
        }
    }

    /// Strong reverberation, diffuse noise, restricted coverage.
    pub fn pseudo_target() -> Self {
        DomainSamplerConfig {
            rt60: [0.6, 1.0],
            noise: NoiseModel::SphericalIsotropic,
            coverage_deg: [30.0, 120.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(config_err!("{name}: min {lo} exceeds max {hi}"))
            }
        };
        for i in 0..3 {
            ordered("room", self.room_min[i], self.room_max[i])?;
            if self.room_min[i] <= 2.0 * self.array_margin_m {
                return Err(config_err!(
                    "room dimension {} leaves no space inside a {} m array margin",
                    self.room_min[i],
                    self.array_margin_m
                ));
            }
        }
        ordered("rt60", self.rt60[0], self.rt60[1])?;
        if self.rt60[0] < 0.0 {
            return Err(config_err!("rt60 must be >= 0"));
        }
        ordered("snr_db", self.snr_db[0], self.snr_db[1])?;
        ordered("duration_s", self.duration_s[0], self.duration_s[1])?;
        if self.duration_s[0] <= 0.0 {
            return Err(config_err!("durations must be positive"));
        }
        ordered("distance_m", self.distance_m[0], self.distance_m[1])?;
        let [lo, hi] = self.coverage_deg;
        ordered("coverage_deg", lo, hi)?;
        if !(0.0..180.0).contains(&lo) || hi > 180.0 {
            return Err(config_err!(
                "coverage [{lo}, {hi}] must be a nonempty subset of [0, 180)"
            ));
        }
        if self.waypoints[0] < 1 || self.waypoints[0] > self.waypoints[1] {
            return Err(config_err!(
                "waypoint count range {:?} is invalid",
                self.waypoints
            ));
        }
        Ok(())
    }
}

/// One randomized recording condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub room: RoomSpec,
    pub array: MicArray,
    pub trajectory: Trajectory,
    pub snr_db: f64,
    pub duration_s: f64,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Reflects `x` into `[lo, hi]`.
fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    for _ in 0..4 {
        if x < lo {
            x = 2.0 * lo - x;
        } else if x > hi {
            x = 2.0 * hi - x;
        } else {
            break;
        }
    }
    x.clamp(lo, hi)
}

fn sample_waypoints(
    cfg: &DomainSamplerConfig,
    room: &RoomSpec,
    origin: Point,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Point>> {
    let lo = cfg.coverage_deg[0];
    // Azimuths stay strictly below 180 degrees.
    let hi = cfg.coverage_deg[1].min(180.0 - 1e-6);
    let count = rng.gen_range(cfg.waypoints[0]..=cfg.waypoints[1]);
    let mut az = uniform(rng, [lo, hi]);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i > 0 {
            az = reflect(
                az + rng.gen_range(-cfg.max_step_deg..=cfg.max_step_deg),
                lo,
                hi,
            );
        }
        let r = uniform(rng, cfg.distance_m);
        let a = az.to_radians();
        let p = [origin[0] + r * a.cos(), origin[1] + r * a.sin(), origin[2]];
        if !room.contains_with_margin(p, cfg.source_margin_m) {
            return None;
        }
        out.push(p);
    }
    Some(out)
}

/// Draws a room, an array placement and a trajectory whose azimuths stay
/// inside the configured coverage. Identical inputs give identical scenes.
pub fn sample_scene(cfg: &DomainSamplerConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [0, 1, 2].map(|i| uniform(&mut rng, [cfg.room_min[i], cfg.room_max[i]]));
    let room = RoomSpec::new(dims, uniform(&mut rng, cfg.rt60))?;
    let snr_db = uniform(&mut rng, cfg.snr_db);
    let fs = DEFAULT_SAMPLE_RATE;
    let samples = ((uniform(&mut rng, cfg.duration_s) * fs as f64).round() as usize).max(1);
    let margin = cfg.array_margin_m;
    for _ in 0..ARRAY_TRIES {
        let origin = [0, 1, 2].map(|i| uniform(&mut rng, [margin, dims[i] - margin]));
        for _ in 0..TRAJECTORY_TRIES {
            if let Some(wp) = sample_waypoints(cfg, &room, origin, &mut rng) {
                let array = MicArray::circular9(origin);
                let trajectory = Trajectory::from_waypoints(wp, samples, fs)?;
                return Ok(Scene {
                    room,
                    array,
                    duration_s: trajectory.duration_s,
                    trajectory,
                    snr_db,
                });
            }
        }
    }
    Err(config_err!(
        "no trajectory with coverage {:?} and distance {:?} fits the sampled room {:?}",
        cfg.coverage_deg,
        cfg.distance_m,
        dims
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_stays_in_range() {
        assert_eq!(reflect(35.0, 30.0, 120.0), 35.0);
        assert_eq!(reflect(20.0, 30.0, 120.0), 40.0);
        assert_eq!(reflect(130.0, 30.0, 120.0), 110.0);
        assert_eq!(reflect(5.0, 7.0, 7.0), 7.0);
    }

    #[test]
    fn impossible_geometry_is_a_config_error() {
        let cfg = DomainSamplerConfig {
            room_min: [3.0, 3.0, 2.5],
            room_max: [3.0, 3.0, 2.5],
            distance_m: [5.0, 6.0],
            ..DomainSamplerConfig::default()
        };
        assert!(matches!(
            sample_scene(&cfg, 1),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = DomainSamplerConfig::default();
        cfg.rt60 = [1.0, 0.2];
        assert!(cfg.validate().is_err());
        let mut cfg = DomainSamplerConfig::default();
        cfg.coverage_deg = [10.0, 200.0];
        assert!(cfg.validate().is_err());
    }
}
