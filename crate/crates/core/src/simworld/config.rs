use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Calibration;

pub const SIM_CONFIG_VERSION: u32 = 1;

/// Generator settings. Every field has a default, so `{"version": 1}` is a
/// complete config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub version: u32,
    pub num_frames: usize,
    /// Seconds between consecutive frames.
    pub dt: f64,
    pub ego: EgoConfig,
    /// Radar returns from static surfaces (ground, walls, poles, buildings, parked cars) per frame.
    pub static_points: usize,
    /// Share of the static returns that come from the ground plane.
    pub ground_fraction: f64,
    /// Include walls, poles and buildings along the road.
    pub structures: bool,
    pub parked_cars: usize,
    /// Simultaneously active moving objects.
    pub movers: usize,
    pub mover_points: MoverPoints,
    /// Probability that a newly spawned mover crosses the road.
    pub crossing_fraction: f64,
    pub max_range: f64,
    /// Allowed radar-frame z range, metres.
    pub z_range: [f64; 2],
    /// Radar height above the ground plane.
    pub radar_height: f64,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoConfig {
    /// Mean forward speed, m/s.
    pub speed: f64,
    pub speed_amplitude: f64,
    pub speed_period: f64,
    /// Mean yaw rate, rad/s.
    pub yaw_rate: f64,
    pub yaw_rate_amplitude: f64,
    pub yaw_rate_period: f64,
}

/// Radar returns per frame from each mover class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoverPoints {
    pub pedestrian: usize,
    pub cyclist: usize,
    pub car: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// Camera height above the radar.
    pub mount_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Gaussian RRV noise, m/s.
    pub rrv_sigma: f64,
    /// Per-frame global RRV bias drawn from `U(-b, b)`, m/s.
    pub rrv_bias: f64,
    /// Gaussian RCS noise, dB.
    pub rcs_sigma: f64,
    pub box_dropout: f64,
    /// Tracked-box centre jitter, m.
    pub box_center_noise: f64,
    /// Gaussian optical-flow noise, px.
    pub flow_noise: f64,
    /// Fraction of flow pixels replaced by outliers.
    pub flow_corrupt_frac: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            version: SIM_CONFIG_VERSION,
            num_frames: 51,
            dt: 0.1,
            ego: EgoConfig::default(),
            static_points: 220,
            ground_fraction: 0.15,
            structures: true,
            parked_cars: 4,
            movers: 4,
            mover_points: MoverPoints::default(),
            crossing_fraction: 0.2,
            max_range: 50.0,
            z_range: [-3.0, 3.0],
            radar_height: 1.0,
            camera: CameraConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            speed: 6.0,
            speed_amplitude: 1.5,
            speed_period: 6.0,
            yaw_rate: 0.0,
            yaw_rate_amplitude: 0.1,
            yaw_rate_period: 8.0,
        }
    }
}

impl Default for MoverPoints {
    fn default() -> Self {
        Self {
            pedestrian: 3,
            cyclist: 4,
            car: 8,
        }
    }
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: 100.0,
            width: 160,
            height: 120,
            mount_height: 0.3,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            rrv_sigma: 0.05,
            rrv_bias: 1.0,
            rcs_sigma: 1.0,
            box_dropout: 0.1,
            box_center_noise: 0.05,
            flow_noise: 0.5,
            flow_corrupt_frac: 0.02,
        }
    }
}

impl NoiseConfig {
    /// All measurement noise switched off.
    pub fn none() -> Self {
        Self {
            rrv_sigma: 0.0,
            rrv_bias: 0.0,
            rcs_sigma: 0.0,
            box_dropout: 0.0,
            box_center_noise: 0.0,
            flow_noise: 0.0,
            flow_corrupt_frac: 0.0,
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg.to_string()))
    }
}

fn finite_nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        check(
            self.version == SIM_CONFIG_VERSION,
            "unsupported sim config version",
        )?;
        check(self.num_frames >= 2, "num_frames must be at least 2")?;
        check(self.dt.is_finite() && self.dt > 0.0, "dt must be positive")?;
        check(self.static_points >= 1, "static_points must be positive")?;
        check(
            (0.0..=1.0).contains(&self.ground_fraction),
            "ground_fraction must lie in [0, 1]",
        )?;
        check(
            self.structures || self.parked_cars > 0 || self.ground_fraction > 0.0,
            "scene needs at least one static structure",
        )?;
        let mp = &self.mover_points;
        check(
            self.movers == 0 || (mp.pedestrian > 0 && mp.cyclist > 0 && mp.car > 0),
            "mover point counts must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.crossing_fraction),
            "crossing_fraction must lie in [0, 1]",
        )?;
        check(
            self.max_range.is_finite() && self.max_range > 5.0,
            "max_range must exceed 5 m",
        )?;
        check(
            self.z_range[0] < self.z_range[1],
            "z_range must be increasing",
        )?;
        check(
            finite_nonneg(self.radar_height),
            "radar_height must be non-negative",
        )?;
        let e = &self.ego;
        check(
            [e.speed, e.speed_amplitude, e.yaw_rate, e.yaw_rate_amplitude]
                .iter()
                .all(|v| v.is_finite()),
            "ego parameters must be finite",
        )?;
        check(
            e.speed_period > 0.0 && e.yaw_rate_period > 0.0,
            "ego periods must be positive",
        )?;
        let c = &self.camera;
        check(
            c.focal > 0.0 && c.width > 0 && c.height > 0,
            "camera intrinsics must be positive",
        )?;
        check(
            c.mount_height.is_finite(),
            "camera mount height must be finite",
        )?;
        let n = &self.noise;
        check(
            [
                n.rrv_sigma,
                n.rrv_bias,
                n.rcs_sigma,
                n.box_center_noise,
                n.flow_noise,
            ]
            .iter()
            .all(|&v| finite_nonneg(v)),
            "noise levels must be non-negative",
        )?;
        check(
            (0.0..1.0).contains(&n.box_dropout),
            "box_dropout must lie in [0, 1)",
        )?;
        check(
            (0.0..=1.0).contains(&n.flow_corrupt_frac),
            "flow_corrupt_frac must lie in [0, 1]",
        )?;
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration::forward_facing(
            self.camera.focal,
            [self.camera.width, self.camera.height],
            self.camera.mount_height,
        )
    }

    pub fn mover_point_count(&self, class: super::ObjectClass) -> usize {
        use super::ObjectClass::*;
        match class {
            Pedestrian => self.mover_points.pedestrian,
            Cyclist => self.mover_points.cyclist,
            Car => self.mover_points.car,
        }
    }
}
