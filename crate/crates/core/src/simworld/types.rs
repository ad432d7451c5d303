use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};

/// One radar sweep in the radar frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarFrame {
    #[serde(with = "crate::serde_util::points")]
    pub coords: Vec<Point3>,
    /// Relative radial velocity, m/s, positive when receding.
    pub rrv: Vec<f64>,
    /// Radar cross-section, dBsm.
    pub rcs: Vec<f64>,
    pub timestamp: f64,
}

impl RadarFrame {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::EmptyFrame);
        }
        if self.rrv.len() != self.coords.len() || self.rcs.len() != self.coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} coords, {} rrv, {} rcs",
                self.coords.len(),
                self.rrv.len(),
                self.rcs.len()
            )));
        }
        let finite = self.coords.iter().all(|c| c.iter().all(|v| v.is_finite()))
            && self.rrv.iter().chain(&self.rcs).all(|v| v.is_finite())
            && self.timestamp.is_finite();
        if !finite {
            return Err(Error::Format(
                "radar frame contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Points at `indices`, in that order (duplicates allowed).
    pub fn subset(&self, indices: &[usize]) -> RadarFrame {
        RadarFrame {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            rrv: indices.iter().map(|&i| self.rrv[i]).collect(),
            rcs: indices.iter().map(|&i| self.rcs[i]).collect(),
            timestamp: self.timestamp,
        }
    }
}

/// Oriented 3D box as reported by a multi-object tracker, in the radar frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackedBox {
    pub id: u64,
    pub center: [f64; 3],
    /// `(l, w, h)`.
    pub size: [f64; 3],
    pub yaw: f64,
    pub frame_index: usize,
}

impl TrackedBox {
    /// Radar-from-box transform.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, Vector3::from(self.center))
    }

    /// Yaw-aware containment test with `margin` metres of slack on every side.
    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let d = p - Vector3::from(self.center);
        let (s, c) = self.yaw.sin_cos();
        let local = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
        const TOL: f64 = 1e-6;
        (0..3).all(|a| local[a].abs() <= 0.5 * self.size[a] + margin + TOL)
    }
}

/// Dense per-pixel 2D flow, `H x W x 2`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    /// Flow `(du, dv)` at integer pixel `(col, row)`.
    pub fn get(&self, col: usize, row: usize) -> [f64; 2] {
        let i = (row * self.width + col) * 2;
        [self.data[i] as f64, self.data[i + 1] as f64]
    }

    pub fn set(&mut self, col: usize, row: usize, flow: [f64; 2]) {
        let i = (row * self.width + col) * 2;
        self.data[i] = flow[0] as f32;
        self.data[i + 1] = flow[1] as f32;
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 2 * 4 {
            return Err(Error::Format(format!(
                "flow map has {} bytes, expected {}",
                bytes.len(),
                width * height * 8
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("flow map contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Per-pair ground truth aligned with the source frame's points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub flow: Vec<Vec<Vector3<f64>>>,
    pub moving: Vec<Vec<bool>>,
    pub ego: Vec<RigidTransform>,
}

/// Non-rigid residual above which a point counts as moving, metres.
pub const MOVING_THRESHOLD: f64 = 0.05;

impl GroundTruth {
    pub fn pairs(&self) -> usize {
        self.ego.len()
    }

    /// Applies the 5 cm rule to `flow` against the ego transform.
    pub fn moving_mask(
        coords: &[Point3],
        flow: &[Vector3<f64>],
        ego: &RigidTransform,
    ) -> Vec<bool> {
        coords
            .iter()
            .zip(flow)
            .map(|(c, f)| (f - (ego.apply(c) - c)).norm() > MOVING_THRESHOLD)
            .collect()
    }

    /// Checks lengths against `frames` and the moving rule.
    pub fn validate(&self, frames: &[RadarFrame]) -> Result<()> {
        let pairs = frames.len().saturating_sub(1);
        if self.flow.len() != pairs || self.moving.len() != pairs || self.ego.len() != pairs {
            return Err(Error::Invariant(format!(
                "ground truth covers {}/{}/{} pairs, expected {pairs}",
                self.flow.len(),
                self.moving.len(),
                self.ego.len()
            )));
        }
        for k in 0..pairs {
            let coords = &frames[k].coords;
            if self.flow[k].len() != coords.len() || self.moving[k].len() != coords.len() {
                return Err(Error::Invariant(format!(
                    "ground truth for pair {k} misaligned with frame"
                )));
            }
            if Self::moving_mask(coords, &self.flow[k], &self.ego[k]) != self.moving[k] {
                return Err(Error::Invariant(format!(
                    "moving mask of pair {k} violates the 5 cm rule"
                )));
            }
        }
        Ok(())
    }
}

/// What the sensors report for a sequence: radar, odometry, tracked boxes and
/// optical flow, with measurement noise already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub calib: crate::geometry::Calibration,
    pub dt: f64,
    pub frames: Vec<RadarFrame>,
    /// World-from-radar per frame.
    pub odom_poses: Vec<RigidTransform>,
    pub boxes: Vec<Vec<TrackedBox>>,
    pub optflow: Vec<FlowMap>,
}

impl Recording {
    pub fn pairs(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.calib.validate()?;
        let n = self.frames.len();
        if n < 2 {
            return Err(Error::Invariant(
                "a recording needs at least two frames".into(),
            ));
        }
        if self.odom_poses.len() != n || self.boxes.len() != n || self.optflow.len() != n - 1 {
            return Err(Error::Invariant(format!(
                "recording lengths disagree: {n} frames, {} poses, {} box lists, {} flow maps",
                self.odom_poses.len(),
                self.boxes.len(),
                self.optflow.len()
            )));
        }
        for f in &self.frames {
            f.validate()?;
        }
        for (k, list) in self.boxes.iter().enumerate() {
            let mut ids: Vec<u64> = list.iter().map(|b| b.id).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Invariant(format!("duplicate box id in frame {k}")));
            }
            if list.iter().any(|b| b.size.iter().any(|&s| !(s > 0.0))) {
                return Err(Error::Invariant(format!(
                    "non-positive box size in frame {k}"
                )));
            }
        }
        let [w, h] = self.calib.image_size;
        if self.optflow.iter().any(|m| m.width != w || m.height != h) {
            return Err(Error::Invariant(
                "flow map size differs from the image size".into(),
            ));
        }
        Ok(())
    }
}

/// Simulation ground truth for every radar point in a generated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Static,
    /// Index into the sequence's mover list.
    Mover(usize),
}

pub(crate) fn unit_or_zero(c: &Point3) -> Option<Vector3<f64>> {
    let n = c.norm();
    (n > 0.0).then(|| c / n)
}
