use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::transform::{Point3, RigidTransform};
use crate::error::{Error, Result};

/// Pinhole intrinsics plus the radar-to-camera extrinsic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// `(fx, fy)` in pixels.
    pub focal: [f64; 2],
    /// `(cx, cy)` in pixels.
    pub principal: [f64; 2],
    /// `(W, H)` in pixels.
    pub image_size: [usize; 2],
    pub cam_from_radar: RigidTransform,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let [fx, fy] = self.focal;
        let [cx, cy] = self.principal;
        let [w, h] = self.image_size;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidConfig(
                "focal lengths must be positive".into(),
            ));
        }
        if !(cx >= 0.0 && cx < w as f64 && cy >= 0.0 && cy < h as f64) {
            return Err(Error::InvalidConfig(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.image_size[0]
    }

    pub fn height(&self) -> usize {
        self.image_size[1]
    }

    /// Camera centre expressed in the radar frame.
    pub fn camera_origin(&self) -> Point3 {
        self.cam_from_radar.inverse().apply(&Vector3::zeros())
    }

    /// Forward-looking camera mounted `height` metres above the radar.
    ///
    /// Radar axes: x forward, y left, z up. Camera axes: x right, y down, z forward.
    pub fn forward_facing(focal: f64, image_size: [usize; 2], height: f64) -> Self {
        let rotation = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let centre = Vector3::new(0.0, 0.0, height);
        let cam_from_radar = RigidTransform::from_parts_unchecked(rotation, -(rotation * centre));
        Calibration {
            focal: [focal, focal],
            principal: [(image_size[0] / 2) as f64, (image_size[1] / 2) as f64],
            image_size,
            cam_from_radar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Integer pixel `(col, row)` nearest to this location, if inside the image.
    pub fn nearest_in(&self, calib: &Calibration) -> Option<(usize, usize)> {
        let (col, row) = (self.u.round(), self.v.round());
        if col >= 0.0 && row >= 0.0 && col < calib.width() as f64 && row < calib.height() as f64 {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }

    /// True if the continuous location lies in `[0, W) x [0, H)`.
    pub fn inside(&self, calib: &Calibration) -> bool {
        self.u >= 0.0
            && self.v >= 0.0
            && self.u < calib.width() as f64
            && self.v < calib.height() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel(Pixel),
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<Pixel> {
        match self {
            Projection::Pixel(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project(point: &Point3, calib: &Calibration) -> Projection {
    project_camera(&calib.cam_from_radar.apply(point), calib)
}

/// Projects a point already expressed in camera coordinates.
pub fn project_camera(p: &Point3, calib: &Calibration) -> Projection {
    if p.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::Pixel(Pixel {
        u: calib.focal[0] * p.x / p.z + calib.principal[0],
        v: calib.focal[1] * p.y / p.z + calib.principal[1],
    })
}

/// Half-line `origin + s * direction`, `s >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Point3, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DomainError("ray direction must be non-zero".into()));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, s: f64) -> Point3 {
        self.origin + s * self.direction
    }
}

/// Ray through the camera centre and `pixel`, expressed in the radar frame.
pub fn pixel_ray(pixel: Pixel, calib: &Calibration) -> Ray {
    let dir_cam = Vector3::new(
        (pixel.u - calib.principal[0]) / calib.focal[0],
        (pixel.v - calib.principal[1]) / calib.focal[1],
        1.0,
    )
    .normalize();
    let radar_from_cam = calib.cam_from_radar.inverse();
    Ray {
        origin: radar_from_cam.apply(&Vector3::zeros()),
        direction: radar_from_cam.apply_vector(&dir_cam),
    }
}

/// Distance to the half-line plus its gradient with respect to `point`.
pub fn point_to_ray_distance_grad(point: &Point3, ray: &Ray) -> (f64, Vector3<f64>) {
    let rel = point - ray.origin;
    let s = rel.dot(&ray.direction);
    let residual = if s > 0.0 {
        rel - s * ray.direction
    } else {
        rel
    };
    let d = residual.norm();
    if d > 0.0 {
        (d, residual / d)
    } else {
        (0.0, Vector3::zeros())
    }
}

pub fn point_to_ray_distance(point: &Point3, ray: &Ray) -> f64 {
    point_to_ray_distance_grad(point, ray).0
}
