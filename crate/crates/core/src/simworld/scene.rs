use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Pedestrian,
    Cyclist,
    Car,
}

impl ObjectClass {
    /// Nominal `(l, w, h)`.
    pub fn size(self) -> [f64; 3] {
        match self {
            ObjectClass::Pedestrian => [0.6, 0.6, 1.7],
            ObjectClass::Cyclist => [1.8, 0.6, 1.6],
            ObjectClass::Car => [4.2, 1.8, 1.5],
        }
    }

    pub fn speed_range(self) -> (f64, f64) {
        match self {
            ObjectClass::Pedestrian => (1.0, 1.8),
            ObjectClass::Cyclist => (3.0, 5.5),
            ObjectClass::Car => (4.0, 9.0),
        }
    }
}

/// What a static or moving box is, for RCS and labelling purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Wall,
    Pole,
    Building,
    Object(ObjectClass),
}

impl Surface {
    /// Base radar cross-section, dBsm.
    pub fn rcs_base(self) -> f64 {
        match self {
            Surface::Ground => -18.0,
            Surface::Wall => 8.0,
            Surface::Pole => 2.0,
            Surface::Building => 12.0,
            Surface::Object(ObjectClass::Pedestrian) => -6.0,
            Surface::Object(ObjectClass::Cyclist) => -2.0,
            Surface::Object(ObjectClass::Car) => 10.0,
        }
    }
}

/// Axis-aligned box in its own frame, placed by `pose` (world-from-box).
/// The box frame origin is the geometric centre.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub pose: RigidTransform,
    /// `(l, w, h)` along local x, y, z.
    pub size: [f64; 3],
    pub surface: Surface,
}

/// Local-frame sample on a box face.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSample {
    pub point: Point3,
    pub normal: Vector3<f64>,
}

impl SceneBox {
    pub fn half(&self) -> Vector3<f64> {
        Vector3::new(self.size[0], self.size[1], self.size[2]) * 0.5
    }

    /// Uniform sample over the faces whose outward normal faces `viewer`
    /// (box-local coordinates). Returns `None` when no face is visible.
    pub fn sample_visible<R: Rng>(
        &self,
        viewer_local: &Point3,
        rng: &mut R,
    ) -> Option<SurfaceSample> {
        let h = self.half();
        let mut faces = [(0usize, 0.0f64, 0.0f64); 6];
        let mut total = 0.0;
        let mut count = 0;
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = 4.0 * h[a] * h[b];
            for sign in [-1.0, 1.0] {
                if sign * viewer_local[axis] > h[axis] {
                    total += area;
                    faces[count] = (axis, sign, total);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return None;
        }
        let pick = rng.random::<f64>() * total;
        let &(axis, sign, _) = faces[..count]
            .iter()
            .find(|f| pick < f.2)
            .unwrap_or(&faces[count - 1]);
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut point = Vector3::zeros();
        point[axis] = sign * h[axis];
        point[a] = rng.random_range(-h[a]..=h[a]);
        point[b] = rng.random_range(-h[b]..=h[b]);
        let mut normal = Vector3::zeros();
        normal[axis] = sign;
        Some(SurfaceSample { point, normal })
    }

    /// Entry distance of a box-local ray, slab method. `None` on a miss or
    /// when the origin is inside.
    pub fn intersect_local(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        let h = self.half();
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            if dir[axis].abs() < 1e-15 {
                if origin[axis].abs() > h[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[axis];
            let mut t0 = (-h[axis] - origin[axis]) * inv;
            let mut t1 = (h[axis] - origin[axis]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_near > 0.0).then_some(t_near)
    }

    pub fn corners_world(&self) -> [Point3; 8] {
        let h = self.half();
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = Vector3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            *c = self.pose.apply(&local);
        }
        out
    }

    /// True if `p` (world) lies inside the box, with `margin` metres of slack.
    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let local = self.pose.inverse().apply(p);
        let h = self.half();
        (0..3).all(|a| local[a].abs() <= h[a] + margin)
    }
}

/// Planar unicycle state: constant forward speed and yaw rate from `t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unicycle {
    pub t0: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

impl Unicycle {
    /// `(x, y, yaw)` at absolute time `t`, closed form.
    pub fn state_at(&self, t: f64) -> (f64, f64, f64) {
        let tau = t - self.t0;
        let yaw = self.yaw + self.yaw_rate * tau;
        if self.yaw_rate.abs() < 1e-9 {
            (
                self.x + self.speed * tau * self.yaw.cos(),
                self.y + self.speed * tau * self.yaw.sin(),
                yaw,
            )
        } else {
            let r = self.speed / self.yaw_rate;
            (
                self.x + r * (yaw.sin() - self.yaw.sin()),
                self.y - r * (yaw.cos() - self.yaw.cos()),
                yaw,
            )
        }
    }
}

/// A rigid moving object alive over the frame interval `[first, last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mover {
    pub id: u64,
    pub class: ObjectClass,
    pub size: [f64; 3],
    pub motion: Unicycle,
    pub first_frame: usize,
    pub last_frame: usize,
}

impl Mover {
    /// World-from-box pose at time `t`. The box rests on the ground (z = 0).
    pub fn pose_at(&self, t: f64) -> RigidTransform {
        let (x, y, yaw) = self.motion.state_at(t);
        RigidTransform::from_yaw(yaw, Vector3::new(x, y, 0.5 * self.size[2]))
    }

    pub fn alive_at(&self, frame: usize) -> bool {
        self.first_frame <= frame && frame <= self.last_frame
    }

    pub fn scene_box(&self, t: f64) -> SceneBox {
        SceneBox {
            pose: self.pose_at(t),
            size: self.size,
            surface: Surface::Object(self.class),
        }
    }
}

/// A parked car: static, but tracked by the box detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Parked {
    pub id: u64,
    pub body: SceneBox,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unicycle_matches_integration() {
        let u = Unicycle {
            t0: 1.0,
            x: 2.0,
            y: -1.0,
            yaw: 0.4,
            speed: 3.0,
            yaw_rate: 0.3,
        };
        let (mut x, mut y, mut yaw) = (2.0f64, -1.0f64, 0.4f64);
        let h = 1e-5;
        for _ in 0..200_000 {
            let mid = yaw + 0.5 * h * 0.3;
            x += 3.0 * h * mid.cos();
            y += 3.0 * h * mid.sin();
            yaw += h * 0.3;
        }
        let (ex, ey, eyaw) = u.state_at(3.0);
        assert!((ex - x).abs() < 1e-6 && (ey - y).abs() < 1e-6 && (eyaw - yaw).abs() < 1e-9);
    }

    #[test]
    fn ray_hits_front_face() {
        let b = SceneBox {
            pose: RigidTransform::identity(),
            size: [2.0, 2.0, 2.0],
            surface: Surface::Wall,
        };
        let t = b.intersect_local(&Vector3::new(-5.0, 0.2, 0.1), &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t, Some(4.0));
        assert!(b
            .intersect_local(&Vector3::new(-5.0, 3.0, 0.0), &Vector3::new(1.0, 0.0, 0.0))
            .is_none());
        assert!(b
            .intersect_local(&Vector3::new(5.0, 0.0, 0.0), &Vector3::new(1.0, 0.0, 0.0))
            .is_none());
    }

    #[test]
    fn samples_lie_on_visible_faces() {
        let b = SceneBox {
            pose: RigidTransform::identity(),
            size: [4.0, 2.0, 1.0],
            surface: Surface::Wall,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let viewer = Vector3::new(-10.0, 5.0, 0.0);
        for _ in 0..200 {
            let s = b.sample_visible(&viewer, &mut rng).unwrap();
            assert!(b.contains(&s.point, 1e-12));
            assert!(s.normal.dot(&(viewer - s.point)) > 0.0);
        }
        assert!(b.sample_visible(&Vector3::zeros(), &mut rng).is_none());
    }
}
