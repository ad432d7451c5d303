//! Rigid-body algebra, registration and camera geometry.

mod camera;
mod icp;
mod kabsch;
mod svd;
mod transform;

pub use camera::{
    pixel_ray, point_to_ray_distance, point_to_ray_distance_grad, project, project_camera,
    Calibration, Pixel, Projection, Ray,
};
pub use icp::{icp_ego, NearestGrid};
pub use kabsch::{
    kabsch_vjp, rotation_vjp, weighted_kabsch, weighted_kabsch_full, KabschGrads, KabschSolution,
};
pub use svd::{svd3, Svd3};
pub use transform::{
    compose, invert, relative_motion, rigid_flow, rte_rae, Point3, RigidTransform, ROTATION_TOL,
};
