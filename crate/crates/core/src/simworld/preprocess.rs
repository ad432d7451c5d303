use rand::seq::index;
use rand::Rng;

use super::types::RadarFrame;
use crate::error::{Error, Result};
use crate::geometry::{project, Calibration, Point3};
use crate::seed::derive_rng;

/// Default radar-frame z range kept by preprocessing, metres.
pub const DEFAULT_Z_RANGE: [f64; 2] = [-3.0, 3.0];

/// Projects inside `[0, W) x [0, H)` with positive depth and z within `z_range`.
pub fn in_fov(c: &Point3, calib: &Calibration, z_range: [f64; 2]) -> bool {
    if c.z < z_range[0] || c.z > z_range[1] {
        return false;
    }
    project(c, calib).pixel().is_some_and(|p| p.inside(calib))
}

pub fn fov_indices(frame: &RadarFrame, calib: &Calibration, z_range: [f64; 2]) -> Vec<usize> {
    (0..frame.len())
        .filter(|&i| in_fov(&frame.coords[i], calib, z_range))
        .collect()
}

/// Keeps only in-view points. Fails with `EmptyFrame` when nothing survives.
pub fn fov_filter(
    frame: &RadarFrame,
    calib: &Calibration,
    z_range: [f64; 2],
) -> Result<RadarFrame> {
    let keep = fov_indices(frame, calib, z_range);
    if keep.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(frame.subset(&keep))
}

/// `n` indices into `0..len`: without replacement when `len >= n`, with
/// replacement otherwise.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyFrame);
    }
    let mut rng = derive_rng(seed, "sample_points");
    Ok(if len >= n {
        index::sample(&mut rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    })
}

pub fn sample_points(frame: &RadarFrame, n: usize, seed: u64) -> Result<RadarFrame> {
    Ok(frame.subset(&sample_indices(frame.len(), n, seed)?))
}
