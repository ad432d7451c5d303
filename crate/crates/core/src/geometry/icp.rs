use std::collections::HashMap;

use super::kabsch::weighted_kabsch;
use super::transform::{Point3, RigidTransform};
use crate::error::{Error, Result};

/// Uniform hash grid for exact nearest-neighbour queries.
pub struct NearestGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    max_ring: i64,
}

impl<'a> NearestGrid<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let (mut lo, mut hi) = (
            Point3::repeat(f64::INFINITY),
            Point3::repeat(f64::NEG_INFINITY),
        );
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-6);
        // Aim for a handful of points per occupied cell.
        let cell = (extent / (points.len().max(1) as f64).cbrt()).max(1e-3) * 1.5;
        let mut cells: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        let max_ring = (extent / cell).ceil() as i64 + 1;
        Self {
            points,
            cell,
            cells,
            max_ring,
        }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Index and squared distance of the closest point; ties go to the lowest index.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        let consider = |best: &mut Option<(usize, f64)>, i: usize| {
            let d = (self.points[i] - q).norm_squared();
            match best {
                Some((bi, bd)) if d > *bd || (d == *bd && i > *bi) => {}
                _ => *best = Some((i, d)),
            }
        };
        // Query may lie outside the occupied extent.
        let ring_limit = self.max_ring
            + [cx, cy, cz]
                .iter()
                .zip(self.bounds())
                .map(|(c, (lo, hi))| (lo - c).max(c - hi).max(0))
                .max()
                .unwrap_or(0);
        for r in 0..=ring_limit {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(list) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in list {
                                consider(&mut best, i);
                            }
                        }
                    }
                }
            }
            if let Some((_, d)) = best {
                // Anything in ring r+1 or beyond is at least r cells away.
                let bound = r as f64 * self.cell;
                if d <= bound * bound {
                    break;
                }
            }
        }
        best
    }

    fn bounds(&self) -> [(i64, i64); 3] {
        let mut b = [(i64::MAX, i64::MIN); 3];
        for k in self.cells.keys() {
            for (axis, v) in [k.0, k.1, k.2].into_iter().enumerate() {
                b[axis].0 = b[axis].0.min(v);
                b[axis].1 = b[axis].1.max(v);
            }
        }
        b
    }
}

/// Point-to-point ICP estimating the transform that maps `src` onto `dst`.
pub fn icp_ego(
    src: &[Point3],
    dst: &[Point3],
    max_iter: usize,
    tol: f64,
) -> Result<RigidTransform> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "icp needs at least 3 points per cloud".into(),
        ));
    }
    let grid = NearestGrid::new(dst);
    let weights = vec![1.0; src.len()];
    let mut current = RigidTransform::identity();
    let mut prev_residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut matched = Vec::with_capacity(src.len());
        let mut residual = 0.0;
        for p in src {
            let (j, d2) = grid.nearest(&current.apply(p)).expect("non-empty grid");
            matched.push(dst[j]);
            residual += d2.sqrt();
        }
        residual /= src.len() as f64;
        current = weighted_kabsch(src, &matched, &weights)?;
        if (prev_residual - residual).abs() < tol {
            break;
        }
        prev_residual = residual;
    }
    Ok(current)
}
