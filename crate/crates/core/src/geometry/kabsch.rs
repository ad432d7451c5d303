//! Weighted Kabsch registration and its vector-Jacobian product.
//!
//! The solver minimises `sum_i w_i |R s_i + t - d_i|^2` over proper rigid motions.
//! Weights are normalised to sum to one internally.

use nalgebra::{Matrix3, Vector3};

use super::svd::{svd3, Svd3};
use super::transform::{Point3, RigidTransform};
use crate::error::{Error, Result};

/// Relative singular-value floor below which a point set counts as collinear.
const RANK_TOL: f64 = 1e-12;

/// Intermediate quantities of one Kabsch solve, kept for differentiation.
#[derive(Debug, Clone)]
pub struct KabschSolution {
    pub transform: RigidTransform,
    /// Normalised weights.
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    pub centroid_src: Vector3<f64>,
    pub centroid_dst: Vector3<f64>,
    /// Weighted cross-covariance `sum p_i (s_i - cs)(d_i - cd)^T`.
    pub covariance: Matrix3<f64>,
    pub svd: Svd3,
    /// Reflection correction, `+1` or `-1`.
    pub d: f64,
}

pub fn weighted_kabsch(src: &[Point3], dst: &[Point3], weights: &[f64]) -> Result<RigidTransform> {
    weighted_kabsch_full(src, dst, weights).map(|s| s.transform)
}

pub fn weighted_kabsch_full(
    src: &[Point3],
    dst: &[Point3],
    weights: &[f64],
) -> Result<KabschSolution> {
    let n = src.len();
    if dst.len() != n || weights.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "kabsch: {} source, {} target, {} weights",
            n,
            dst.len(),
            weights.len()
        )));
    }
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "kabsch needs at least 3 points, got {n}"
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::DomainError(
            "kabsch weights must be finite and non-negative".into(),
        ));
    }
    let weight_sum: f64 = weights.iter().sum();
    if !(weight_sum > 0.0) {
        return Err(Error::DegenerateGeometry(
            "kabsch weights sum to zero".into(),
        ));
    }
    let p: Vec<f64> = weights.iter().map(|w| w / weight_sum).collect();

    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for i in 0..n {
        cs += p[i] * src[i];
        cd += p[i] * dst[i];
    }
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for i in 0..n {
        let a = src[i] - cs;
        let b = dst[i] - cd;
        h += p[i] * a * b.transpose();
        spread += p[i] * a * a.transpose();
    }

    let spread_sv = svd3(&spread).sigma;
    if !(spread_sv[0] > 0.0) || spread_sv[1] <= RANK_TOL * spread_sv[0] {
        return Err(Error::DegenerateGeometry(
            "weighted source points are coincident or collinear".into(),
        ));
    }
    let svd = svd3(&h);
    if !(svd.sigma[0] > 0.0) || svd.sigma[1] <= RANK_TOL * svd.sigma[0] {
        return Err(Error::DegenerateGeometry(
            "weighted target points are coincident or collinear".into(),
        ));
    }
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = svd.v * correction * svd.u.transpose();
    let translation = cd - rotation * cs;
    Ok(KabschSolution {
        transform: RigidTransform::from_parts_unchecked(rotation, translation),
        weights: p,
        weight_sum,
        centroid_src: cs,
        centroid_dst: cd,
        covariance: h,
        svd,
        d,
    })
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Gradient of a scalar with respect to the covariance `H`, given its gradient
/// with respect to the optimal rotation.
///
/// `R H` is symmetric at the optimum, so a perturbation `dH` moves the rotation
/// by `dR = R [w]x` with `(tr(S) I - S) w = vee(A^T - A)`, `S = H R`, `A = dH R`.
pub fn rotation_vjp(sol: &KabschSolution, grad_rotation: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let r = sol.transform.rotation();
    let s = sol.covariance * r;
    let s = 0.5 * (s + s.transpose());
    let system = Matrix3::identity() * s.trace() - s;
    let inv = system.try_inverse().ok_or_else(|| {
        Error::DegenerateGeometry("kabsch rotation is not differentiable here".into())
    })?;
    let m = r.transpose() * grad_rotation;
    let mut grad_h = Matrix3::zeros();
    for k in 0..3 {
        for l in 0..3 {
            // A = E_kl R has row k equal to row l of R.
            let mut a = Matrix3::zeros();
            a.set_row(k, &r.row(l));
            let b = a.transpose() - a;
            let w = inv * Vector3::new(b[(2, 1)], b[(0, 2)], b[(1, 0)]);
            grad_h[(k, l)] = m.component_mul(&skew(&w)).sum();
        }
    }
    Ok(grad_h)
}

/// Gradients of a scalar with respect to all Kabsch inputs.
#[derive(Debug, Clone)]
pub struct KabschGrads {
    pub src: Vec<Vector3<f64>>,
    pub dst: Vec<Vector3<f64>>,
    /// With respect to the raw (unnormalised) weights.
    pub weights: Vec<f64>,
}

/// Back-propagates gradients on `(R, t)` through the closed-form solution.
pub fn kabsch_vjp(
    src: &[Point3],
    dst: &[Point3],
    sol: &KabschSolution,
    grad_rotation: &Matrix3<f64>,
    grad_translation: &Vector3<f64>,
) -> Result<KabschGrads> {
    let r = sol.transform.rotation();
    let (cs, cd) = (sol.centroid_src, sol.centroid_dst);
    // t = cd - R cs
    let g_r = grad_rotation - grad_translation * cs.transpose();
    let g_h = rotation_vjp(sol, &g_r)?;
    // H = sum p s d^T - cs cd^T
    let g_cd = grad_translation - g_h.transpose() * cs;
    let g_cs = -(r.transpose() * grad_translation) - g_h * cd;

    let n = src.len();
    let mut gs = Vec::with_capacity(n);
    let mut gd = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let p = sol.weights[i];
        gs.push(p * (g_h * dst[i] + g_cs));
        gd.push(p * (g_h.transpose() * src[i] + g_cd));
        q.push(src[i].dot(&(g_h * dst[i])) + g_cs.dot(&src[i]) + g_cd.dot(&dst[i]));
    }
    let mean_q: f64 = sol.weights.iter().zip(&q).map(|(p, q)| p * q).sum();
    let gw = q.iter().map(|qi| (qi - mean_q) / sol.weight_sum).collect();
    Ok(KabschGrads {
        src: gs,
        dst: gd,
        weights: gw,
    })
}
