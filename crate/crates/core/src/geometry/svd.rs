//! One-sided Jacobi SVD for 3x3 matrices.

use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    /// Singular values, sorted descending.
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn recompose(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

const MAX_SWEEPS: usize = 64;

/// Computes `m = U diag(sigma) V^T` with orthogonal `U`, `V`.
///
/// Columns of `U` belonging to (numerically) zero singular values are completed
/// to an orthonormal basis.
pub fn svd3(m: &Matrix3<f64>) -> Svd3 {
    let mut a = *m;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = a.column(p).norm_squared();
            let beta = a.column(q).norm_squared();
            let gamma = a.column(p).dot(&a.column(q));
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for k in 0..3 {
                let (x, y) = (a[(k, p)], a[(k, q)]);
                a[(k, p)] = c * x - s * y;
                a[(k, q)] = s * x + c * y;
                let (x, y) = (v[(k, p)], v[(k, q)]);
                v[(k, p)] = c * x - s * y;
                v[(k, q)] = s * x + c * y;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut sigma = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        vs.set_column(dst, &v.column(src));
        u.set_column(dst, &a.column(src));
    }

    let floor = 1e-13 * sigma[0].max(f64::MIN_POSITIVE);
    let mut valid = 0;
    for j in 0..3 {
        if sigma[j] > floor {
            let col = u.column(j) / sigma[j];
            u.set_column(j, &col);
            valid += 1;
        } else {
            break;
        }
    }
    // Complete U for the null space.
    match valid {
        0 => u = Matrix3::identity(),
        1 => {
            let u0: Vector3<f64> = u.column(0).into();
            let helper = if u0.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let u1 = u0.cross(&helper).normalize();
            u.set_column(1, &u1);
            u.set_column(2, &u0.cross(&u1));
        }
        2 => {
            let u0: Vector3<f64> = u.column(0).into();
            let u1: Vector3<f64> = u.column(1).into();
            u.set_column(2, &u0.cross(&u1).normalize());
        }
        _ => {}
    }
    Svd3 { u, sigma, v: vs }
}
