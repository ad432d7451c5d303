use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

fn same_shapes(a: &[Array], b: &[Array]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
}

impl Adam {
    pub fn new(params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_state(t: u64, m: Vec<Array>, v: Vec<Array>, params: &[Array]) -> Result<Self> {
        if !same_shapes(&m, params) || !same_shapes(&v, params) {
            return Err(Error::ShapeMismatch(
                "optimiser moments do not match the parameters".into(),
            ));
        }
        Ok(Self { t, m, v })
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) -> Result<()> {
        if !same_shapes(params, grads) || !same_shapes(params, &self.m) {
            return Err(Error::ShapeMismatch(
                "gradients do not match the parameters".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
