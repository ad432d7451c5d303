//! Finite-difference verification of every loss through the full model.

use nalgebra::Vector3;
use rand::Rng;

use super::{total_loss, LossConfig, PairTargets};
use crate::diffcore::{gradcheck_steps, Coverage, GradcheckReport, Tape, Var};
use crate::error::Result;
use crate::geometry::{Calibration, Point3, RigidTransform};
use crate::network::{forward_on_tape, BoundModel, EgoWeights, ModelConfig, ParamStore};
use crate::seed::{derive_rng, derive_seed};
use crate::simworld::RadarFrame;

/// A synthetic pair with random labels, for exercising the losses.
#[derive(Debug, Clone)]
pub struct RandomPair {
    pub source: RadarFrame,
    pub target: RadarFrame,
    pub calib: Calibration,
    pub targets: PairTargets,
    pub dt: f64,
}

pub fn random_pair(n: usize, seed: u64) -> RandomPair {
    let mut rng = derive_rng(seed, "random-pair");
    let dt = 0.1;
    let ego = RigidTransform::from_yaw(
        rng.random_range(-0.03..0.03),
        Vector3::new(rng.random_range(-1.0..-0.3), 0.0, 0.0),
    );
    let point = |rng: &mut rand_chacha::ChaCha8Rng| {
        Point3::new(
            rng.random_range(5.0..40.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-1.0..2.0),
        )
    };
    let coords: Vec<Point3> = (0..n).map(|_| point(&mut rng)).collect();
    let moving: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let target_coords: Vec<Point3> = coords
        .iter()
        .zip(&moving)
        .map(|(c, &m)| {
            let jitter = Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.1..0.1),
            );
            let shift = if m {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            } else {
                Vector3::zeros()
            };
            ego.apply(c) + jitter + shift
        })
        .collect();
    let frame = |coords: Vec<Point3>, rng: &mut rand_chacha::ChaCha8Rng, t: f64| RadarFrame {
        rrv: coords.iter().map(|_| rng.random_range(-5.0..5.0)).collect(),
        rcs: coords
            .iter()
            .map(|_| rng.random_range(-10.0..20.0))
            .collect(),
        coords,
        timestamp: t,
    };
    let source = frame(coords, &mut rng, 0.0);
    let target = frame(target_coords, &mut rng, dt);
    let s_l: Vec<bool> = moving.iter().map(|&m| m && rng.random_bool(0.7)).collect();
    let f_fg = s_l
        .iter()
        .map(|&l| {
            l.then(|| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    0.0,
                )
            })
        })
        .collect();
    let w_opt = (0..n)
        .map(|_| {
            rng.random_bool(0.8)
                .then(|| [rng.random_range(-40.0..40.0), rng.random_range(-20.0..20.0)])
        })
        .collect();
    RandomPair {
        source,
        target,
        calib: Calibration::forward_facing(400.0, [640, 480], 1.0),
        targets: PairTargets {
            ego: Some(ego),
            moving: Some(moving),
            s_l,
            f_fg,
            w_opt,
        },
        dt,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossGradcheck {
    pub name: &'static str,
    pub value: f64,
    pub report: GradcheckReport,
}

/// Default finite-difference sweep for [`loss_gradchecks`].
pub const GRADCHECK_STEPS: [f64; 6] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

pub const LOSS_NAMES: [&str; 6] = ["ego", "seg", "mot", "opt", "self", "total"];

/// Gradient check of each loss component and the total with respect to the
/// parameters of a freshly initialised model on a random pair.
pub fn loss_gradchecks(
    model: &ModelConfig,
    n_points: usize,
    seed: u64,
    steps: &[f64],
    per_param: usize,
) -> Result<Vec<LossGradcheck>> {
    let store = ParamStore::init(model, derive_seed(seed, "gradcheck-params"))?;
    let pair = random_pair(n_points, derive_seed(seed, "gradcheck-pair"));
    let cfg = LossConfig::default();
    LOSS_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                let m = BoundModel::from_vars(vars.to_vec(), &store)?;
                let labels = pair.targets.moving.as_deref().unwrap_or(&[]);
                let fwd = forward_on_tape(
                    tape,
                    &m,
                    &pair.source,
                    &pair.target,
                    None,
                    EgoWeights::Label(labels),
                )?;
                let l = total_loss(
                    tape,
                    &fwd,
                    &pair.source,
                    &pair.target.coords,
                    pair.dt,
                    &pair.calib,
                    &pair.targets,
                    &cfg,
                )?;
                Ok([l.ego, l.seg, l.mot, l.opt, l.self_, l.total][k])
            };
            let value = crate::diffcore::evaluate(&f, store.arrays())?;
            let report = gradcheck_steps(
                f,
                store.arrays(),
                steps,
                Coverage::Sample {
                    per_param,
                    seed: derive_seed(seed, name),
                },
            )?;
            Ok(LossGradcheck {
                name,
                value,
                report,
            })
        })
        .collect()
}
