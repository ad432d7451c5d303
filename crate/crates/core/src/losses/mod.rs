//! Training objectives, all built on the autodiff tape so every term is
//! differentiable with respect to the model parameters.
//!
//! `total = ego + seg + (mot + lambda_opt * opt + self)`.

mod check;

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    pixel_ray, project, Calibration, NearestGrid, Pixel, Point3, Ray, RigidTransform,
};
use crate::network::layers::knn;
use crate::network::ForwardVars;
use crate::simworld::RadarFrame;
use crate::supervision::LabelBundle;

pub use check::{
    loss_gradchecks, random_pair, LossGradcheck, RandomPair, GRADCHECK_STEPS, LOSS_NAMES,
};

pub const DEFAULT_LAMBDA_OPT: f64 = 0.1;
/// Point-to-ray distances below this many metres are ignored.
pub const RAY_DEADZONE: f64 = 0.25;
pub const SMOOTH_NEIGHBORS: usize = 8;
const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfWeights {
    pub chamfer: f64,
    pub smooth: f64,
    pub radial: f64,
}

impl Default for SelfWeights {
    fn default() -> Self {
        Self {
            chamfer: 1.0,
            smooth: 1.0,
            radial: 1.0,
        }
    }
}

/// Which sensors contribute pseudo labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modalities {
    pub odometer: bool,
    pub lidar_boxes: bool,
    pub camera: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self {
            odometer: true,
            lidar_boxes: true,
            camera: true,
        }
    }
}

impl Modalities {
    pub fn none() -> Self {
        Self {
            odometer: false,
            lidar_boxes: false,
            camera: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_opt: f64,
    pub self_weights: SelfWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_opt: DEFAULT_LAMBDA_OPT,
            self_weights: SelfWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.self_weights;
        if [self.lambda_opt, w.chamfer, w.smooth, w.radial]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Pseudo labels of one pair after applying the modality switches.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTargets {
    pub ego: Option<RigidTransform>,
    /// Moving-point label for the segmentation loss and the ego head.
    pub moving: Option<Vec<bool>>,
    pub s_l: Vec<bool>,
    pub f_fg: Vec<Option<Vector3<f64>>>,
    pub w_opt: Vec<Option<[f64; 2]>>,
}

impl PairTargets {
    pub fn from_bundle(b: &LabelBundle, m: Modalities) -> Self {
        let n = b.len();
        let moving = match (m.odometer, m.lidar_boxes) {
            (true, true) => Some(b.s_fused.clone()),
            (true, false) => Some(b.s_v.clone()),
            (false, true) => Some(b.s_l.clone()),
            (false, false) => None,
        };
        Self {
            ego: m.odometer.then_some(b.pseudo_t),
            moving,
            s_l: if m.lidar_boxes {
                b.s_l.clone()
            } else {
                vec![false; n]
            },
            f_fg: if m.lidar_boxes {
                b.f_fg.clone()
            } else {
                vec![None; n]
            },
            w_opt: if m.camera {
                b.w_opt.clone()
            } else {
                vec![None; n]
            },
        }
    }

    /// Restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ego: self.ego,
            moving: self
                .moving
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            s_l: indices.iter().map(|&i| self.s_l[i]).collect(),
            f_fg: indices.iter().map(|&i| self.f_fg[i]).collect(),
            w_opt: indices.iter().map(|&i| self.w_opt[i]).collect(),
        }
    }
}

/// Scalar values of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ego: f64,
    pub seg: f64,
    pub mot: f64,
    pub opt: f64,
    #[serde(rename = "self")]
    pub self_: f64,
    pub lambda_opt: f64,
}

impl LossReport {
    /// Component-wise sum, for averaging over pairs.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.total += other.total;
        self.ego += other.ego;
        self.seg += other.seg;
        self.mot += other.mot;
        self.opt += other.opt;
        self.self_ += other.self_;
        self.lambda_opt = other.lambda_opt;
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            total: self.total * s,
            ego: self.ego * s,
            seg: self.seg * s,
            mot: self.mot * s,
            opt: self.opt * s,
            self_: self.self_ * s,
            lambda_opt: self.lambda_opt,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total, self.ego, self.seg, self.mot, self.opt, self.self_,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Tape nodes of every component.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ego: Var,
    pub seg: Var,
    pub mot: Var,
    pub opt: Var,
    pub self_: Var,
    pub lambda_opt: f64,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            total: v(self.total),
            ego: v(self.ego),
            seg: v(self.seg),
            mot: v(self.mot),
            opt: v(self.opt),
            self_: v(self.self_),
            lambda_opt: self.lambda_opt,
        }
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Array::scalar(0.0))
}

fn column(values: impl Iterator<Item = f64>) -> Array {
    let data: Vec<f64> = values.collect();
    Array::with_shape(vec![data.len(), 1], data)
}

/// Mean point distance between the motions of `coords` under `ego_hat` and `truth`.
pub fn ego_loss(tape: &mut Tape, ego_hat: Var, truth: &RigidTransform, coords: Var) -> Result<Var> {
    let pts = tape.value(coords).to_points();
    if pts.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let moved_truth: Vec<Point3> = pts.iter().map(|c| truth.apply(c)).collect();
    let target = tape.constant(Array::from_points(&moved_truth));
    let moved = tape.apply_transform(ego_hat, coords)?;
    let diff = tape.sub(moved, target)?;
    let d = tape.row_norm(diff);
    Ok(tape.mean(d))
}

/// Class-balanced binary cross-entropy; an empty class contributes nothing.
pub fn seg_loss(tape: &mut Tape, prob: Var, moving: &[bool]) -> Result<Var> {
    let n = tape.value(prob).rows();
    if n == 0 {
        return Err(Error::EmptyFrame);
    }
    if moving.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} probabilities",
            moving.len()
        )));
    }
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let n_moving = moving.iter().filter(|&&m| m).count();
    let n_static = n - n_moving;
    let mut terms = Vec::new();
    if n_moving > 0 {
        let logp = tape.log(p)?;
        let mask = tape.constant(column(moving.iter().map(|&m| if m { 1.0 } else { 0.0 })));
        let masked = tape.mul(logp, mask)?;
        let s = tape.sum(masked);
        terms.push(tape.scale(s, 1.0 / n_moving as f64));
    }
    if n_static > 0 {
        let q = tape.affine(p, -1.0, 1.0);
        let logq = tape.log(q)?;
        let mask = tape.constant(column(moving.iter().map(|&m| if m { 0.0 } else { 1.0 })));
        let masked = tape.mul(logq, mask)?;
        let s = tape.sum(masked);
        terms.push(tape.scale(s, 1.0 / n_static as f64));
    }
    let sum = match terms[..] {
        [a] => a,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!("at least one class is present"),
    };
    Ok(tape.scale(sum, -0.5))
}

/// Mean flow error on the LiDAR-labelled moving points.
pub fn mot_loss(
    tape: &mut Tape,
    flow: Var,
    f_fg: &[Option<Vector3<f64>>],
    s_l: &[bool],
) -> Result<Var> {
    let n = tape.value(flow).rows();
    if f_fg.len() != n || s_l.len() != n {
        return Err(Error::ShapeMismatch(
            "mot labels differ in length from the flow".into(),
        ));
    }
    let mut idx = Vec::new();
    let mut target = Vec::new();
    for i in (0..n).filter(|&i| s_l[i]) {
        let f = f_fg[i]
            .ok_or_else(|| Error::Invariant(format!("point {i} is in S^l without a box flow")))?;
        idx.push(i);
        target.push(f);
    }
    if idx.is_empty() {
        return Ok(zero(tape));
    }
    let picked = tape.gather_rows(flow, idx.into())?;
    let target = tape.constant(Array::from_points(&target));
    let diff = tape.sub(picked, target)?;
    let d = tape.row_norm(diff);
    Ok(tape.mean(d))
}

/// Point-to-ray distance of warped moving points to the rays through their
/// optical-flow-displaced pixels.
pub fn opt_loss(
    tape: &mut Tape,
    flow: Var,
    coords: &[Point3],
    w_opt: &[Option<[f64; 2]>],
    moving: &[bool],
    calib: &Calibration,
) -> Result<Var> {
    let n = coords.len();
    if tape.value(flow).rows() != n || w_opt.len() != n || moving.len() != n {
        return Err(Error::ShapeMismatch(
            "optical labels differ in length from the flow".into(),
        ));
    }
    let mut idx = Vec::new();
    let mut rays: Vec<Ray> = Vec::new();
    for i in 0..n {
        let (true, Some(w)) = (moving[i], w_opt[i]) else {
            continue;
        };
        let Some(m) = project(&coords[i], calib).pixel() else {
            continue;
        };
        idx.push(i);
        rays.push(pixel_ray(Pixel::new(m.u + w[0], m.v + w[1]), calib));
    }
    if idx.is_empty() {
        return Ok(zero(tape));
    }
    let idx: Arc<[usize]> = idx.into();
    let c = tape.constant(Array::from_points(
        &idx.iter().map(|&i| coords[i]).collect::<Vec<_>>(),
    ));
    let f = tape.gather_rows(flow, idx)?;
    let warped = tape.add(c, f)?;
    let d = tape.ray_distance(warped, rays.into(), RAY_DEADZONE)?;
    Ok(tape.mean(d))
}

/// Self-supervised surrogate: one-sided Chamfer to the target cloud, flow
/// smoothness over spatial neighbours, and radial-velocity consistency.
pub fn self_loss(
    tape: &mut Tape,
    flow: Var,
    src: &RadarFrame,
    tgt: &[Point3],
    dt: f64,
    w: SelfWeights,
) -> Result<Var> {
    let n = src.len();
    if n == 0 || tgt.is_empty() {
        return Err(Error::EmptyFrame);
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    if tape.value(flow).rows() != n {
        return Err(Error::ShapeMismatch(
            "flow rows differ from the source points".into(),
        ));
    }
    let coords = tape.constant(Array::from_points(&src.coords));
    let mut parts = Vec::new();

    if w.chamfer != 0.0 {
        let warped = tape.add(coords, flow)?;
        let grid = NearestGrid::new(tgt);
        let nearest: Vec<Point3> = tape
            .value(warped)
            .to_points()
            .iter()
            .map(|p| tgt[grid.nearest(p).expect("target is non-empty").0])
            .collect();
        let nearest = tape.constant(Array::from_points(&nearest));
        let diff = tape.sub(warped, nearest)?;
        let d = tape.row_norm(diff);
        let m = tape.mean(d);
        parts.push(tape.scale(m, w.chamfer));
    }

    if w.smooth != 0.0 && n > 1 {
        let nb = knn(&src.coords, &src.coords, SMOOTH_NEIGHBORS + 1);
        let (mut centers, mut others) = (Vec::new(), Vec::new());
        for (i, group) in nb.idx.chunks(nb.k).enumerate() {
            for &j in group.iter().filter(|&&j| j != i).take(SMOOTH_NEIGHBORS) {
                centers.push(i);
                others.push(j);
            }
        }
        let a = tape.gather_rows(flow, centers.into())?;
        let b = tape.gather_rows(flow, others.into())?;
        let diff = tape.sub(a, b)?;
        let d = tape.row_norm(diff);
        let m = tape.mean(d);
        parts.push(tape.scale(m, w.smooth));
    }

    if w.radial != 0.0 {
        let mut dirs = Vec::with_capacity(n);
        for (i, c) in src.coords.iter().enumerate() {
            let r = c.norm();
            if r == 0.0 {
                return Err(Error::ZeroRangePoint { index: i });
            }
            dirs.push(c / r);
        }
        let u = tape.constant(Array::from_points(&dirs));
        let proj = tape.mul(flow, u)?;
        let radial = tape.row_sum(proj);
        let expected = tape.constant(column(src.rrv.iter().map(|v| v * dt)));
        let diff = tape.sub(radial, expected)?;
        let a = tape.abs(diff);
        let m = tape.mean(a);
        parts.push(tape.scale(m, w.radial));
    }

    let mut acc = match parts.first() {
        Some(&p) => p,
        None => return Ok(zero(tape)),
    };
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// All components on one forward pass. Ego acts on the predicted transform,
/// seg on the probabilities and the flow terms on the refined flow.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    fwd: &ForwardVars,
    src: &RadarFrame,
    tgt: &[Point3],
    dt: f64,
    calib: &Calibration,
    targets: &PairTargets,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let ego = match &targets.ego {
        Some(t) => ego_loss(tape, fwd.ego, t, fwd.coords)?,
        None => zero(tape),
    };
    let seg = match &targets.moving {
        Some(s) => seg_loss(tape, fwd.moving_prob, s)?,
        None => zero(tape),
    };
    let mot = mot_loss(tape, fwd.final_flow, &targets.f_fg, &targets.s_l)?;
    let no_moving;
    let moving = match &targets.moving {
        Some(s) => s.as_slice(),
        None => {
            no_moving = vec![false; src.len()];
            &no_moving
        }
    };
    let opt = opt_loss(
        tape,
        fwd.final_flow,
        &src.coords,
        &targets.w_opt,
        moving,
        calib,
    )?;
    let self_ = self_loss(tape, fwd.final_flow, src, tgt, dt, cfg.self_weights)?;

    let head = tape.add(ego, seg)?;
    let weighted_opt = tape.scale(opt, cfg.lambda_opt);
    let flow = tape.add(mot, weighted_opt)?;
    let flow = tape.add(flow, self_)?;
    let total = tape.add(head, flow)?;
    Ok(LossVars {
        total,
        ego,
        seg,
        mot,
        opt,
        self_,
        lambda_opt: cfg.lambda_opt,
    })
}

#[cfg(test)]
mod tests;
