//! Pseudo-labels from odometry, tracked boxes and optical flow.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    compose, project, relative_motion, rigid_flow, Calibration, Point3, RigidTransform,
};
use crate::simworld::{FlowMap, RadarFrame, Recording, TrackedBox};

#[cfg(test)]
mod tests;

/// Ego-motion pseudo transform between two world-from-radar odometer poses.
///
/// The returned `T` maps source-frame coordinates of a static point to the
/// target frame, so `rigid_flow(T)` is the static-point flow.
pub fn ego_pseudo_transform(
    odom_prev: &RigidTransform,
    odom_next: &RigidTransform,
) -> RigidTransform {
    relative_motion(odom_prev, odom_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrvMode {
    /// Subtract the frame-wide residual level before thresholding.
    #[default]
    BiasAware,
    /// Threshold the residuals directly.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrvLabels {
    pub s_v: Vec<bool>,
    /// `|v_i - u_i . f_i / dt|`, m/s.
    pub delta_v: Vec<f64>,
}

/// Signed ego-compensated RRV residuals `v_i - u_i . f^r_i / dt`.
pub fn rrv_signed_residuals(frame: &RadarFrame, ego: &RigidTransform, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    frame
        .coords
        .iter()
        .zip(&frame.rrv)
        .enumerate()
        .map(|(i, (c, v))| {
            let r = c.norm();
            if r == 0.0 {
                return Err(Error::ZeroRangePoint { index: i });
            }
            let f = ego.apply(c) - c;
            Ok(v - (c / r).dot(&f) / dt)
        })
        .collect()
}

/// Ego-compensated RRV residuals `|v_i - u_i . f^r_i / dt|`.
pub fn rrv_residuals(frame: &RadarFrame, ego: &RigidTransform, dt: f64) -> Result<Vec<f64>> {
    Ok(rrv_signed_residuals(frame, ego, dt)?
        .into_iter()
        .map(f64::abs)
        .collect())
}

/// Estimate of the frame-wide residual level that the bias-aware rule removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrvCenter {
    /// Robust to the large residuals of fast movers.
    #[default]
    Median,
    Mean,
}

impl RrvCenter {
    pub fn of(self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        match self {
            RrvCenter::Mean => values.iter().sum::<f64>() / values.len() as f64,
            RrvCenter::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                }
            }
        }
    }
}

/// Moving iff a residual departs from the frame-wide level by more than
/// `eta_v`. Meant for signed residuals: centring after taking magnitudes
/// folds movers whose residual opposes the bias back onto the static level.
pub fn bias_aware_threshold(residuals: &[f64], eta_v: f64, center: RrvCenter) -> Vec<bool> {
    let c = center.of(residuals);
    residuals.iter().map(|d| (d - c).abs() > eta_v).collect()
}

pub fn direct_threshold(delta_v: &[f64], eta_v: f64) -> Vec<bool> {
    delta_v.iter().map(|&d| d > eta_v).collect()
}

pub fn rrv_motion_label(
    frame: &RadarFrame,
    ego: &RigidTransform,
    dt: f64,
    eta_v: f64,
    mode: RrvMode,
    center: RrvCenter,
) -> Result<RrvLabels> {
    if !(eta_v > 0.0) {
        return Err(Error::InvalidConfig("eta_v must be positive".into()));
    }
    let signed = rrv_signed_residuals(frame, ego, dt)?;
    let delta_v: Vec<f64> = signed.iter().map(|r| r.abs()).collect();
    let s_v = match mode {
        RrvMode::BiasAware => bias_aware_threshold(&signed, eta_v, center),
        RrvMode::Direct => direct_threshold(&delta_v, eta_v),
    };
    Ok(RrvLabels { s_v, delta_v })
}

/// Foreground mask and per-object box flow from consecutive tracked boxes.
///
/// A point belongs to the first box of `boxes_prev` that contains it. Points
/// in a box whose id is missing from `boxes_next` are foreground without flow.
pub fn mot_labels(
    coords: &[Point3],
    boxes_prev: &[TrackedBox],
    boxes_next: &[TrackedBox],
    margin: f64,
) -> (Vec<bool>, Vec<Option<Vector3<f64>>>) {
    let next: HashMap<u64, &TrackedBox> = boxes_next.iter().map(|b| (b.id, b)).collect();
    let motions: Vec<Option<RigidTransform>> = boxes_prev
        .iter()
        .map(|b| {
            next.get(&b.id)
                .map(|n| compose(&n.pose(), &b.pose().inverse()))
        })
        .collect();
    let mut s_fg = Vec::with_capacity(coords.len());
    let mut f_fg = Vec::with_capacity(coords.len());
    for c in coords {
        match boxes_prev.iter().position(|b| b.contains(c, margin)) {
            Some(j) => {
                s_fg.push(true);
                f_fg.push(motions[j].map(|t| t.apply(c) - c));
            }
            None => {
                s_fg.push(false);
                f_fg.push(None);
            }
        }
    }
    (s_fg, f_fg)
}

/// Foreground points whose box flow departs from the ego-induced flow by more
/// than `eta_l` metres.
pub fn distill_moving(
    f_fg: &[Option<Vector3<f64>>],
    s_fg: &[bool],
    rigid_flow_r: &[Vector3<f64>],
    eta_l: f64,
) -> Result<Vec<bool>> {
    if !(eta_l > 0.0) {
        return Err(Error::InvalidConfig("eta_l must be positive".into()));
    }
    if f_fg.len() != s_fg.len() || s_fg.len() != rigid_flow_r.len() {
        return Err(Error::ShapeMismatch(
            "distill_moving inputs differ in length".into(),
        ));
    }
    Ok(s_fg
        .iter()
        .zip(f_fg)
        .zip(rigid_flow_r)
        .map(|((&fg, f), r)| fg && f.is_some_and(|f| (f - r).norm() > eta_l))
        .collect())
}

pub fn fuse_labels(s_l: &[bool], s_v: &[bool]) -> Result<Vec<bool>> {
    if s_l.len() != s_v.len() {
        return Err(Error::ShapeMismatch(
            "fuse_labels inputs differ in length".into(),
        ));
    }
    Ok(s_l.iter().zip(s_v).map(|(&l, &v)| l || v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSampling {
    #[default]
    Nearest,
    Bilinear,
}

fn sample_map(map: &FlowMap, u: f64, v: f64, mode: FlowSampling) -> [f64; 2] {
    let (w, h) = (map.width, map.height);
    match mode {
        FlowSampling::Nearest => {
            let col = (u.round() as usize).min(w - 1);
            let row = (v.round() as usize).min(h - 1);
            map.get(col, row)
        }
        FlowSampling::Bilinear => {
            let c0 = (u.floor() as usize).min(w - 1);
            let r0 = (v.floor() as usize).min(h - 1);
            let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
            let (a, b) = (
                (u - c0 as f64).clamp(0.0, 1.0),
                (v - r0 as f64).clamp(0.0, 1.0),
            );
            let mut out = [0.0; 2];
            for (col, row, wgt) in [
                (c0, r0, (1.0 - a) * (1.0 - b)),
                (c1, r0, a * (1.0 - b)),
                (c0, r1, (1.0 - a) * b),
                (c1, r1, a * b),
            ] {
                let f = map.get(col, row);
                out[0] += wgt * f[0];
                out[1] += wgt * f[1];
            }
            out
        }
    }
}

/// Optical flow at each point's projection; `None` off-image or behind the camera.
pub fn optical_labels(
    coords: &[Point3],
    flow_map: &FlowMap,
    calib: &Calibration,
    mode: FlowSampling,
) -> Result<Vec<Option<[f64; 2]>>> {
    if flow_map.width != calib.width() || flow_map.height != calib.height() {
        return Err(Error::ShapeMismatch(
            "flow map size differs from the calibration".into(),
        ));
    }
    if flow_map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainError(
            "flow map contains non-finite values".into(),
        ));
    }
    Ok(coords
        .iter()
        .map(|c| {
            project(c, calib)
                .pixel()
                .filter(|p| p.inside(calib))
                .map(|p| sample_map(flow_map, p.u, p.v, mode))
        })
        .collect())
}

pub const LABEL_CONFIG_VERSION: u32 = 1;

/// Label-factory settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub version: u32,
    pub eta_v: f64,
    pub eta_l: f64,
    pub rrv_mode: RrvMode,
    pub rrv_center: RrvCenter,
    pub box_margin: f64,
    pub flow_sampling: FlowSampling,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            version: LABEL_CONFIG_VERSION,
            eta_v: 0.3,
            eta_l: 0.05,
            rrv_mode: RrvMode::BiasAware,
            rrv_center: RrvCenter::Median,
            box_margin: 0.0,
            flow_sampling: FlowSampling::Nearest,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != LABEL_CONFIG_VERSION {
            return Err(Error::InvalidConfig(
                "unsupported label config version".into(),
            ));
        }
        if !(self.eta_v > 0.0 && self.eta_v.is_finite()) {
            return Err(Error::InvalidConfig("eta_v must be positive".into()));
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return Err(Error::InvalidConfig("eta_l must be positive".into()));
        }
        if !(self.box_margin >= 0.0 && self.box_margin.is_finite()) {
            return Err(Error::InvalidConfig(
                "box_margin must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the label factory consumes for one frame pair.
#[derive(Debug, Clone, Copy)]
pub struct PairInputs<'a> {
    pub pair: usize,
    pub source: &'a RadarFrame,
    pub odom_prev: &'a RigidTransform,
    pub odom_next: &'a RigidTransform,
    pub boxes_prev: &'a [TrackedBox],
    pub boxes_next: &'a [TrackedBox],
    pub flow_map: &'a FlowMap,
    pub calib: &'a Calibration,
    pub dt: f64,
}

impl<'a> PairInputs<'a> {
    pub fn from_recording(rec: &'a Recording, k: usize) -> Self {
        Self {
            pair: k,
            source: &rec.frames[k],
            odom_prev: &rec.odom_poses[k],
            odom_next: &rec.odom_poses[k + 1],
            boxes_prev: &rec.boxes[k],
            boxes_next: &rec.boxes[k + 1],
            flow_map: &rec.optflow[k],
            calib: &rec.calib,
            dt: rec.dt,
        }
    }
}

/// All pseudo-labels of one frame pair, aligned with the source points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBundle {
    pub pair: usize,
    pub pseudo_t: RigidTransform,
    #[serde(with = "crate::serde_util::points")]
    pub rigid_flow_r: Vec<Vector3<f64>>,
    pub delta_v: Vec<f64>,
    pub s_v: Vec<bool>,
    pub s_fg: Vec<bool>,
    #[serde(with = "crate::serde_util::opt_points")]
    pub f_fg: Vec<Option<Vector3<f64>>>,
    pub s_l: Vec<bool>,
    pub s_fused: Vec<bool>,
    pub w_opt: Vec<Option<[f64; 2]>>,
}

impl LabelBundle {
    pub fn len(&self) -> usize {
        self.s_v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_v.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.rigid_flow_r.len(),
            self.delta_v.len(),
            self.s_fg.len(),
            self.f_fg.len(),
            self.s_l.len(),
            self.s_fused.len(),
            self.w_opt.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Invariant("label arrays differ in length".into()));
        }
        for i in 0..n {
            if self.s_l[i] && !self.s_fg[i] {
                return Err(Error::Invariant(format!(
                    "point {i} is moving-distilled but not foreground"
                )));
            }
            if self.s_l[i] && !self.s_fused[i] {
                return Err(Error::Invariant(format!(
                    "point {i} is moving-distilled but not fused-moving"
                )));
            }
            if self.f_fg[i].is_some() && !self.s_fg[i] {
                return Err(Error::Invariant(format!(
                    "point {i} has box flow outside every box"
                )));
            }
        }
        Ok(())
    }

    /// Labels of the points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabelBundle {
        fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
            idx.iter().map(|&i| v[i].clone()).collect()
        }
        LabelBundle {
            pair: self.pair,
            pseudo_t: self.pseudo_t,
            rigid_flow_r: pick(&self.rigid_flow_r, indices),
            delta_v: pick(&self.delta_v, indices),
            s_v: pick(&self.s_v, indices),
            s_fg: pick(&self.s_fg, indices),
            f_fg: pick(&self.f_fg, indices),
            s_l: pick(&self.s_l, indices),
            s_fused: pick(&self.s_fused, indices),
            w_opt: pick(&self.w_opt, indices),
        }
    }
}

pub fn make_bundle(inputs: &PairInputs, cfg: &LabelConfig) -> Result<LabelBundle> {
    cfg.validate()?;
    let coords = &inputs.source.coords;
    let pseudo_t = ego_pseudo_transform(inputs.odom_prev, inputs.odom_next);
    let rigid_flow_r = rigid_flow(&pseudo_t, coords);
    let rrv = rrv_motion_label(
        inputs.source,
        &pseudo_t,
        inputs.dt,
        cfg.eta_v,
        cfg.rrv_mode,
        cfg.rrv_center,
    )?;
    let (s_fg, f_fg) = mot_labels(coords, inputs.boxes_prev, inputs.boxes_next, cfg.box_margin);
    let s_l = distill_moving(&f_fg, &s_fg, &rigid_flow_r, cfg.eta_l)?;
    let s_fused = fuse_labels(&s_l, &rrv.s_v)?;
    let w_opt = optical_labels(coords, inputs.flow_map, inputs.calib, cfg.flow_sampling)?;
    let bundle = LabelBundle {
        pair: inputs.pair,
        pseudo_t,
        rigid_flow_r,
        delta_v: rrv.delta_v,
        s_v: rrv.s_v,
        s_fg,
        f_fg,
        s_l,
        s_fused,
        w_opt,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Bundles for every pair of a recording, built in parallel.
pub fn label_recording(rec: &Recording, cfg: &LabelConfig) -> Result<Vec<LabelBundle>> {
    crate::parallel::par_range(rec.pairs(), |k| {
        make_bundle(&PairInputs::from_recording(rec, k), cfg)
    })
    .into_iter()
    .collect()
}

pub fn write_labels(path: &std::path::Path, bundles: &[LabelBundle]) -> Result<()> {
    crate::fsutil::write_jsonl(path, bundles)
}

pub fn read_labels(path: &std::path::Path) -> Result<Vec<LabelBundle>> {
    let bundles: Vec<LabelBundle> = crate::fsutil::read_jsonl(path)?;
    for (i, b) in bundles.iter().enumerate() {
        if b.pair != i {
            return Err(Error::Format(format!(
                "labels line {i} carries pair {}",
                b.pair
            )));
        }
        b.validate()?;
    }
    Ok(bundles)
}
