//! Scene-flow, segmentation and odometry evaluation.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, rte_rae, RigidTransform};

#[cfg(test)]
mod tests;

mod evaluate;

pub use evaluate::{evaluate_predictions, FlowField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub rne: f64,
    /// `None` when no ground-truth moving point exists.
    pub mrne: Option<f64>,
    /// `None` when no ground-truth static point exists.
    pub srne: Option<f64>,
}

fn accurate(err: f64, mag: f64, abs_tol: f64, rel_tol: f64) -> bool {
    err < abs_tol || (mag > 0.0 && err / mag < rel_tol)
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn flow_metrics(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    moving_gt: &[bool],
    resolution_ratio: f64,
) -> Result<FlowMetrics> {
    if !(resolution_ratio > 0.0 && resolution_ratio.is_finite()) {
        return Err(Error::InvalidConfig(
            "resolution_ratio must be positive".into(),
        ));
    }
    if pred.len() != gt.len() || gt.len() != moving_gt.len() {
        return Err(Error::ShapeMismatch(
            "flow metric inputs differ in length".into(),
        ));
    }
    if pred.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).collect();
    let n = err.len() as f64;
    let epe = err.iter().sum::<f64>() / n;
    let frac = |abs_tol: f64, rel_tol: f64| {
        err.iter()
            .zip(gt)
            .filter(|(e, g)| accurate(**e, g.norm(), abs_tol, rel_tol))
            .count() as f64
            / n
    };
    let rne = epe / resolution_ratio;
    let restricted = |want: bool| {
        mean_of(
            err.iter()
                .zip(moving_gt)
                .filter(|(_, &m)| m == want)
                .map(|(e, _)| *e),
        )
        .map(|e| e / resolution_ratio)
    };
    Ok(FlowMetrics {
        epe,
        acc_s: frac(0.05, 0.05),
        acc_r: frac(0.1, 0.1),
        rne,
        mrne: restricted(true),
        srne: restricted(false),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegIou {
    pub miou: f64,
    pub iou_moving: f64,
    pub iou_static: f64,
}

/// Per-class IoU of a moving/static split. A class absent from both masks
/// scores 1.
pub fn seg_miou(pred: &[bool], gt: &[bool]) -> Result<SegIou> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(
            "segmentation masks differ in length".into(),
        ));
    }
    let iou = |class: bool| {
        let inter = pred
            .iter()
            .zip(gt)
            .filter(|(&p, &g)| p == class && g == class)
            .count();
        let union = pred
            .iter()
            .zip(gt)
            .filter(|(&p, &g)| p == class || g == class)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let (iou_moving, iou_static) = (iou(true), iou(false));
    Ok(SegIou {
        miou: 0.5 * (iou_moving + iou_static),
        iou_moving,
        iou_static,
    })
}

/// Sensor poses from per-pair point-motion transforms: `pose_0 = I`,
/// `pose_k = pose_{k-1} ∘ T_k⁻¹`.
pub fn accumulate_odometry(transforms: &[RigidTransform]) -> Vec<RigidTransform> {
    let mut poses = Vec::with_capacity(transforms.len() + 1);
    poses.push(RigidTransform::identity());
    for t in transforms {
        let last = *poses.last().unwrap();
        poses.push(compose(&last, &t.inverse()));
    }
    poses
}

/// Ground-truth poses re-expressed relative to the first one.
pub fn relative_to_first(poses: &[RigidTransform]) -> Vec<RigidTransform> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let inv = first.inverse();
    poses.iter().map(|p| compose(&inv, p)).collect()
}

/// Per-pose absolute translation error, metres.
pub fn trajectory_ate(estimate: &[RigidTransform], truth: &[RigidTransform]) -> Result<Vec<f64>> {
    if estimate.len() != truth.len() {
        return Err(Error::ShapeMismatch("trajectories differ in length".into()));
    }
    Ok(estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (e.translation() - t.translation()).norm())
        .collect())
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair: usize,
    pub flow: FlowMetrics,
    pub miou: f64,
    pub rte: f64,
    pub rae: f64,
}

pub fn pair_metrics(
    pair: usize,
    pred_flow: &[Vector3<f64>],
    pred_moving: &[bool],
    pred_ego: &RigidTransform,
    gt_flow: &[Vector3<f64>],
    gt_moving: &[bool],
    gt_ego: &RigidTransform,
    resolution_ratio: f64,
) -> Result<PairMetrics> {
    let flow = flow_metrics(pred_flow, gt_flow, gt_moving, resolution_ratio)?;
    let miou = seg_miou(pred_moving, gt_moving)?.miou;
    let (rte, rae) = rte_rae(pred_ego, gt_ego);
    Ok(PairMetrics {
        pair,
        flow,
        miou,
        rte,
        rae,
    })
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "pair", "epe", "acc_s", "acc_r", "rne", "mrne", "srne", "miou", "rte", "rae",
];

/// Column-wise means; optional columns average over the pairs where present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub rne: f64,
    pub mrne: Option<f64>,
    pub srne: Option<f64>,
    pub miou: f64,
    pub rte: f64,
    pub rae: f64,
}

pub fn summarize(rows: &[PairMetrics]) -> Option<MetricsSummary> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&PairMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(MetricsSummary {
        epe: avg(&|r| r.flow.epe),
        acc_s: avg(&|r| r.flow.acc_s),
        acc_r: avg(&|r| r.flow.acc_r),
        rne: avg(&|r| r.flow.rne),
        mrne: mean_of(rows.iter().filter_map(|r| r.flow.mrne)),
        srne: mean_of(rows.iter().filter_map(|r| r.flow.srne)),
        miou: avg(&|r| r.miou),
        rte: avg(&|r| r.rte),
        rae: avg(&|r| r.rae),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Renders `metrics.csv`: one row per pair plus a `MEAN` row. Absent
/// restricted errors are empty cells.
pub fn metrics_csv(rows: &[PairMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let f = &r.flow;
        w.write_record([
            r.pair.to_string(),
            cell(Some(f.epe)),
            cell(Some(f.acc_s)),
            cell(Some(f.acc_r)),
            cell(Some(f.rne)),
            cell(f.mrne),
            cell(f.srne),
            cell(Some(r.miou)),
            cell(Some(r.rte)),
            cell(Some(r.rae)),
        ])
        .map_err(csv_err)?;
    }
    if let Some(m) = summarize(rows) {
        w.write_record([
            "MEAN".to_string(),
            cell(Some(m.epe)),
            cell(Some(m.acc_s)),
            cell(Some(m.acc_r)),
            cell(Some(m.rne)),
            cell(m.mrne),
            cell(m.srne),
            cell(Some(m.miou)),
            cell(Some(m.rte)),
            cell(Some(m.rae)),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, rows: &[PairMetrics]) -> Result<()> {
    crate::fsutil::write_atomic(path, &metrics_csv(rows)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Trajectory CSV: per pose, x/y/z of each named trajectory.
pub fn trajectory_csv(names: &[&str], trajectories: &[Vec<RigidTransform>]) -> Result<Vec<u8>> {
    if names.len() != trajectories.len() {
        return Err(Error::ShapeMismatch("one name per trajectory".into()));
    }
    let len = trajectories.first().map_or(0, |t| t.len());
    if trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::ShapeMismatch("trajectories differ in length".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string()];
    for n in names {
        for axis in ["x", "y", "z", "yaw"] {
            header.push(format!("{n}_{axis}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..len {
        let mut row = vec![k.to_string()];
        for t in trajectories {
            let p = &t[k];
            let tr = p.translation();
            row.extend([tr.x, tr.y, tr.z, p.yaw()].iter().map(|v| format!("{v}")));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}
