use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;
use crate::geometry::RigidTransform;

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

#[test]
fn perfect_flow_scores_perfectly() {
    let gt = vec![v(1.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(-3.0, 2.0, 1.0)];
    let m = flow_metrics(&gt, &gt, &[true, false, false], 1.0).unwrap();
    assert_eq!(m.epe, 0.0);
    assert_eq!(m.acc_s, 1.0);
    assert_eq!(m.acc_r, 1.0);
}

#[test]
fn relative_branch_counts_large_flows() {
    // 0.12 m error fails both absolute tests; relative error passes AccS only
    // where |F| > 2.4 m and AccR where |F| > 1.2 m.
    let mags = [1.0, 2.0, 10.0, 0.5];
    let gt: Vec<_> = mags.iter().map(|&m| v(m, 0.0, 0.0)).collect();
    let pred: Vec<_> = gt.iter().map(|g| g + v(0.0, 0.12, 0.0)).collect();
    let m = flow_metrics(&pred, &gt, &[false; 4], 1.0).unwrap();
    assert!((m.epe - 0.12).abs() < 1e-15);
    assert_eq!(m.acc_s, 1.0 / 4.0);
    assert_eq!(m.acc_r, 2.0 / 4.0);
}

#[test]
fn rne_divides_by_ratio() {
    let gt = vec![v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
    let pred = vec![v(1.3, 0.0, 0.0), v(0.0, 1.0, 0.9)];
    let m = flow_metrics(&pred, &gt, &[true, false], 2.0).unwrap();
    assert_eq!(m.rne, m.epe / 2.0);
    assert_eq!(m.mrne, Some(0.30000000000000004 / 2.0));
    assert_eq!(m.srne, Some(0.9 / 2.0));
    let only_static = flow_metrics(&pred, &gt, &[false, false], 1.0).unwrap();
    assert_eq!(only_static.mrne, None);
    assert!(flow_metrics(&pred, &gt, &[false, false], 0.0).is_err());
}

#[test]
fn zero_gt_uses_absolute_branch_only() {
    let m = flow_metrics(&[v(0.06, 0.0, 0.0)], &[Vector3::zeros()], &[false], 1.0).unwrap();
    assert_eq!(m.acc_s, 0.0);
    assert_eq!(m.acc_r, 1.0);
}

#[test]
fn miou_cases() {
    let gt = [true, true, false, false];
    assert_eq!(seg_miou(&gt, &gt).unwrap().miou, 1.0);
    let s = seg_miou(&[false; 4], &gt).unwrap();
    assert_eq!((s.iou_static, s.iou_moving, s.miou), (0.5, 0.0, 0.25));
    let inv: Vec<bool> = gt.iter().map(|b| !b).collect();
    let s = seg_miou(&inv, &gt).unwrap();
    assert_eq!((s.iou_static, s.iou_moving), (0.0, 0.0));
    // Moving class absent from both: scores 1 by convention.
    assert_eq!(seg_miou(&[false; 3], &[false; 3]).unwrap().miou, 1.0);
}

#[test]
fn odometry_accumulation() {
    let still = accumulate_odometry(&[RigidTransform::identity(); 4]);
    assert!(still.iter().all(|p| *p == RigidTransform::identity()));
    // Static points flowing -1 m in x means the sensor advanced +1 m.
    let step = RigidTransform::from_translation(v(-1.0, 0.0, 0.0));
    let traj = accumulate_odometry(&[step; 10]);
    assert_eq!(traj.len(), 11);
    assert!((traj[10].translation() - v(10.0, 0.0, 0.0)).norm() < 1e-12);
}

#[test]
fn odometry_reproduces_ground_truth_poses() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let mut poses = vec![RigidTransform::from_yaw(0.3, v(5.0, -2.0, 1.0))];
    for _ in 0..100 {
        let step = RigidTransform::from_axis_angle(
            &v(0.0, 0.0, 1.0),
            rng.random_range(-0.05..0.05),
            v(rng.random_range(0.5..1.0), rng.random_range(-0.1..0.1), 0.0),
        );
        poses.push(compose(poses.last().unwrap(), &step));
    }
    let rel: Vec<_> = poses
        .windows(2)
        .map(|w| crate::geometry::relative_motion(&w[0], &w[1]))
        .collect();
    let est = accumulate_odometry(&rel);
    let gt = relative_to_first(&poses);
    let ate = trajectory_ate(&est, &gt).unwrap();
    assert!(
        ate.iter().all(|&e| e < 1e-9),
        "max {}",
        ate.iter().cloned().fold(0.0, f64::max)
    );
}

#[test]
fn csv_has_expected_columns_and_mean_row() {
    let gt = vec![v(1.0, 0.0, 0.0)];
    let row = |pair, moving| PairMetrics {
        pair,
        flow: flow_metrics(&[v(1.1, 0.0, 0.0)], &gt, &[moving], 1.0).unwrap(),
        miou: 1.0,
        rte: 0.1,
        rae: 0.2,
    };
    let text = String::from_utf8(metrics_csv(&[row(0, true), row(1, false)]).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pair,epe,acc_s,acc_r,rne,mrne,srne,miou,rte,rae");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[3].starts_with("MEAN,"));
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[6], "");
}

proptest! {
    #[test]
    fn acc_s_never_exceeds_acc_r(
        pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, -0.3..0.3f64, -0.3..0.3f64, -0.3..0.3f64), 1..40)
    ) {
        let gt: Vec<_> = pts.iter().map(|p| v(p.0, p.1, p.2)).collect();
        let pred: Vec<_> = pts.iter().map(|p| v(p.0 + p.3, p.1 + p.4, p.2 + p.5)).collect();
        let moving = vec![false; gt.len()];
        let m = flow_metrics(&pred, &gt, &moving, 1.0).unwrap();
        prop_assert!(0.0 <= m.acc_s && m.acc_s <= m.acc_r && m.acc_r <= 1.0);
    }

    #[test]
    fn flow_metrics_ignore_point_order(
        pts in prop::collection::vec((-5.0..5.0f64, -0.3..0.3f64, any::<bool>()), 2..30),
        rot in 0usize..30
    ) {
        let gt: Vec<_> = pts.iter().map(|p| v(p.0, 1.0, 0.0)).collect();
        let pred: Vec<_> = pts.iter().map(|p| v(p.0 + p.1, 1.0, 0.0)).collect();
        let mv: Vec<bool> = pts.iter().map(|p| p.2).collect();
        let a = flow_metrics(&pred, &gt, &mv, 1.0).unwrap();
        let r = rot % gt.len();
        let rotate = |x: &[Vector3<f64>]| { let mut y = x.to_vec(); y.rotate_left(r); y };
        let mut mv2 = mv.clone();
        mv2.rotate_left(r);
        let b = flow_metrics(&rotate(&pred), &rotate(&gt), &mv2, 1.0).unwrap();
        prop_assert!((a.epe - b.epe).abs() < 1e-12);
        prop_assert_eq!(a.acc_s, b.acc_s);
        prop_assert_eq!(a.acc_r, b.acc_r);
    }
}
