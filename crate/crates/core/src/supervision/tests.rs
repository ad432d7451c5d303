use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{Calibration, RigidTransform};
use crate::metrics::seg_miou;
use crate::simworld::{generate_sequence, NoiseConfig, SimConfig};

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn frame(coords: Vec<Vector3<f64>>, rrv: Vec<f64>) -> RadarFrame {
    let n = coords.len();
    RadarFrame {
        coords,
        rrv,
        rcs: vec![0.0; n],
        timestamp: 0.0,
    }
}

fn tracked(id: u64, center: [f64; 3], yaw: f64) -> TrackedBox {
    TrackedBox {
        id,
        center,
        size: [4.0, 2.0, 2.0],
        yaw,
        frame_index: 0,
    }
}

#[test]
fn ego_transform_identity_and_forward_step() {
    let p = RigidTransform::from_yaw(0.7, v(3.0, 1.0, 0.0));
    assert!((ego_pseudo_transform(&p, &p).translation().norm()) < 1e-12);
    let next = crate::geometry::compose(&p, &RigidTransform::from_translation(v(1.0, 0.0, 0.0)));
    let t = ego_pseudo_transform(&p, &next);
    let f = rigid_flow(&t, &[v(10.0, 2.0, 0.5)]);
    assert!((f[0] - v(-1.0, 0.0, 0.0)).norm() < 1e-12);
}

#[test]
fn ego_transform_matches_simulated_static_flow_bitwise() {
    let cfg = SimConfig {
        num_frames: 8,
        noise: NoiseConfig::none(),
        ..SimConfig::default()
    };
    let seq = generate_sequence(&cfg, 11).unwrap();
    let rec = seq.clean_recording();
    for k in 0..rec.pairs() {
        let t = ego_pseudo_transform(&rec.odom_poses[k], &rec.odom_poses[k + 1]);
        let r = rigid_flow(&t, &rec.frames[k].coords);
        for (i, owner) in seq.owners[k].iter().enumerate() {
            if *owner == crate::simworld::Owner::Static {
                assert_eq!(r[i], seq.truth.flow[k][i]);
            }
        }
    }
}

#[test]
fn rrv_labels_on_static_scene() {
    let ego = RigidTransform::from_translation(v(-1.0, 0.0, 0.0));
    let coords = vec![v(10.0, 0.0, 0.0), v(5.0, 5.0, 0.0), v(8.0, -3.0, 1.0)];
    let rrv: Vec<f64> = coords
        .iter()
        .map(|c: &Vector3<f64>| c.normalize().dot(&v(-1.0, 0.0, 0.0)) / 0.1)
        .collect();
    let l = rrv_motion_label(
        &frame(coords.clone(), rrv.clone()),
        &ego,
        0.1,
        0.3,
        RrvMode::BiasAware,
        RrvCenter::Median,
    )
    .unwrap();
    assert!(l.delta_v.iter().all(|d| *d < 1e-9));
    assert!(l.s_v.iter().all(|m| !m));

    // A constant 0.8 m/s bias: the mean absorbs it, the direct rule does not.
    let biased: Vec<f64> = rrv.iter().map(|x| x + 0.8).collect();
    let f = frame(coords.clone(), biased);
    let aware =
        rrv_motion_label(&f, &ego, 0.1, 0.3, RrvMode::BiasAware, RrvCenter::Median).unwrap();
    let direct = rrv_motion_label(&f, &ego, 0.1, 0.3, RrvMode::Direct, RrvCenter::Median).unwrap();
    assert!(aware.s_v.iter().all(|m| !m));
    assert!(direct.s_v.iter().all(|&m| m));
}

#[test]
fn rrv_flags_receding_object() {
    let ego = RigidTransform::identity();
    let mut coords: Vec<_> = (0..20)
        .map(|i| v(10.0 + i as f64, (i as f64) - 10.0, 0.0))
        .collect();
    coords.push(v(15.0, 0.0, 0.0));
    let mut rrv = vec![0.0; 21];
    rrv[20] = 2.0;
    let l = rrv_motion_label(
        &frame(coords, rrv),
        &ego,
        0.1,
        0.3,
        RrvMode::BiasAware,
        RrvCenter::Median,
    )
    .unwrap();
    assert!(l.s_v[20]);
    assert_eq!(l.s_v.iter().filter(|&&m| m).count(), 1);
    assert!((l.delta_v[20] - 2.0).abs() < 1e-12);
}

#[test]
fn rrv_rejects_origin_point_and_bad_threshold() {
    let f = frame(vec![v(1.0, 0.0, 0.0), Vector3::zeros()], vec![0.0, 0.0]);
    let err = rrv_motion_label(
        &f,
        &RigidTransform::identity(),
        0.1,
        0.3,
        RrvMode::Direct,
        RrvCenter::Median,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ZeroRangePoint { index: 1 }));
    let ok = frame(vec![v(1.0, 0.0, 0.0)], vec![0.0]);
    assert!(rrv_motion_label(
        &ok,
        &RigidTransform::identity(),
        0.1,
        0.0,
        RrvMode::Direct,
        RrvCenter::Median
    )
    .is_err());
}

#[test]
fn mot_labels_without_boxes() {
    let (s, f) = mot_labels(&[v(5.0, 0.0, 0.0)], &[], &[], 0.0);
    assert_eq!(s, vec![false]);
    assert_eq!(f, vec![None]);
}

#[test]
fn mot_labels_translating_box() {
    let prev = [tracked(7, [10.0, 0.0, 1.0], 0.0)];
    let next = [tracked(7, [10.5, 0.0, 1.0], 0.0)];
    let pts = [v(10.2, 0.3, 1.0), v(30.0, 0.0, 0.0)];
    let (s, f) = mot_labels(&pts, &prev, &next, 0.0);
    assert_eq!(s, vec![true, false]);
    assert!((f[0].unwrap() - v(0.5, 0.0, 0.0)).norm() < 1e-12);
    assert!(f[1].is_none());
}

#[test]
fn mot_labels_rotating_box() {
    let yaw = 10f64.to_radians();
    let prev = [tracked(3, [10.0, 2.0, 1.0], 0.0)];
    let next = [tracked(3, [10.0, 2.0, 1.0], yaw)];
    let p = v(11.0, 2.5, 1.2);
    let (_, f) = mot_labels(&[p], &prev, &next, 0.0);
    let rel = p - v(10.0, 2.0, 1.0);
    let (c, s) = (yaw.cos(), yaw.sin());
    let expected = v(c * rel.x - s * rel.y, s * rel.x + c * rel.y, rel.z) - rel;
    assert!((f[0].unwrap() - expected).norm() < 1e-9);
}

#[test]
fn mot_labels_lost_track_is_foreground_without_flow() {
    let prev = [tracked(1, [10.0, 0.0, 1.0], 0.0)];
    let (s, f) = mot_labels(&[v(10.0, 0.0, 1.0)], &prev, &[], 0.0);
    assert_eq!(s, vec![true]);
    assert_eq!(f, vec![None]);
}

#[test]
fn distill_cases() {
    // Parked car: box flow equals ego flow.
    let r = vec![v(-1.0, 0.0, 0.0)];
    assert_eq!(
        distill_moving(&[Some(v(-1.0, 0.0, 0.0))], &[true], &r, 0.05).unwrap(),
        vec![false]
    );
    assert_eq!(
        distill_moving(&[Some(Vector3::zeros())], &[true], &r, 0.05).unwrap(),
        vec![true]
    );
    // Exactly at the threshold stays static.
    let at = distill_moving(
        &[Some(v(0.05, 0.0, 0.0))],
        &[true],
        &[Vector3::zeros()],
        0.05,
    )
    .unwrap();
    assert_eq!(at, vec![false]);
    assert_eq!(
        distill_moving(&[None], &[true], &r, 0.05).unwrap(),
        vec![false]
    );
    assert!(distill_moving(&[None], &[true, false], &r, 0.05).is_err());
}

#[test]
fn fuse_truth_table() {
    let l = [false, false, true, true];
    let s = [false, true, false, true];
    assert_eq!(fuse_labels(&l, &s).unwrap(), vec![false, true, true, true]);
    assert!(fuse_labels(&l, &s[..2]).is_err());
}

proptest! {
    #[test]
    fn fuse_is_monotone(pairs in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 0..64)) {
        let l: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let s: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let fused = fuse_labels(&l, &s).unwrap();
        // Adding more moving votes never removes a moving label.
        let more: Vec<bool> = pairs.iter().map(|p| p.1 || p.2).collect();
        let fused_more = fuse_labels(&l, &more).unwrap();
        for i in 0..l.len() {
            prop_assert!(fused[i] >= l[i] && fused[i] >= s[i]);
            prop_assert!(fused_more[i] >= fused[i]);
        }
    }

    #[test]
    fn rrv_labels_shift_invariant_under_uniform_bias(
        seed in 0u64..500,
        shift in -2.0..2.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<_> = (0..40).map(|_| v(rng.random_range(5.0..40.0), rng.random_range(-10.0..10.0), rng.random_range(-1.0..2.0))).collect();
        let ego = RigidTransform::from_translation(v(-0.8, 0.02, 0.0));
        let f0 = frame(coords.clone(), vec![0.0; 40]);
        let base = rrv_residuals(&f0, &ego, 0.1).unwrap();
        // Signed residual e_i = -(u.f/dt); pick rrv so the signed residuals are
        // positive and large enough that |e + shift| = e + shift.
        let offsets: Vec<f64> = (0..40).map(|_| rng.random_range(2.5..4.0)).collect();
        let expected: Vec<f64> = coords.iter().map(|c| c.normalize().dot(&(ego.apply(c) - c)) / 0.1).collect();
        let rrv_a: Vec<f64> = expected.iter().zip(&offsets).map(|(e, o)| e + o).collect();
        let rrv_b: Vec<f64> = rrv_a.iter().map(|x| x + shift).collect();
        for center in [RrvCenter::Median, RrvCenter::Mean] {
            let a = rrv_motion_label(&frame(coords.clone(), rrv_a.clone()), &ego, 0.1, 0.3, RrvMode::BiasAware, center).unwrap();
            let b = rrv_motion_label(&frame(coords.clone(), rrv_b.clone()), &ego, 0.1, 0.3, RrvMode::BiasAware, center).unwrap();
            let c = center.of(&offsets);
            for i in 0..40 {
                // Skip points whose distance to the threshold is within rounding.
                if ((offsets[i] - c).abs() - 0.3).abs() < 1e-9 {
                    continue;
                }
                prop_assert_eq!(a.s_v[i], b.s_v[i]);
            }
        }
        prop_assert_eq!(base.len(), 40);
    }
}

fn calib() -> Calibration {
    Calibration::forward_facing(100.0, [160, 120], 0.3)
}

#[test]
fn optical_zero_map_gives_zero_or_none() {
    let c = calib();
    let map = FlowMap::zeros(160, 120);
    let pts = [v(10.0, 0.0, 0.3), v(-5.0, 0.0, 0.0), v(10.0, 50.0, 0.0)];
    let w = optical_labels(&pts, &map, &c, FlowSampling::Nearest).unwrap();
    assert_eq!(w[0], Some([0.0, 0.0]));
    assert_eq!(w[1], None);
    assert_eq!(w[2], None);
}

#[test]
fn optical_reads_constructed_map() {
    let c = calib();
    let mut map = FlowMap::zeros(160, 120);
    for row in 0..120 {
        for col in 0..160 {
            map.set(col, row, [col as f64, -(row as f64)]);
        }
    }
    let p = v(20.0, -1.0, 0.8);
    let px = project(&p, &c).pixel().unwrap();
    let w = optical_labels(&[p], &map, &c, FlowSampling::Nearest).unwrap()[0].unwrap();
    assert_eq!(w, [px.u.round(), -px.v.round()]);
    let b = optical_labels(&[p], &map, &c, FlowSampling::Bilinear).unwrap()[0].unwrap();
    assert!((b[0] - px.u).abs() < 1e-5 && (b[1] + px.v).abs() < 1e-5);
    assert!(optical_labels(&[p], &FlowMap::zeros(10, 10), &c, FlowSampling::Nearest).is_err());
}

fn noiseless_busy(frames: usize) -> SimConfig {
    SimConfig {
        num_frames: frames,
        movers: 6,
        noise: NoiseConfig::none(),
        ..SimConfig::default()
    }
}

#[test]
fn noiseless_bundle_recovers_moving_points() {
    let seq = generate_sequence(&noiseless_busy(10), 5).unwrap();
    let rec = seq.clean_recording();
    let bundles = label_recording(&rec, &LabelConfig::default()).unwrap();
    let mut movers = 0;
    for (k, b) in bundles.iter().enumerate() {
        b.validate().unwrap();
        let gt = &seq.truth.moving[k];
        for i in 0..b.len() {
            // Every GT-moving point inside a box tracked into the next frame
            // must be distilled as moving.
            if gt[i] && b.f_fg[i].is_some() {
                movers += 1;
                assert!(b.s_l[i], "pair {k} point {i}");
            }
        }
        let iou = seg_miou(&b.s_fused, gt).unwrap();
        assert!(iou.miou > 0.8, "pair {k}: {iou:?}");
    }
    assert!(movers > 0);
}

#[test]
fn static_scene_bundle_without_boxes() {
    let cfg = SimConfig {
        num_frames: 4,
        movers: 0,
        parked_cars: 0,
        noise: NoiseConfig::none(),
        ..SimConfig::default()
    };
    let seq = generate_sequence(&cfg, 9).unwrap();
    let rec = seq.clean_recording();
    for k in 0..rec.pairs() {
        assert!(rec.boxes[k].is_empty());
        let b = make_bundle(
            &PairInputs::from_recording(&rec, k),
            &LabelConfig::default(),
        )
        .unwrap();
        assert!(b.s_fg.iter().all(|m| !m));
        assert!(b.s_l.iter().all(|m| !m));
        assert!(b.s_fused.iter().all(|m| !m));
    }
}

#[test]
fn distilled_implies_fused_on_random_pairs() {
    let cfg = SimConfig {
        num_frames: 41,
        movers: 6,
        ..SimConfig::default()
    };
    let mut checked = 0;
    for seed in 0..25u64 {
        let rec = generate_sequence(&cfg, seed)
            .unwrap()
            .observe(seed + 100)
            .unwrap();
        for b in label_recording(&rec, &LabelConfig::default()).unwrap() {
            for i in 0..b.len() {
                assert!(!b.s_l[i] || b.s_fused[i]);
                assert!(!b.s_l[i] || b.s_fg[i]);
            }
            checked += 1;
        }
    }
    assert!(checked >= 1000);
}

#[test]
fn bias_aware_beats_direct_under_frame_bias() {
    let seq = generate_sequence(&noiseless_busy(20), 21).unwrap();
    let mut rec = seq.clean_recording();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for f in &mut rec.frames {
        let beta = rng.random_range(0.5..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        for x in &mut f.rrv {
            *x += beta;
        }
    }
    let aware_cfg = LabelConfig::default();
    let direct_cfg = LabelConfig {
        rrv_mode: RrvMode::Direct,
        ..LabelConfig::default()
    };
    let aware = label_recording(&rec, &aware_cfg).unwrap();
    let direct = label_recording(&rec, &direct_cfg).unwrap();
    for k in 0..rec.pairs() {
        let gt = &seq.truth.moving[k];
        let a = seg_miou(&aware[k].s_v, gt).unwrap().miou;
        let d = seg_miou(&direct[k].s_v, gt).unwrap().miou;
        assert!(a >= d, "pair {k}: aware {a} direct {d}");
    }
}

#[test]
fn labels_round_trip_through_jsonl() {
    let seq = generate_sequence(&noiseless_busy(5), 3).unwrap();
    let rec = seq.observe(4).unwrap();
    let bundles = label_recording(&rec, &LabelConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    write_labels(&path, &bundles).unwrap();
    assert_eq!(read_labels(&path).unwrap(), bundles);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().count() == bundles.len());
}

#[test]
fn label_config_rejects_unknown_fields() {
    assert!(serde_json::from_str::<LabelConfig>(r#"{"eta_v": 0.3, "bogus": 1}"#).is_err());
    let cfg: LabelConfig = serde_json::from_str(r#"{"rrv_mode": "direct"}"#).unwrap();
    assert_eq!(cfg.rrv_mode, RrvMode::Direct);
    assert!(LabelConfig {
        eta_l: 0.0,
        ..LabelConfig::default()
    }
    .validate()
    .is_err());
    let future: LabelConfig = serde_json::from_str(r#"{"version": 2}"#).unwrap();
    assert!(future.validate().is_err());
}
