use nalgebra::Vector3;

use super::*;
use crate::geometry::{project, rigid_flow, Calibration, Pixel};

fn static_world() -> SimConfig {
    SimConfig {
        num_frames: 6,
        movers: 0,
        ego: EgoConfig {
            speed: 0.0,
            speed_amplitude: 0.0,
            yaw_rate: 0.0,
            yaw_rate_amplitude: 0.0,
            ..EgoConfig::default()
        },
        noise: NoiseConfig::none(),
        ..SimConfig::default()
    }
}

fn small_busy() -> SimConfig {
    SimConfig {
        num_frames: 12,
        movers: 6,
        ..SimConfig::default()
    }
}

#[test]
fn static_world_without_motion_is_still() {
    let seq = generate_sequence(&static_world(), 1).unwrap();
    for k in 0..seq.pairs() {
        assert!(seq.truth.flow[k].iter().all(|f| f.norm() == 0.0));
        assert!(seq.truth.moving[k].iter().all(|&m| !m));
    }
    for f in &seq.frames {
        assert!(f.rrv.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn straight_ego_motion_gives_radial_rrv() {
    let mut cfg = static_world();
    cfg.ego.speed = 10.0;
    cfg.dt = 0.1;
    let seq = generate_sequence(&cfg, 2).unwrap();
    for k in 0..seq.pairs() {
        let ego = seq.truth.ego[k];
        assert!((ego.translation() - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
        let expected = rigid_flow(&ego, &seq.frames[k].coords);
        assert_eq!(seq.truth.flow[k], expected);
    }
    // The most nearly dead-ahead return approaches at the ego speed.
    let f = &seq.frames[0];
    let (i, _) = f
        .coords
        .iter()
        .enumerate()
        .map(|(i, c)| (i, (c.y * c.y + c.z * c.z).sqrt() / c.x))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let u = f.coords[i].normalize();
    assert!((f.rrv[i] + 10.0 * u.x).abs() < 1e-9);
    assert!((f.rrv[i] + 10.0).abs() < 0.5, "rrv {}", f.rrv[i]);
}

#[test]
fn generation_is_deterministic() {
    let cfg = small_busy();
    let a = generate_sequence(&cfg, 9).unwrap();
    let b = generate_sequence(&cfg, 9).unwrap();
    assert_eq!(a, b);
    let c = generate_sequence(&cfg, 10).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[cfg(feature = "parallel")]
#[test]
fn single_thread_generation_matches_pool() {
    let cfg = small_busy();
    let a = generate_sequence(&cfg, 4).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let b = pool.install(|| generate_sequence(&cfg, 4).unwrap());
    assert_eq!(a, b);
}

#[test]
fn lengths_and_ranges_are_consistent() {
    let seq = generate_sequence(&small_busy(), 3).unwrap();
    assert_eq!(seq.odom_poses.len(), seq.frames.len());
    assert_eq!(seq.optflow.len(), seq.frames.len() - 1);
    assert_eq!(seq.truth.pairs(), seq.frames.len() - 1);
    for f in &seq.frames {
        f.validate().unwrap();
        assert!(f
            .coords
            .iter()
            .all(|c| in_fov(c, &seq.calib, DEFAULT_Z_RANGE)));
    }
    seq.clean_recording().validate().unwrap();
}

#[test]
fn static_points_land_on_their_ego_motion_image() {
    let seq = generate_sequence(&small_busy(), 5).unwrap();
    let mut checked = 0;
    for k in 0..seq.pairs() {
        let ego = seq.truth.ego[k];
        for (i, c) in seq.frames[k].coords.iter().enumerate() {
            if seq.owners[k][i] == Owner::Static {
                let f = seq.truth.flow[k][i];
                assert_eq!(f, rigid_flow(&ego, &[*c])[0]);
                assert!(((c + f) - ego.apply(c)).norm() < 1e-12);
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn moving_mask_follows_five_centimetre_rule() {
    let seq = generate_sequence(&small_busy(), 6).unwrap();
    let mut moving = 0;
    for k in 0..seq.pairs() {
        let coords = &seq.frames[k].coords;
        let ego = seq.truth.ego[k];
        for i in 0..coords.len() {
            let residual = seq.truth.flow[k][i] - (ego.apply(&coords[i]) - coords[i]);
            assert_eq!(seq.truth.moving[k][i], residual.norm() > 0.05);
            moving += seq.truth.moving[k][i] as usize;
        }
    }
    assert!(moving > 0, "busy scene should contain moving points");
}

#[test]
fn mover_flow_is_the_object_rigid_motion() {
    let seq = generate_sequence(&small_busy(), 7).unwrap();
    for k in 0..seq.pairs() {
        for (i, c) in seq.frames[k].coords.iter().enumerate() {
            let t = seq.motion(k, seq.owners[k][i]);
            assert!((seq.truth.flow[k][i] - (t.apply(c) - c)).norm() < 1e-12);
        }
    }
}

#[test]
fn mover_points_lie_inside_their_boxes() {
    let seq = generate_sequence(&small_busy(), 8).unwrap();
    for k in 0..seq.frames.len() {
        for (i, c) in seq.frames[k].coords.iter().enumerate() {
            if let Owner::Mover(m) = seq.owners[k][i] {
                let id = seq.scene.movers[m].id;
                let b = seq.boxes[k]
                    .iter()
                    .find(|b| b.id == id)
                    .expect("box for live mover");
                assert!(b.contains(c, 0.0));
            }
        }
        let mut ids: Vec<u64> = seq.boxes[k].iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), seq.boxes[k].len());
    }
}

#[test]
fn rrv_bias_matches_static_residual_mean() {
    let mut cfg = small_busy();
    cfg.noise.rrv_sigma = 0.1;
    cfg.noise.rrv_bias = 1.0;
    let seq = generate_sequence(&cfg, 11).unwrap();
    for k in 0..seq.pairs() {
        let f = &seq.frames[k];
        let ego = seq.truth.ego[k];
        let residuals: Vec<f64> = (0..f.len())
            .filter(|&i| seq.owners[k][i] == Owner::Static)
            .map(|i| {
                let c = f.coords[i];
                let fr = ego.apply(&c) - c;
                f.rrv[i] - c.normalize().dot(&fr) / seq.dt
            })
            .collect();
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        assert!(
            (mean - seq.rrv_bias[k]).abs() < 3.0 * 0.1 / n.sqrt(),
            "frame {k}"
        );
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SimConfig {
            num_frames: 1,
            ..SimConfig::default()
        },
        SimConfig {
            static_points: 0,
            ..SimConfig::default()
        },
        SimConfig {
            dt: 0.0,
            ..SimConfig::default()
        },
        SimConfig {
            noise: NoiseConfig {
                rrv_sigma: -1.0,
                ..NoiseConfig::default()
            },
            ..SimConfig::default()
        },
        SimConfig {
            noise: NoiseConfig {
                box_dropout: 1.0,
                ..NoiseConfig::default()
            },
            ..SimConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(
            generate_sequence(&cfg, 0),
            Err(crate::Error::InvalidConfig(_))
        ));
    }
    let parsed: Result<SimConfig, _> = serde_json::from_str(r#"{"version": 1, "bogus": 3}"#);
    assert!(parsed.is_err());
    let parsed: SimConfig = serde_json::from_str(r#"{"version": 1, "num_frames": 7}"#).unwrap();
    assert_eq!(parsed.num_frames, 7);
}

fn box_list(n: usize) -> Vec<Vec<TrackedBox>> {
    vec![(0..n)
        .map(|i| TrackedBox {
            id: i as u64,
            center: [10.0, 0.0, 0.0],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            frame_index: 0,
        })
        .collect()]
}

#[test]
fn mot_observe_noise_free_is_identity() {
    let seq = generate_sequence(&small_busy(), 12).unwrap();
    assert_eq!(mot_observe(&seq, 0.0, 0.0, 1).unwrap(), seq.boxes);
    assert!(matches!(
        mot_observe(&seq, 1.0, 0.0, 1),
        Err(crate::Error::InvalidConfig(_))
    ));
}

#[test]
fn mot_dropout_is_binomial() {
    let boxes = box_list(1000);
    let kept = observe_boxes(&boxes, 0.3, 0.0, 77).unwrap()[0].len() as f64;
    let sigma = (1000.0f64 * 0.3 * 0.7).sqrt();
    assert!((kept - 700.0).abs() <= 3.0 * sigma, "kept {kept}");
}

#[test]
fn mot_jitter_preserves_ids() {
    let boxes = box_list(50);
    let out = observe_boxes(&boxes, 0.0, 0.2, 5).unwrap();
    assert_eq!(out[0].len(), 50);
    for (a, b) in boxes[0].iter().zip(&out[0]) {
        assert_eq!(a.id, b.id);
        assert_ne!(a.center, b.center);
    }
}

#[test]
fn still_camera_sees_no_flow() {
    let seq = generate_sequence(&static_world(), 13).unwrap();
    for m in camera_observe(&seq, 0.0, 0.0, 1).unwrap() {
        assert!(m.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn motion_along_optical_axis_leaves_centre_pixel_still() {
    let mut cfg = static_world();
    cfg.ego.speed = 8.0;
    let seq = generate_sequence(&cfg, 14).unwrap();
    let (cx, cy) = (
        seq.calib.principal[0] as usize,
        seq.calib.principal[1] as usize,
    );
    for m in &seq.optflow {
        let f = m.get(cx, cy);
        assert!(f[0].abs() < 1e-9 && f[1].abs() < 1e-9, "{f:?}");
    }
}

#[test]
fn flow_map_matches_projected_scene_motion() {
    let seq = generate_sequence(&small_busy(), 15).unwrap();
    let calib = seq.calib;
    let mut checked = 0;
    for k in [0, seq.pairs() / 2, seq.pairs() - 1] {
        for row in (0..calib.height()).step_by(7) {
            for col in (0..calib.width()).step_by(5) {
                let Some((p, motion)) = seq.raycast(k, col, row) else {
                    continue;
                };
                let (Some(a), Some(b)) = (
                    project(&p, &calib).pixel(),
                    project(&motion.apply(&p), &calib).pixel(),
                ) else {
                    continue;
                };
                let expected = [b.u - a.u, b.v - a.v];
                let got = seq.optflow[k].get(col, row);
                for d in 0..2 {
                    let tol = 1e-6 + f32::EPSILON as f64 * expected[d].abs();
                    assert!(
                        (got[d] - expected[d]).abs() < tol,
                        "pair {k} pixel ({col},{row})"
                    );
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 500);
}

#[test]
fn corrupted_flow_fraction_is_close_to_requested() {
    let seq = generate_sequence(&static_world(), 16).unwrap();
    let maps = camera_observe(&seq, 0.0, 0.1, 3).unwrap();
    let total: usize = maps.iter().map(|m| m.data.len() / 2).sum();
    let bad: usize = maps
        .iter()
        .map(|m| {
            m.data
                .chunks_exact(2)
                .filter(|p| p[0] != 0.0 || p[1] != 0.0)
                .count()
        })
        .sum();
    let frac = bad as f64 / total as f64;
    assert!((frac - 0.1).abs() < 0.01, "{frac}");
}

fn calib() -> Calibration {
    Calibration::forward_facing(100.0, [160, 120], 0.0)
}

fn frame(coords: Vec<Vector3<f64>>) -> RadarFrame {
    let n = coords.len();
    RadarFrame {
        coords,
        rrv: (0..n).map(|i| i as f64).collect(),
        rcs: vec![1.0; n],
        timestamp: 0.0,
    }
}

#[test]
fn fov_filter_keeps_axis_points() {
    let f = frame(
        (1..6)
            .map(|i| Vector3::new(i as f64 * 2.0, 0.0, 0.0))
            .collect(),
    );
    assert_eq!(fov_filter(&f, &calib(), DEFAULT_Z_RANGE).unwrap(), f);
}

#[test]
fn fov_filter_drops_points_behind() {
    let f = frame(vec![
        Vector3::new(5.0, 0.0, 0.0),
        Vector3::new(-1.0, 0.0, 0.0),
    ]);
    let out = fov_filter(&f, &calib(), DEFAULT_Z_RANGE).unwrap();
    assert_eq!(out.coords, vec![Vector3::new(5.0, 0.0, 0.0)]);
    let only_behind = frame(vec![Vector3::new(-1.0, 0.0, 0.0)]);
    assert!(matches!(
        fov_filter(&only_behind, &calib(), DEFAULT_Z_RANGE),
        Err(crate::Error::EmptyFrame)
    ));
}

#[test]
fn fov_filter_matches_brute_force() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let c = calib();
    let pts: Vec<Vector3<f64>> = (0..2000)
        .map(|_| {
            Vector3::new(
                rng.random_range(-20.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(-6.0..6.0),
            )
        })
        .collect();
    let expected = pts
        .iter()
        .filter(|p| {
            let cam = c.cam_from_radar.apply(p);
            if cam.z <= 0.0 || p.z < -3.0 || p.z > 3.0 {
                return false;
            }
            let u = 100.0 * cam.x / cam.z + 80.0;
            let v = 100.0 * cam.y / cam.z + 60.0;
            (0.0..160.0).contains(&u) && (0.0..120.0).contains(&v)
        })
        .count();
    let out = fov_filter(&frame(pts), &c, DEFAULT_Z_RANGE).unwrap();
    assert_eq!(out.len(), expected);
    assert!(expected > 100);
}

#[test]
fn sampling_contracts() {
    let f = frame(
        (0..300)
            .map(|i| Vector3::new(5.0 + i as f64, 0.0, 0.0))
            .collect(),
    );
    let idx = sample_indices(300, 300, 1).unwrap();
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..300).collect::<Vec<_>>());

    let idx = sample_indices(300, 256, 2).unwrap();
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 256);

    let idx = sample_indices(100, 256, 3).unwrap();
    assert_eq!(idx.len(), 256);
    assert!(idx.iter().all(|&i| i < 100));

    assert_eq!(
        sample_points(&f, 40, 8).unwrap(),
        sample_points(&f, 40, 8).unwrap()
    );
    let s = sample_points(&f, 40, 8).unwrap();
    for (c, v) in s.coords.iter().zip(&s.rrv) {
        assert_eq!(c.x - 5.0, *v);
    }
}

#[test]
fn dataset_round_trip() {
    let seq = generate_sequence(
        &SimConfig {
            num_frames: 4,
            ..SimConfig::default()
        },
        21,
    )
    .unwrap();
    let data = seq.to_dataset(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).unwrap();
    assert!(dir.path().join("optflow/00002.bin").exists());
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn observed_recording_keeps_radar_and_odometry() {
    let seq = generate_sequence(&small_busy(), 22).unwrap();
    let rec = seq.observe(3).unwrap();
    assert_eq!(rec.frames, seq.frames);
    assert_eq!(rec.odom_poses, seq.odom_poses);
    assert_ne!(rec.optflow, seq.optflow);
}

#[test]
fn pixel_centre_ray_projects_back() {
    let c = Calibration::forward_facing(100.0, [160, 120], 0.3);
    let r = crate::geometry::pixel_ray(Pixel::new(80.0, 60.0), &c);
    assert!((r.direction - Vector3::x()).norm() < 1e-12);
}
