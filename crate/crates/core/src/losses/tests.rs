use approx::assert_abs_diff_eq;
use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;
use crate::diffcore::{gradcheck, Coverage};
use crate::geometry::{point_to_ray_distance, rigid_flow};
use crate::network::ModelConfig;

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn scalar(tape: &Tape, x: Var) -> f64 {
    tape.value(x).item()
}

fn calib() -> Calibration {
    Calibration::forward_facing(400.0, [640, 480], 1.0)
}

fn flow_leaf(tape: &mut Tape, flow: &[Vector3<f64>]) -> Var {
    tape.leaf(Array::from_points(flow))
}

#[test]
fn ego_loss_cases() {
    let coords = vec![v(1.0, 2.0, 0.0), v(10.0, -3.0, 1.0), v(-4.0, 0.5, 2.0)];
    let t = RigidTransform::from_yaw(0.1, v(0.5, 0.2, 0.0));
    let mut tape = Tape::new();
    let c = tape.constant(Array::from_points(&coords));
    let same = tape.constant(Array::vector(t.to_array12().to_vec()));
    let l = ego_loss(&mut tape, same, &t, c).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 0.0, epsilon = 1e-12);

    let shifted = RigidTransform::from_yaw(0.1, v(1.5, 0.2, 0.0));
    let s = tape.constant(Array::vector(shifted.to_array12().to_vec()));
    let l = ego_loss(&mut tape, s, &t, c).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 1.0, epsilon = 1e-12);

    let other = RigidTransform::from_axis_angle(&v(0.3, -0.2, 1.0), 0.4, v(-1.0, 0.3, 0.2));
    let o = tape.constant(Array::vector(other.to_array12().to_vec()));
    let l = ego_loss(&mut tape, o, &t, c).unwrap();
    let (a, b) = (rigid_flow(&other, &coords), rigid_flow(&t, &coords));
    let direct = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).sum::<f64>() / 3.0;
    assert_abs_diff_eq!(scalar(&tape, l), direct, epsilon = 1e-12);
}

fn seg_value(probs: &[f64], labels: &[bool]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(Array::with_shape(vec![probs.len(), 1], probs.to_vec()));
    let l = seg_loss(&mut tape, p, labels).unwrap();
    scalar(&tape, l)
}

#[test]
fn seg_loss_cases() {
    let labels = [true, false, false, true, false];
    let probs: Vec<f64> = labels
        .iter()
        .map(|&m| if m { 0.999 } else { 0.001 })
        .collect();
    assert_abs_diff_eq!(
        seg_value(&probs, &labels),
        -(0.999f64.ln()),
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(
        seg_value(&[0.5; 5], &labels),
        std::f64::consts::LN_2,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(
        seg_value(&[0.5; 3], &[false, true, true]),
        std::f64::consts::LN_2,
        epsilon = 1e-12
    );
    assert!(seg_value(&[0.0; 4], &[false; 4]) < 1e-6);
    assert!(seg_value(&[1.0; 4], &[true; 4]) < 1e-6);
    let mut tape = Tape::new();
    let p = tape.leaf(Array::filled(&[3, 1], 0.5));
    assert!(seg_loss(&mut tape, p, &[true]).is_err());
}

#[test]
fn mot_loss_cases() {
    let mut tape = Tape::new();
    let f = flow_leaf(&mut tape, &[v(1.3, 2.4, 0.0), v(9.0, 9.0, 9.0)]);
    let l = mot_loss(
        &mut tape,
        f,
        &[Some(v(1.0, 2.0, 0.0)), None],
        &[true, false],
    )
    .unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 0.5, epsilon = 1e-12);
    let g = tape.backward(l).unwrap().take(f);
    assert_eq!(&g.data()[3..], &[0.0, 0.0, 0.0]);

    let l = mot_loss(
        &mut tape,
        f,
        &[Some(v(1.3, 2.4, 0.0)), Some(v(0.0, 0.0, 0.0))],
        &[true, false],
    )
    .unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 0.0, epsilon = 1e-12);

    let l = mot_loss(&mut tape, f, &[None, None], &[false, false]).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    let g = tape.backward(l).unwrap().take(f);
    assert!(g.data().iter().all(|&x| x == 0.0));

    assert!(matches!(
        mot_loss(&mut tape, f, &[None, None], &[true, false]),
        Err(Error::Invariant(_))
    ));
}

/// A source point, its optical label and the ray through the displaced pixel.
fn ray_setup() -> (Point3, [f64; 2], Ray) {
    let cal = calib();
    let c = v(12.0, 1.5, 0.4);
    let w = [6.0, -3.5];
    let m = project(&c, &cal).pixel().unwrap();
    (c, w, pixel_ray(Pixel::new(m.u + w[0], m.v + w[1]), &cal))
}

fn perpendicular(d: &Vector3<f64>) -> Vector3<f64> {
    d.cross(&v(0.0, 0.0, 1.0)).normalize()
}

fn opt_value(flow: Vector3<f64>, c: Point3, w: [f64; 2]) -> (f64, Array) {
    let mut tape = Tape::new();
    let f = flow_leaf(&mut tape, &[flow]);
    let l = opt_loss(&mut tape, f, &[c], &[Some(w)], &[true], &calib()).unwrap();
    let g = tape.backward(l).unwrap().take(f);
    (scalar(&tape, l), g)
}

#[test]
fn opt_loss_cases() {
    let (c, w, ray) = ray_setup();
    let on_ray = ray.origin + ray.direction * 13.0;
    let (l, _) = opt_value(on_ray - c, c, w);
    assert!(l < 1e-12);

    let side = perpendicular(&ray.direction);
    let (l, g) = opt_value(on_ray + side * 0.2 - c, c, w);
    assert_eq!(l, 0.0);
    assert!(g.data().iter().all(|&x| x == 0.0));

    let p = on_ray + side * 1.0;
    let (l, _) = opt_value(p - c, c, w);
    assert_abs_diff_eq!(l, point_to_ray_distance(&p, &ray), epsilon = 1e-12);
    assert_abs_diff_eq!(l, 1.0, epsilon = 1e-9);

    // Sliding along the ray leaves the loss unchanged.
    let (far, _) = opt_value(p + ray.direction * 25.0 - c, c, w);
    assert_abs_diff_eq!(far, l, epsilon = 1e-9);
}

#[test]
fn opt_loss_ignores_unlabelled_points() {
    let (c, w, ray) = ray_setup();
    let p = ray.origin + ray.direction * 13.0 + perpendicular(&ray.direction) * 2.0;
    let pts = [c, c, c];
    let flows = [p - c, p - c, p - c];
    let mut tape = Tape::new();
    let f = flow_leaf(&mut tape, &flows);
    let l = opt_loss(
        &mut tape,
        f,
        &pts,
        &[Some(w), None, Some(w)],
        &[true, true, false],
        &calib(),
    )
    .unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 2.0, epsilon = 1e-9);
    let g = tape.backward(l).unwrap().take(f);
    assert!(g.data()[..3].iter().any(|&x| x != 0.0));
    assert!(g.data()[3..].iter().all(|&x| x == 0.0));

    let l = opt_loss(&mut tape, f, &pts, &[None; 3], &[true; 3], &calib()).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
}

fn grid_frame(rrv: impl Fn(&Point3) -> f64) -> RadarFrame {
    let coords: Vec<Point3> = (0..6)
        .flat_map(|i| {
            (0..5).map(move |j| {
                v(
                    6.0 + 2.0 * i as f64,
                    -4.0 + 2.0 * j as f64,
                    0.5 * ((i + j) % 3) as f64,
                )
            })
        })
        .collect();
    RadarFrame {
        rrv: coords.iter().map(&rrv).collect(),
        rcs: vec![0.0; coords.len()],
        coords,
        timestamp: 0.0,
    }
}

fn self_value(flow: &[Vector3<f64>], src: &RadarFrame, tgt: &[Point3], w: SelfWeights) -> f64 {
    let mut tape = Tape::new();
    let f = flow_leaf(&mut tape, flow);
    let l = self_loss(&mut tape, f, src, tgt, 0.1, w).unwrap();
    scalar(&tape, l)
}

#[test]
fn self_loss_cases() {
    let only = |chamfer, smooth, radial| SelfWeights {
        chamfer,
        smooth,
        radial,
    };
    let dt = 0.1;
    let shift = v(-0.8, 0.1, 0.0);
    // Static scene seen from a translating sensor: exact flow is constant.
    let src = grid_frame(|c| c.normalize().dot(&shift) / dt);
    let tgt: Vec<Point3> = src.coords.iter().map(|c| c + shift).collect();
    let exact = vec![shift; src.len()];
    assert!(self_value(&exact, &src, &tgt, SelfWeights::default()) < 1e-12);

    let constant = vec![v(3.0, -2.0, 1.0); src.len()];
    assert_eq!(self_value(&constant, &src, &tgt, only(0.0, 1.0, 0.0)), 0.0);

    let still = grid_frame(|_| 0.0);
    assert_eq!(
        self_value(
            &vec![Vector3::zeros(); still.len()],
            &still,
            &still.coords,
            only(0.0, 0.0, 1.0)
        ),
        0.0
    );

    let noisy: Vec<_> = exact
        .iter()
        .enumerate()
        .map(|(i, f)| f + v(0.01 * i as f64, 0.0, 0.0))
        .collect();
    assert!(self_value(&noisy, &src, &tgt, only(0.0, 1.0, 0.0)) > 0.0);
    assert!(self_value(&noisy, &src, &tgt, only(1.0, 0.0, 0.0)) > 0.0);
    assert!(self_value(&noisy, &src, &tgt, only(0.0, 0.0, 1.0)) > 0.0);
}

#[test]
fn self_loss_terms_are_differentiable() {
    let src = grid_frame(|c| 0.3 * c.x);
    let tgt: Vec<Point3> = src
        .coords
        .iter()
        .map(|c| c + v(0.37, -0.21, 0.05))
        .collect();
    let flow: Vec<_> = (0..src.len())
        .map(|i| {
            v(
                0.1 * (i % 7) as f64,
                -0.05 * (i % 3) as f64,
                0.02 * i as f64,
            )
        })
        .collect();
    let report = gradcheck(
        |tape, vars| self_loss(tape, vars[0], &src, &tgt, 0.1, SelfWeights::default()),
        &[Array::from_points(&flow)],
        1e-6,
        Coverage::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn self_loss_rejects_origin_point() {
    let mut src = grid_frame(|_| 0.0);
    src.coords[4] = Vector3::zeros();
    let mut tape = Tape::new();
    let f = flow_leaf(&mut tape, &vec![Vector3::zeros(); src.len()]);
    let tgt = src.coords.clone();
    let r = self_loss(&mut tape, f, &src, &tgt, 0.1, SelfWeights::default());
    assert!(matches!(r, Err(Error::ZeroRangePoint { index: 4 })));
}

fn model_losses(pair: &RandomPair, cfg: &LossConfig, seed: u64) -> LossReport {
    let store = crate::network::ParamStore::init(&ModelConfig::with_scale(0.125), seed).unwrap();
    let mut tape = Tape::new();
    let m = crate::network::BoundModel::bind(&mut tape, &store, true).unwrap();
    let labels = pair.targets.moving.clone().unwrap_or_default();
    let weights = if pair.targets.moving.is_some() {
        crate::network::EgoWeights::Label(&labels)
    } else {
        crate::network::EgoWeights::Predicted
    };
    let fwd =
        crate::network::forward_on_tape(&mut tape, &m, &pair.source, &pair.target, None, weights)
            .unwrap();
    let l = total_loss(
        &mut tape,
        &fwd,
        &pair.source,
        &pair.target.coords,
        pair.dt,
        &pair.calib,
        &pair.targets,
        cfg,
    )
    .unwrap();
    l.report(&tape)
}

#[test]
fn total_composes_components() {
    let pair = random_pair(40, 3);
    let r = model_losses(&pair, &LossConfig::default(), 1);
    let expected = (r.ego + r.seg) + ((r.mot + 0.1 * r.opt) + r.self_);
    assert_eq!(r.total, expected);
    for x in [r.ego, r.seg, r.mot, r.opt, r.self_] {
        assert!(x > 0.0 && x.is_finite(), "{r:?}");
    }
}

#[test]
fn zero_lambda_makes_total_independent_of_camera() {
    let cfg = LossConfig {
        lambda_opt: 0.0,
        ..LossConfig::default()
    };
    let pair = random_pair(40, 4);
    let mut other = pair.clone();
    for w in other.targets.w_opt.iter_mut() {
        *w = w.map(|[a, b]| [a * -3.0 + 7.0, b + 50.0]);
    }
    let a = model_losses(&pair, &cfg, 2);
    let b = model_losses(&other, &cfg, 2);
    assert_ne!(a.opt, b.opt);
    assert_eq!(a.total.to_bits(), b.total.to_bits());
}

#[test]
fn modality_switches_remove_terms() {
    let pair = random_pair(40, 5);
    let bundle = LabelBundle {
        pair: 0,
        pseudo_t: pair.targets.ego.unwrap(),
        rigid_flow_r: vec![Vector3::zeros(); 40],
        delta_v: vec![0.0; 40],
        s_v: pair.targets.moving.clone().unwrap(),
        s_fg: pair.targets.s_l.clone(),
        f_fg: pair.targets.f_fg.clone(),
        s_l: pair.targets.s_l.clone(),
        s_fused: pair.targets.moving.clone().unwrap(),
        w_opt: pair.targets.w_opt.clone(),
    };
    let mut off = pair.clone();
    off.targets = PairTargets::from_bundle(&bundle, Modalities::none());
    let r = model_losses(&off, &LossConfig::default(), 3);
    assert_eq!((r.ego, r.seg, r.mot, r.opt), (0.0, 0.0, 0.0, 0.0));
    assert!(r.self_ > 0.0);
    assert_eq!(r.total, r.self_);

    let no_cam = PairTargets::from_bundle(
        &bundle,
        Modalities {
            camera: false,
            ..Modalities::default()
        },
    );
    assert!(no_cam.w_opt.iter().all(Option::is_none));
    let no_odo = PairTargets::from_bundle(
        &bundle,
        Modalities {
            odometer: false,
            ..Modalities::default()
        },
    );
    assert_eq!(no_odo.ego, None);
    assert_eq!(no_odo.moving.as_deref(), Some(bundle.s_l.as_slice()));
}

#[test]
fn losses_gradcheck_through_small_model() {
    let checks =
        loss_gradchecks(&ModelConfig::with_scale(0.125), 32, 11, &GRADCHECK_STEPS, 3).unwrap();
    assert_eq!(checks.len(), LOSS_NAMES.len());
    for c in &checks {
        assert!(c.value.is_finite());
        assert!(c.report.max_rel_error < 1e-4, "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn config_rejects_unknown_fields_and_negative_weights() {
    assert!(serde_json::from_str::<LossConfig>(r#"{"lambda_opt": 0.1, "extra": 1}"#).is_err());
    let cfg: LossConfig = serde_json::from_str(r#"{"lambda_opt": -1.0}"#).unwrap();
    assert!(cfg.validate().is_err());
    let r = LossReport::default();
    assert!(serde_json::to_string(&r).unwrap().contains("\"self\":"));
}

proptest! {
    #[test]
    fn seg_loss_symmetric_under_complement(
        cases in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
    ) {
        let (p, s): (Vec<f64>, Vec<bool>) = cases.into_iter().unzip();
        let q: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
        let t: Vec<bool> = s.iter().map(|x| !x).collect();
        let (a, b) = (seg_value(&p, &s), seg_value(&q, &t));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn mot_loss_non_negative(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 1..30)
    ) {
        let flow: Vec<_> = rows.iter().map(|r| v(r.0, r.1, r.2)).collect();
        let s: Vec<bool> = rows.iter().map(|r| r.3).collect();
        let f_fg: Vec<_> = rows.iter().map(|r| Some(v(r.1, r.2, r.0))).collect();
        let mut tape = Tape::new();
        let f = flow_leaf(&mut tape, &flow);
        let l = mot_loss(&mut tape, f, &f_fg, &s).unwrap();
        prop_assert!(scalar(&tape, l) >= 0.0);
        let g = tape.backward(l).unwrap().take(f);
        for (i, &m) in s.iter().enumerate() {
            if !m {
                prop_assert!(g.row(i).iter().all(|&x| x == 0.0));
            }
        }
    }
}
