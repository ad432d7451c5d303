use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::SimConfig;
use super::scene::{Mover, ObjectClass, Parked, SceneBox, Surface, Unicycle};
use super::types::{unit_or_zero, FlowMap, GroundTruth, Owner, RadarFrame, Recording, TrackedBox};
use crate::error::{Error, Result};
use crate::geometry::{
    compose, project, project_camera, relative_motion, Calibration, Pixel, Point3, RigidTransform,
};
use crate::parallel::par_range;
use crate::seed::derive_rng;

const EGO_SUBSTEPS: usize = 20;
const MIN_RANGE: f64 = 1.0;

/// Everything needed to re-render the world: static layout, movers and the
/// true ego trajectory (one pose more than there are frames).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub statics: Vec<SceneBox>,
    pub parked: Vec<Parked>,
    pub movers: Vec<Mover>,
    pub ego: Vec<RigidTransform>,
    pub radar_height: f64,
}

/// A generated sequence with full ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub config: SimConfig,
    pub seed: u64,
    pub calib: Calibration,
    pub dt: f64,
    pub frames: Vec<RadarFrame>,
    pub odom_poses: Vec<RigidTransform>,
    /// Ground-truth tracked boxes per frame.
    pub boxes: Vec<Vec<TrackedBox>>,
    /// Ground-truth optical flow per pair.
    pub optflow: Vec<FlowMap>,
    pub truth: GroundTruth,
    /// Which body produced each point, per frame.
    pub owners: Vec<Vec<Owner>>,
    /// Global RRV bias injected into each frame, m/s.
    pub rrv_bias: Vec<f64>,
    pub scene: Scene,
}

impl Sequence {
    pub fn pairs(&self) -> usize {
        self.frames.len() - 1
    }

    /// True motion (radar frame `k` to radar frame `k+1`) of a body.
    pub fn motion(&self, k: usize, owner: Owner) -> RigidTransform {
        body_motion(&self.scene, self.dt, k, owner)
    }

    /// Noise-free sensor view of the sequence.
    pub fn clean_recording(&self) -> Recording {
        Recording {
            calib: self.calib,
            dt: self.dt,
            frames: self.frames.clone(),
            odom_poses: self.odom_poses.clone(),
            boxes: self.boxes.clone(),
            optflow: self.optflow.clone(),
        }
    }

    /// First surface hit by the ray through integer pixel `(col, row)` in
    /// pair `k`, with the motion of the body it belongs to.
    pub fn raycast(&self, k: usize, col: usize, row: usize) -> Option<(Point3, RigidTransform)> {
        let ctx = RayContext::new(&self.scene, &self.calib, self.dt, k, self.config.max_range);
        ctx.hit(col, row).map(|(p, i)| (p, ctx.motion_of(i)))
    }
}

fn body_motion(scene: &Scene, dt: f64, k: usize, owner: Owner) -> RigidTransform {
    let ego = relative_motion(&scene.ego[k], &scene.ego[k + 1]);
    match owner {
        Owner::Static => ego,
        Owner::Mover(m) => {
            let mover = &scene.movers[m];
            let b0 = mover.pose_at(k as f64 * dt);
            let b1 = mover.pose_at((k + 1) as f64 * dt);
            compose(
                &scene.ego[k + 1].inverse(),
                &compose(&b1, &compose(&b0.inverse(), &scene.ego[k])),
            )
        }
    }
}

fn half_fov(calib: &Calibration) -> f64 {
    (0.5 * calib.width() as f64 / calib.focal[0]).atan()
}

fn in_view(c: &Point3, calib: &Calibration, z_range: [f64; 2], max_range: f64) -> bool {
    let r = c.norm();
    if !(MIN_RANGE..=max_range).contains(&r) {
        return false;
    }
    super::preprocess::in_fov(c, calib, z_range)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(TAU) - PI;
    if a <= -PI {
        a += TAU;
    }
    a
}

/// Dense centreline of the road, parameterised by arc length.
struct Path {
    s: Vec<f64>,
    xy_yaw: Vec<(f64, f64, f64)>,
}

impl Path {
    fn at(&self, s: f64) -> (f64, f64, f64) {
        let i = self
            .s
            .partition_point(|&v| v < s)
            .clamp(1, self.s.len() - 1);
        let (s0, s1) = (self.s[i - 1], self.s[i]);
        let a = if s1 > s0 {
            ((s - s0) / (s1 - s0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (x0, y0, w0) = self.xy_yaw[i - 1];
        let (x1, y1, w1) = self.xy_yaw[i];
        (
            x0 + a * (x1 - x0),
            y0 + a * (y1 - y0),
            w0 + a * wrap_angle(w1 - w0),
        )
    }

    fn place(&self, s: f64, lateral: f64) -> (f64, f64, f64) {
        let (x, y, yaw) = self.at(s);
        (x - lateral * yaw.sin(), y + lateral * yaw.cos(), yaw)
    }
}

fn ego_trajectory(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> (Vec<RigidTransform>, Path) {
    let e = &cfg.ego;
    let phase_v = rng.random_range(0.0..TAU);
    let phase_w = rng.random_range(0.0..TAU);
    let speed = |t: f64| e.speed + e.speed_amplitude * (TAU * t / e.speed_period + phase_v).sin();
    let yaw_rate =
        |t: f64| e.yaw_rate + e.yaw_rate_amplitude * (TAU * t / e.yaw_rate_period + phase_w).sin();
    let h = cfg.dt / EGO_SUBSTEPS as f64;
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    let mut poses = Vec::with_capacity(cfg.num_frames + 1);
    let mut dense = vec![(x, y, yaw)];
    for k in 0..=cfg.num_frames {
        poses.push(RigidTransform::from_yaw(
            yaw,
            Vector3::new(x, y, cfg.radar_height),
        ));
        if k == cfg.num_frames {
            break;
        }
        for j in 0..EGO_SUBSTEPS {
            let t = (k * EGO_SUBSTEPS + j) as f64 * h;
            let w = yaw_rate(t + 0.5 * h);
            let mid = yaw + 0.5 * h * w;
            let v = speed(t + 0.5 * h);
            x += v * h * mid.cos();
            y += v * h * mid.sin();
            yaw += h * w;
            dense.push((x, y, yaw));
        }
    }
    // Extend the road straight ahead of the final pose and behind the first.
    let reach = cfg.max_range + 40.0;
    let steps = (reach / 0.5).ceil() as usize;
    let (lx, ly, lyaw) = *dense.last().unwrap();
    for i in 1..=steps {
        let d = i as f64 * 0.5;
        dense.push((lx + d * lyaw.cos(), ly + d * lyaw.sin(), lyaw));
    }
    let mut behind: Vec<(f64, f64, f64)> = (1..=60)
        .rev()
        .map(|i| (-0.5 * i as f64, 0.0, 0.0))
        .collect();
    behind.extend(dense);
    let mut s = Vec::with_capacity(behind.len());
    let mut acc = 0.0;
    let mut keep = Vec::with_capacity(behind.len());
    for (i, p) in behind.iter().enumerate() {
        if i > 0 {
            let q = keep.last().map(|&j: &usize| behind[j]).unwrap();
            let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            if d < 1e-9 {
                continue;
            }
            acc += d;
        }
        keep.push(i);
        s.push(acc);
    }
    let path = Path {
        s,
        xy_yaw: keep.into_iter().map(|i| behind[i]).collect(),
    };
    (poses, path)
}

fn box_at(path: &Path, s: f64, lateral: f64, size: [f64; 3], surface: Surface) -> SceneBox {
    let (x, y, yaw) = path.place(s, lateral);
    SceneBox {
        pose: RigidTransform::from_yaw(yaw, Vector3::new(x, y, 0.5 * size[2])),
        size,
        surface,
    }
}

fn static_layout(
    cfg: &SimConfig,
    path: &Path,
    rng: &mut ChaCha8Rng,
) -> (Vec<SceneBox>, Vec<Parked>) {
    let s_end = *path.s.last().unwrap();
    let mut statics = Vec::new();
    if cfg.structures {
        for side in [-1.0, 1.0] {
            let mut s = 0.0;
            while s < s_end {
                let len = rng.random_range(6.0..14.0);
                let lateral = side * rng.random_range(7.5..9.0);
                let size = [len, 0.4, rng.random_range(1.2..2.5)];
                if rng.random::<f64>() < 0.85 {
                    statics.push(box_at(path, s + 0.5 * len, lateral, size, Surface::Wall));
                }
                s += len + rng.random_range(0.5..4.0);
            }
            let mut s = rng.random_range(0.0..10.0);
            while s < s_end {
                statics.push(box_at(path, s, side * 6.3, [0.3, 0.3, 3.5], Surface::Pole));
                s += rng.random_range(12.0..25.0);
            }
            let mut s = rng.random_range(0.0..10.0);
            while s < s_end {
                let size = [
                    rng.random_range(8.0..14.0),
                    rng.random_range(6.0..10.0),
                    rng.random_range(5.0..12.0),
                ];
                let lateral = side * (rng.random_range(10.5..14.0) + 0.5 * size[1]);
                statics.push(box_at(path, s, lateral, size, Surface::Building));
                s += size[0] + rng.random_range(2.0..10.0);
            }
        }
    }
    let parked = (0..cfg.parked_cars)
        .map(|i| {
            let s = rng.random_range(8.0..(s_end - 10.0).max(9.0));
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let size = jitter_size(ObjectClass::Car.size(), rng);
            let mut body = box_at(
                path,
                s,
                side * rng.random_range(4.8..5.4),
                size,
                Surface::Object(ObjectClass::Car),
            );
            let flip = if rng.random::<bool>() { PI } else { 0.0 };
            let extra = RigidTransform::rot_z(flip + 0.05 * rng.random_range(-1.0..1.0));
            body.pose = compose(&body.pose, &extra);
            Parked {
                id: i as u64 + 1,
                body,
            }
        })
        .collect();
    (statics, parked)
}

fn jitter_size(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|v| v * rng.random_range(0.9..1.1))
}

fn out_of_view(m: &Mover, ego: &RigidTransform, t: f64, hfov: f64, max_range: f64) -> bool {
    let c = ego.inverse().apply(m.pose_at(t).translation());
    let r = (c.x * c.x + c.y * c.y).sqrt();
    c.x < 3.0 || r > max_range - 3.0 || c.y.atan2(c.x).abs() > hfov
}

fn spawn(
    cfg: &SimConfig,
    ego: &RigidTransform,
    k: usize,
    id: u64,
    hfov: f64,
    rng: &mut ChaCha8Rng,
) -> Mover {
    let class = match rng.random::<f64>() {
        p if p < 0.35 => ObjectClass::Pedestrian,
        p if p < 0.7 => ObjectClass::Cyclist,
        _ => ObjectClass::Car,
    };
    let far = (0.7 * cfg.max_range).min(35.0);
    let x = rng.random_range(6.0..far);
    let lim = ((hfov - 0.15).tan() * x).min(6.0);
    let y = rng.random_range(-lim..lim);
    let crossing = rng.random::<f64>() < cfg.crossing_fraction;
    let rel_heading = if crossing {
        if y > 0.0 {
            -FRAC_PI_2
        } else {
            FRAC_PI_2
        }
    } else if rng.random::<f64>() < 0.6 {
        0.0
    } else {
        PI
    } + 0.05 * rng.random_range(-1.0..1.0);
    let (lo, hi) = class.speed_range();
    let speed = rng.random_range(lo..hi);
    let yaw_rate = if crossing {
        0.0
    } else {
        rng.random_range(-0.1..0.1)
    };
    let world = ego.apply(&Vector3::new(x, y, 0.0));
    Mover {
        id,
        class,
        size: jitter_size(class.size(), rng),
        motion: Unicycle {
            t0: k as f64 * cfg.dt,
            x: world.x,
            y: world.y,
            yaw: ego.yaw() + rel_heading,
            speed,
            yaw_rate,
        },
        first_frame: k,
        last_frame: usize::MAX,
    }
}

fn schedule_movers(
    cfg: &SimConfig,
    ego: &[RigidTransform],
    first_id: u64,
    hfov: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Mover> {
    let mut movers: Vec<Mover> = Vec::new();
    let mut slots: Vec<Option<usize>> = vec![None; cfg.movers];
    let mut next_id = first_id;
    for k in 0..cfg.num_frames {
        let t = k as f64 * cfg.dt;
        for slot in slots.iter_mut() {
            let expired = match slot {
                Some(m) => out_of_view(&movers[*m], &ego[k], t, hfov, cfg.max_range),
                None => true,
            };
            if expired {
                if let Some(m) = slot {
                    movers[*m].last_frame = k - 1;
                }
                let mut fresh = spawn(cfg, &ego[k], k, next_id, hfov, rng);
                for _ in 0..20 {
                    if !out_of_view(&fresh, &ego[k], t, hfov, cfg.max_range) {
                        break;
                    }
                    fresh = spawn(cfg, &ego[k], k, next_id, hfov, rng);
                }
                next_id += 1;
                *slot = Some(movers.len());
                movers.push(fresh);
            }
        }
    }
    for m in movers.iter_mut() {
        if m.last_frame == usize::MAX {
            m.last_frame = cfg.num_frames - 1;
        }
    }
    movers
}

struct SampledPoint {
    coords: Point3,
    normal: Vector3<f64>,
    surface: Surface,
    owner: Owner,
}

/// A box expressed in one radar frame.
struct ViewBox<'a> {
    body: &'a SceneBox,
    /// Radar-from-box.
    pose: RigidTransform,
    owner: Owner,
}

fn view_boxes<'a>(
    scene: &'a Scene,
    movers: &'a [(usize, SceneBox)],
    k: usize,
    reach: f64,
) -> Vec<ViewBox<'a>> {
    let ego = &scene.ego[k];
    let inv = ego.inverse();
    let near = |b: &SceneBox| {
        let c = inv.apply(b.pose.translation());
        let diag = 0.5 * (b.size[0].powi(2) + b.size[1].powi(2) + b.size[2].powi(2)).sqrt();
        c.norm() < reach + diag
    };
    let mut out = Vec::new();
    for b in scene
        .statics
        .iter()
        .chain(scene.parked.iter().map(|p| &p.body))
    {
        if near(b) {
            out.push(ViewBox {
                body: b,
                pose: compose(&inv, &b.pose),
                owner: Owner::Static,
            });
        }
    }
    for (m, b) in movers {
        out.push(ViewBox {
            body: b,
            pose: compose(&inv, &b.pose),
            owner: Owner::Mover(*m),
        });
    }
    out
}

fn sample_frame(
    cfg: &SimConfig,
    calib: &Calibration,
    scene: &Scene,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<SampledPoint> {
    let t = k as f64 * cfg.dt;
    let alive: Vec<(usize, SceneBox)> = scene
        .movers
        .iter()
        .enumerate()
        .filter(|(_, m)| m.alive_at(k))
        .map(|(i, m)| (i, m.scene_box(t)))
        .collect();
    let boxes = view_boxes(scene, &alive, k, cfg.max_range);
    let hfov = half_fov(calib);
    let accept = |c: &Point3| in_view(c, calib, cfg.z_range, cfg.max_range);
    let mut points = Vec::new();

    let sample_box = |vb: &ViewBox, rng: &mut ChaCha8Rng| -> Option<SampledPoint> {
        let viewer = vb.pose.inverse().apply(&Vector3::zeros());
        let s = vb.body.sample_visible(&viewer, rng)?;
        let c = vb.pose.apply(&s.point);
        accept(&c).then(|| SampledPoint {
            coords: c,
            normal: vb.pose.apply_vector(&s.normal),
            surface: vb.body.surface,
            owner: vb.owner,
        })
    };
    let ground = |rng: &mut ChaCha8Rng| -> Option<SampledPoint> {
        let r = rng.random_range(3.0..0.6 * cfg.max_range);
        let az = rng.random_range(-hfov..hfov);
        let c = Vector3::new(r * az.cos(), r * az.sin(), -cfg.radar_height);
        accept(&c).then(|| SampledPoint {
            coords: c,
            normal: Vector3::z(),
            surface: Surface::Ground,
            owner: Owner::Static,
        })
    };

    let statics: Vec<&ViewBox> = boxes.iter().filter(|b| b.owner == Owner::Static).collect();
    let weights: Vec<f64> = statics
        .iter()
        .map(|vb| {
            let h = vb.body.half();
            let area = 4.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
            area / vb.pose.translation().norm().max(5.0)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let n_ground = if statics.is_empty() {
        cfg.static_points
    } else {
        (cfg.static_points as f64 * cfg.ground_fraction).round() as usize
    };
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_ground && tries < 50 * cfg.static_points {
        tries += 1;
        if let Some(p) = ground(rng) {
            points.push(p);
            placed += 1;
        }
    }
    let n_struct = cfg.static_points - placed;
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_struct && tries < 50 * cfg.static_points && total > 0.0 {
        tries += 1;
        let pick = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = statics.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if pick < acc {
                chosen = i;
                break;
            }
        }
        if let Some(p) = sample_box(statics[chosen], rng) {
            points.push(p);
            placed += 1;
        }
    }
    // Top up from the ground when structures were out of reach.
    let mut tries = 0;
    while points.len() < cfg.static_points && tries < 50 * cfg.static_points {
        tries += 1;
        if let Some(p) = ground(rng) {
            points.push(p);
        }
    }
    for vb in boxes.iter().filter(|b| b.owner != Owner::Static) {
        let Surface::Object(class) = vb.body.surface else {
            continue;
        };
        let want = cfg.mover_point_count(class);
        let mut got = 0;
        for _ in 0..50 * want {
            if got == want {
                break;
            }
            if let Some(p) = sample_box(vb, rng) {
                points.push(p);
                got += 1;
            }
        }
    }
    points
}

/// Per-pair ray-casting context in radar frame `k`.
struct RayContext<'a> {
    calib: &'a Calibration,
    /// Box in radar coordinates, its inverse pose, its motion and its pixel bounds.
    boxes: Vec<(SceneBox, RigidTransform, RigidTransform, [f64; 4])>,
    ground_z: f64,
    ego_motion: RigidTransform,
}

impl<'a> RayContext<'a> {
    fn new(scene: &Scene, calib: &'a Calibration, dt: f64, k: usize, max_range: f64) -> Self {
        let t = k as f64 * dt;
        let alive: Vec<(usize, SceneBox)> = scene
            .movers
            .iter()
            .enumerate()
            .filter(|(_, m)| m.alive_at(k))
            .map(|(i, m)| (i, m.scene_box(t)))
            .collect();
        let views = view_boxes(scene, &alive, k, max_range + 30.0);
        let ego_motion = body_motion(scene, dt, k, Owner::Static);
        let full = [
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::INFINITY,
        ];
        let mut boxes = Vec::with_capacity(views.len());
        for vb in &views {
            let local = SceneBox {
                pose: vb.pose,
                size: vb.body.size,
                surface: vb.body.surface,
            };
            let mut rect = [
                f64::INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ];
            let mut behind = false;
            let mut in_front = false;
            for c in local.corners_world() {
                let cam = calib.cam_from_radar.apply(&c);
                if cam.z <= 0.05 {
                    behind = true;
                    continue;
                }
                in_front = true;
                let u = calib.focal[0] * cam.x / cam.z + calib.principal[0];
                let v = calib.focal[1] * cam.y / cam.z + calib.principal[1];
                rect = [
                    rect[0].min(u),
                    rect[1].min(v),
                    rect[2].max(u),
                    rect[3].max(v),
                ];
            }
            if !in_front {
                continue;
            }
            let rect = if behind {
                full
            } else {
                [rect[0] - 1.0, rect[1] - 1.0, rect[2] + 1.0, rect[3] + 1.0]
            };
            let motion = match vb.owner {
                Owner::Static => ego_motion,
                o => body_motion(scene, dt, k, o),
            };
            boxes.push((local, vb.pose.inverse(), motion, rect));
        }
        Self {
            calib,
            boxes,
            ground_z: -scene.radar_height,
            ego_motion,
        }
    }

    fn motion_of(&self, who: Option<usize>) -> RigidTransform {
        who.map_or(self.ego_motion, |i| self.boxes[i].2)
    }

    /// Nearest hit and the index of the box hit (`None` for the ground).
    fn hit(&self, col: usize, row: usize) -> Option<(Point3, Option<usize>)> {
        let ray = crate::geometry::pixel_ray(Pixel::new(col as f64, row as f64), self.calib);
        let (u, v) = (col as f64, row as f64);
        let mut best = f64::INFINITY;
        let mut who = None;
        for (i, (b, inv, _, rect)) in self.boxes.iter().enumerate() {
            if u < rect[0] || u > rect[2] || v < rect[1] || v > rect[3] {
                continue;
            }
            let o = inv.apply(&ray.origin);
            let d = inv.apply_vector(&ray.direction);
            if let Some(t) = b.intersect_local(&o, &d) {
                if t < best {
                    best = t;
                    who = Some(i);
                }
            }
        }
        if ray.direction.z < -1e-12 {
            let t = (self.ground_z - ray.origin.z) / ray.direction.z;
            if t > 0.0 && t < best {
                best = t;
                who = None;
            }
        }
        best.is_finite().then(|| (ray.at(best), who))
    }

    fn flow_at(&self, col: usize, row: usize) -> [f64; 2] {
        let hit = self.hit(col, row);
        let (before, after) = match hit {
            Some((p, who)) => (
                project(&p, self.calib),
                project(&self.motion_of(who).apply(&p), self.calib),
            ),
            None => {
                // Sky: a point at infinity only sees the rotation.
                let ray =
                    crate::geometry::pixel_ray(Pixel::new(col as f64, row as f64), self.calib);
                let cam = self.calib.cam_from_radar.rotation();
                let moved = self.ego_motion.rotation() * ray.direction;
                (
                    project_camera(&(cam * ray.direction), self.calib),
                    project_camera(&(cam * moved), self.calib),
                )
            }
        };
        match (before.pixel(), after.pixel()) {
            (Some(a), Some(b)) => [b.u - a.u, b.v - a.v],
            _ => [0.0, 0.0],
        }
    }

    fn render(&self) -> FlowMap {
        let (w, h) = (self.calib.width(), self.calib.height());
        let mut map = FlowMap::zeros(w, h);
        for row in 0..h {
            for col in 0..w {
                map.set(col, row, self.flow_at(col, row));
            }
        }
        map
    }
}

pub fn generate_sequence(config: &SimConfig, seed: u64) -> Result<Sequence> {
    config.validate()?;
    let calib = config.calibration();
    calib.validate()?;
    let dt = config.dt;
    let hfov = half_fov(&calib);

    let (ego, path) = ego_trajectory(config, &mut derive_rng(seed, "ego"));
    let (statics, parked) = static_layout(config, &path, &mut derive_rng(seed, "layout"));
    let movers = schedule_movers(
        config,
        &ego,
        parked.len() as u64 + 1,
        hfov,
        &mut derive_rng(seed, "movers"),
    );
    let scene = Scene {
        statics,
        parked,
        movers,
        ego,
        radar_height: config.radar_height,
    };

    let rrv_noise = Normal::new(0.0, config.noise.rrv_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let rcs_noise = Normal::new(0.0, config.noise.rcs_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    struct FrameOut {
        frame: RadarFrame,
        owners: Vec<Owner>,
        flow: Vec<Vector3<f64>>,
        boxes: Vec<TrackedBox>,
        bias: f64,
    }

    let outputs: Vec<FrameOut> = par_range(config.num_frames, |k| {
        let mut rng = derive_rng(seed, &format!("frame/{k}"));
        let pts = sample_frame(config, &calib, &scene, k, &mut rng);
        let bias = if config.noise.rrv_bias > 0.0 {
            rng.random_range(-config.noise.rrv_bias..=config.noise.rrv_bias)
        } else {
            0.0
        };
        let ego_motion = body_motion(&scene, dt, k, Owner::Static);
        let mut coords = Vec::with_capacity(pts.len());
        let mut rrv = Vec::with_capacity(pts.len());
        let mut rcs = Vec::with_capacity(pts.len());
        let mut owners = Vec::with_capacity(pts.len());
        let mut flow = Vec::with_capacity(pts.len());
        for p in &pts {
            let motion = match p.owner {
                Owner::Static => ego_motion,
                o => body_motion(&scene, dt, k, o),
            };
            let f = motion.apply(&p.coords) - p.coords;
            let u = unit_or_zero(&p.coords).unwrap_or_else(Vector3::x);
            rrv.push(u.dot(&f) / dt + rrv_noise.sample(&mut rng) + bias);
            let incidence = p.normal.dot(&u).abs().max(0.05);
            rcs.push(p.surface.rcs_base() + 10.0 * incidence.log10() + rcs_noise.sample(&mut rng));
            coords.push(p.coords);
            owners.push(p.owner);
            flow.push(f);
        }
        let inv = scene.ego[k].inverse();
        let t = k as f64 * dt;
        let mut boxes: Vec<TrackedBox> = Vec::new();
        let mut push_box = |id: u64, body: &SceneBox| {
            let q = compose(&inv, &body.pose);
            let c = q.translation();
            boxes.push(TrackedBox {
                id,
                center: [c.x, c.y, c.z],
                size: body.size,
                yaw: q.yaw(),
                frame_index: k,
            });
        };
        for p in &scene.parked {
            if inv.apply(p.body.pose.translation()).norm() < config.max_range + 10.0 {
                push_box(p.id, &p.body);
            }
        }
        for m in scene.movers.iter().filter(|m| m.alive_at(k)) {
            push_box(m.id, &m.scene_box(t));
        }
        FrameOut {
            frame: RadarFrame {
                coords,
                rrv,
                rcs,
                timestamp: t,
            },
            owners,
            flow,
            boxes,
            bias,
        }
    });

    let pairs = config.num_frames - 1;
    let optflow = par_range(pairs, |k| {
        RayContext::new(&scene, &calib, dt, k, config.max_range).render()
    });

    let mut frames = Vec::with_capacity(config.num_frames);
    let mut owners = Vec::with_capacity(config.num_frames);
    let mut boxes = Vec::with_capacity(config.num_frames);
    let mut rrv_bias = Vec::with_capacity(config.num_frames);
    let mut truth = GroundTruth::default();
    for (k, out) in outputs.into_iter().enumerate() {
        if out.frame.is_empty() {
            return Err(Error::EmptyFrame);
        }
        if k < pairs {
            let ego_k = relative_motion(&scene.ego[k], &scene.ego[k + 1]);
            truth.moving.push(GroundTruth::moving_mask(
                &out.frame.coords,
                &out.flow,
                &ego_k,
            ));
            truth.flow.push(out.flow);
            truth.ego.push(ego_k);
        }
        frames.push(out.frame);
        owners.push(out.owners);
        boxes.push(out.boxes);
        rrv_bias.push(out.bias);
    }
    truth.validate(&frames)?;
    let odom_poses = scene.ego[..config.num_frames].to_vec();
    Ok(Sequence {
        config: config.clone(),
        seed,
        calib,
        dt,
        frames,
        odom_poses,
        boxes,
        optflow,
        truth,
        owners,
        rrv_bias,
        scene,
    })
}
