use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::layers::{
    ball_query, cost_volume, local_global, mlp, set_conv, CostFirst, CostVolume, Dense, Gru,
    OffsetDense, SetConvScale,
};
use super::params::{Arch, ParamStore};
use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{rigid_flow, Point3, RigidTransform};
use crate::simworld::RadarFrame;

/// Parameters placed on a tape, grouped by layer.
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub arch: Arch,
    pub eta_b: f64,
    pub feature_scale: [f64; 2],
    sc1: Vec<SetConvScale>,
    sc1_fuse: Dense,
    cost: CostVolume,
    sc2: Vec<SetConvScale>,
    sc2_fuse: Dense,
    gru: Option<Gru>,
    flow_head: Vec<Dense>,
    seg_head: Vec<Dense>,
}

impl BoundModel {
    /// Parameters as leaves when `trainable`, otherwise as constants.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Result<Self> {
        let vars: Vec<Var> = store
            .arrays()
            .iter()
            .map(|a| {
                if trainable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        Self::from_vars(vars, store)
    }

    /// Groups already-recorded parameter nodes, one per store entry.
    pub fn from_vars(vars: Vec<Var>, store: &ParamStore) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::ShapeMismatch("one tape node per parameter".into()));
        }
        let v = |name: &str| -> Result<Var> {
            store
                .position(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let dense = |name: &str| -> Result<Dense> {
            Ok(Dense {
                w: v(&format!("{name}.w"))?,
                b: v(&format!("{name}.b"))?,
            })
        };
        let arch = store.config.arch();
        let grouped = |prefix: &str, widths: &[Vec<usize>]| -> Result<Vec<SetConvScale>> {
            widths
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    Ok(SetConvScale {
                        first: OffsetDense {
                            w_feat: v(&format!("{prefix}.s{j}.l0.w_feat"))?,
                            w_off: v(&format!("{prefix}.s{j}.l0.w_off"))?,
                            b: v(&format!("{prefix}.s{j}.l0.b"))?,
                        },
                        rest: (1..w.len())
                            .map(|m| dense(&format!("{prefix}.s{j}.l{m}")))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect()
        };
        let head = |name: &str| -> Result<Vec<Dense>> {
            (0..=arch.head.len())
                .map(|m| dense(&format!("{name}.l{m}")))
                .collect()
        };
        let gru = if arch.temporal {
            Some(Gru {
                wz: v("gru.wz")?,
                uz: v("gru.uz")?,
                bz: v("gru.bz")?,
                wr: v("gru.wr")?,
                ur: v("gru.ur")?,
                br: v("gru.br")?,
                wn: v("gru.wn")?,
                un: v("gru.un")?,
                bn: v("gru.bn")?,
            })
        } else {
            None
        };
        Ok(Self {
            sc1: grouped("sc1", &arch.sc1)?,
            sc1_fuse: dense("sc1.fuse")?,
            cost: CostVolume {
                k: arch.cost_k,
                first: CostFirst {
                    w_src: v("cost.l0.w_src")?,
                    w_tgt: v("cost.l0.w_tgt")?,
                    w_off: v("cost.l0.w_off")?,
                    b: v("cost.l0.b")?,
                },
                rest: (1..arch.cost.len())
                    .map(|m| dense(&format!("cost.l{m}")))
                    .collect::<Result<_>>()?,
            },
            sc2: grouped("sc2", &arch.sc2)?,
            sc2_fuse: dense("sc2.fuse")?,
            gru,
            flow_head: head("flow")?,
            seg_head: head("seg")?,
            eta_b: store.config.eta_b,
            feature_scale: store.config.feature_scale,
            arch,
            vars,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.arch.sc2_out
    }
}

/// Weights handed to the ego-motion head.
#[derive(Debug, Clone, Copy)]
pub enum EgoWeights<'a> {
    /// `1 - Ŝ` from the segmentation head.
    Predicted,
    /// `1 - S` from a moving-point pseudo label.
    Label(&'a [bool]),
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub coords: Var,
    pub init_flow: Var,
    pub moving_prob: Var,
    pub ego: Var,
    pub final_flow: Var,
    pub moving_mask: Vec<bool>,
    pub hidden: Option<Var>,
    /// Set when the ego head had to abandon the requested weights.
    pub ego_fallback: Option<&'static str>,
}

fn features(frame: &RadarFrame, scale: [f64; 2]) -> Array {
    let data = frame
        .rrv
        .iter()
        .zip(&frame.rcs)
        .flat_map(|(v, r)| [v * scale[0], r * scale[1]])
        .collect();
    Array::with_shape(vec![frame.len(), 2], data)
}

/// Backbone features `E` plus the updated hidden state.
pub fn backbone(
    tape: &mut Tape,
    m: &BoundModel,
    src: &RadarFrame,
    tgt: &RadarFrame,
    src_coords: Var,
    hidden: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    src.validate()?;
    tgt.validate()?;
    let tgt_coords = tape.constant(Array::from_points(&tgt.coords));
    let src_raw = tape.constant(features(src, m.feature_scale));
    let tgt_raw = tape.constant(features(tgt, m.feature_scale));
    let src_groups = ball_query(&src.coords, &m.arch.scales);
    let tgt_groups = ball_query(&tgt.coords, &m.arch.scales);

    let src_local = set_conv(tape, &m.sc1, &m.sc1_fuse, &src_groups, src_coords, src_raw)?;
    let tgt_local = set_conv(tape, &m.sc1, &m.sc1_fuse, &tgt_groups, tgt_coords, tgt_raw)?;
    let (src_lg, _) = local_global(tape, src_local)?;
    let (tgt_lg, _) = local_global(tape, tgt_local)?;
    let corr = cost_volume(
        tape,
        &m.cost,
        &src.coords,
        src_coords,
        src_lg,
        &tgt.coords,
        tgt_coords,
        tgt_lg,
    )?;
    let embedding = tape.concat_cols(&[corr, src_lg, src_raw])?;
    let local = set_conv(
        tape,
        &m.sc2,
        &m.sc2_fuse,
        &src_groups,
        src_coords,
        embedding,
    )?;
    let global = tape.max_pool_all(local)?;
    let (global, new_hidden) = match &m.gru {
        Some(gru) => {
            let h = match hidden {
                Some(h) => h,
                None => tape.constant(Array::zeros(&[1, m.hidden_size()])),
            };
            let h = gru.step(tape, global, h)?;
            (h, Some(h))
        }
        None => (global, None),
    };
    let bcast = tape.gather_rows(global, vec![0; src.len()].into())?;
    Ok((tape.concat_cols(&[local, bcast])?, new_hidden))
}

/// Weighted Kabsch between `coords` and `coords + init_flow`. Degenerate weights
/// fall back to uniform weights, and a degenerate point set to the identity.
pub fn ego_head(
    tape: &mut Tape,
    coords: Var,
    init_flow: Var,
    moving_prob: Var,
    weights: EgoWeights,
) -> Result<(Var, Option<&'static str>)> {
    let n = tape.value(coords).rows();
    let warped = tape.add(coords, init_flow)?;
    let w = match weights {
        EgoWeights::Predicted => tape.affine(moving_prob, -1.0, 1.0),
        EgoWeights::Label(s) => {
            if s.len() != n {
                return Err(Error::ShapeMismatch(
                    "ego-head label length differs from the point count".into(),
                ));
            }
            tape.constant(Array::with_shape(
                vec![n, 1],
                s.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect(),
            ))
        }
    };
    let total: f64 = tape.value(w).data().iter().sum();
    if total > 1e-9 {
        match tape.kabsch(coords, warped, w) {
            Ok(t) => return Ok((t, None)),
            Err(Error::DegenerateGeometry(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let uniform = tape.constant(Array::filled(&[n, 1], 1.0));
    match tape.kabsch(coords, warped, uniform) {
        Ok(t) => {
            log::warn!("ego head: weights degenerate, using uniform weights");
            Ok((t, Some("uniform")))
        }
        Err(Error::DegenerateGeometry(_)) => {
            log::warn!("ego head: point set degenerate, using the identity transform");
            let id = RigidTransform::identity().to_array12().to_vec();
            Ok((tape.constant(Array::vector(id)), Some("identity")))
        }
        Err(e) => Err(e),
    }
}

/// Static rows take the flow induced by `ego`; moving rows keep `init_flow`.
pub fn refine(
    tape: &mut Tape,
    coords: Var,
    init_flow: Var,
    moving_prob: Var,
    ego: Var,
    eta_b: f64,
) -> Result<(Var, Vec<bool>)> {
    let mask: Vec<bool> = tape
        .value(moving_prob)
        .data()
        .iter()
        .map(|&p| p > eta_b)
        .collect();
    let moved = tape.apply_transform(ego, coords)?;
    let rigid = tape.sub(moved, coords)?;
    let out = tape.select_rows(Arc::from(mask.as_slice()), init_flow, rigid)?;
    Ok((out, mask))
}

/// Full two-stage forward pass on a tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    m: &BoundModel,
    src: &RadarFrame,
    tgt: &RadarFrame,
    hidden: Option<Var>,
    weights: EgoWeights,
) -> Result<ForwardVars> {
    let coords = tape.constant(Array::from_points(&src.coords));
    let (e, hidden) = backbone(tape, m, src, tgt, coords, hidden)?;
    let init_flow = mlp(tape, &m.flow_head, e, false)?;
    let logits = mlp(tape, &m.seg_head, e, false)?;
    let moving_prob = tape.sigmoid(logits);
    let (ego, ego_fallback) = ego_head(tape, coords, init_flow, moving_prob, weights)?;
    let (final_flow, moving_mask) = refine(tape, coords, init_flow, moving_prob, ego, m.eta_b)?;
    Ok(ForwardVars {
        coords,
        init_flow,
        moving_prob,
        ego,
        final_flow,
        moving_mask,
        hidden,
        ego_fallback,
    })
}

/// Plain-value result of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    #[serde(with = "crate::serde_util::points")]
    pub init_flow: Vec<Vector3<f64>>,
    pub moving_prob: Vec<f64>,
    pub ego: RigidTransform,
    pub moving_mask: Vec<bool>,
    #[serde(with = "crate::serde_util::points")]
    pub final_flow: Vec<Vector3<f64>>,
    pub hidden: Option<Vec<f64>>,
}

impl ModelOutput {
    pub fn from_tape(tape: &Tape, vars: &ForwardVars) -> Self {
        Self {
            init_flow: tape.value(vars.init_flow).to_points(),
            moving_prob: tape.value(vars.moving_prob).data().to_vec(),
            ego: RigidTransform::from_array12_unchecked(tape.value(vars.ego).data()),
            moving_mask: vars.moving_mask.clone(),
            final_flow: tape.value(vars.final_flow).to_points(),
            hidden: vars.hidden.map(|h| tape.value(h).data().to_vec()),
        }
    }

    /// Checks the mask threshold and the exact static-flow rule.
    pub fn validate(&self, coords: &[Point3], eta_b: f64) -> Result<()> {
        let n = coords.len();
        if [
            self.init_flow.len(),
            self.moving_prob.len(),
            self.moving_mask.len(),
            self.final_flow.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Invariant(
                "model output arrays differ in length".into(),
            ));
        }
        let rigid = rigid_flow(&self.ego, coords);
        for i in 0..n {
            if self.moving_mask[i] != (self.moving_prob[i] > eta_b) {
                return Err(Error::Invariant(format!(
                    "mask of point {i} disagrees with its probability"
                )));
            }
            let expected = if self.moving_mask[i] {
                self.init_flow[i]
            } else {
                rigid[i]
            };
            if self.final_flow[i] != expected {
                return Err(Error::Invariant(format!(
                    "final flow of point {i} breaks the refinement rule"
                )));
            }
        }
        Ok(())
    }
}

/// Inference-only forward pass.
pub fn forward(
    store: &ParamStore,
    src: &RadarFrame,
    tgt: &RadarFrame,
    hidden: Option<&[f64]>,
) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let m = BoundModel::bind(&mut tape, store, false)?;
    let h = match hidden {
        Some(h) if m.arch.temporal => {
            if h.len() != m.hidden_size() {
                return Err(Error::ShapeMismatch("hidden state size".into()));
            }
            Some(tape.constant(Array::with_shape(vec![1, h.len()], h.to_vec())))
        }
        _ => None,
    };
    let vars = forward_on_tape(&mut tape, &m, src, tgt, h, EgoWeights::Predicted)?;
    Ok(ModelOutput::from_tape(&tape, &vars))
}

/// Sequential inference that threads the hidden state and resets it every
/// `clip_len` pairs.
pub struct InferenceSession<'a> {
    store: &'a ParamStore,
    hidden: Option<Vec<f64>>,
    since_reset: usize,
}

impl<'a> InferenceSession<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            hidden: None,
            since_reset: 0,
        }
    }

    pub fn hidden(&self) -> Option<&[f64]> {
        self.hidden.as_deref()
    }

    pub fn step(&mut self, src: &RadarFrame, tgt: &RadarFrame) -> Result<ModelOutput> {
        if self.since_reset == self.store.config.clip_len {
            self.hidden = None;
            self.since_reset = 0;
        }
        let out = forward(self.store, src, tgt, self.hidden.as_deref())?;
        self.hidden = out.hidden.clone();
        self.since_reset += 1;
        Ok(out)
    }
}
