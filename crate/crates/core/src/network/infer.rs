//! Whole-sequence inference and the prediction file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{InferenceSession, ModelOutput};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::fsutil::{read_jsonl, write_jsonl};
use crate::geometry::RigidTransform;
use crate::simworld::{fov_indices, GroundTruth, Recording};

/// Model output for one pair, on the source points listed in `indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair: usize,
    pub indices: Vec<usize>,
    #[serde(flatten)]
    pub output: ModelOutput,
}

/// Runs the model over every pair of `rec`, threading the hidden state and
/// resetting it every `clip_len` pairs. Both frames are reduced to their
/// in-view points first.
pub fn infer_recording(
    store: &ParamStore,
    rec: &Recording,
    z_range: [f64; 2],
) -> Result<Vec<PairPrediction>> {
    let mut session = InferenceSession::new(store);
    let views: Vec<Vec<usize>> = rec
        .frames
        .iter()
        .map(|f| fov_indices(f, &rec.calib, z_range))
        .collect();
    (0..rec.pairs())
        .map(|k| {
            let (si, ti) = (&views[k], &views[k + 1]);
            if si.is_empty() || ti.is_empty() {
                return Err(Error::EmptyFrame);
            }
            let src = rec.frames[k].subset(si);
            let tgt = rec.frames[k + 1].subset(ti);
            let output = session.step(&src, &tgt)?;
            Ok(PairPrediction {
                pair: k,
                indices: si.clone(),
                output,
            })
        })
        .collect()
}

/// Predictions that reproduce the ground truth exactly, on all source points.
pub fn predictions_from_truth(rec: &Recording, truth: &GroundTruth) -> Result<Vec<PairPrediction>> {
    truth.validate(&rec.frames)?;
    Ok((0..truth.pairs())
        .map(|k| {
            let n = rec.frames[k].len();
            PairPrediction {
                pair: k,
                indices: (0..n).collect(),
                output: ModelOutput {
                    init_flow: truth.flow[k].clone(),
                    moving_prob: truth.moving[k]
                        .iter()
                        .map(|&m| if m { 1.0 } else { 0.0 })
                        .collect(),
                    ego: truth.ego[k],
                    moving_mask: truth.moving[k].clone(),
                    final_flow: truth.flow[k].clone(),
                    hidden: None,
                },
            }
        })
        .collect())
}

/// Per-pair ego-motion estimates, in pair order.
pub fn ego_estimates(preds: &[PairPrediction]) -> Vec<RigidTransform> {
    preds.iter().map(|p| p.output.ego).collect()
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub fn write_predictions(path: &Path, preds: &[PairPrediction]) -> Result<()> {
    write_jsonl(path, preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PairPrediction>> {
    let preds: Vec<PairPrediction> = read_jsonl(path)?;
    for (k, p) in preds.iter().enumerate() {
        if p.pair != k {
            return Err(Error::Format(format!(
                "prediction line {k} is for pair {}",
                p.pair
            )));
        }
        let n = p.indices.len();
        let o = &p.output;
        if [
            o.init_flow.len(),
            o.moving_prob.len(),
            o.moving_mask.len(),
            o.final_flow.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Format(format!(
                "prediction for pair {k} has inconsistent lengths"
            )));
        }
    }
    Ok(preds)
}
