use super::{pair_metrics, PairMetrics};
use crate::error::{Error, Result};
use crate::network::PairPrediction;
use crate::simworld::{GroundTruth, Recording};

/// Which predicted flow to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowField {
    Initial,
    Final,
}

/// Scores predictions against the ground truth of the points they cover.
pub fn evaluate_predictions(
    preds: &[PairPrediction],
    rec: &Recording,
    truth: &GroundTruth,
    field: FlowField,
    resolution_ratio: f64,
) -> Result<Vec<PairMetrics>> {
    truth.validate(&rec.frames)?;
    if preds.len() != truth.pairs() {
        return Err(Error::Invariant(format!(
            "{} predictions for {} ground-truth pairs",
            preds.len(),
            truth.pairs()
        )));
    }
    preds
        .iter()
        .map(|p| {
            let k = p.pair;
            let n = truth.flow[k].len();
            if let Some(&bad) = p.indices.iter().find(|&&i| i >= n) {
                return Err(Error::Invariant(format!(
                    "prediction for pair {k} refers to point {bad} of {n}"
                )));
            }
            let gt_flow: Vec<_> = p.indices.iter().map(|&i| truth.flow[k][i]).collect();
            let gt_moving: Vec<_> = p.indices.iter().map(|&i| truth.moving[k][i]).collect();
            let flow = match field {
                FlowField::Initial => &p.output.init_flow,
                FlowField::Final => &p.output.final_flow,
            };
            pair_metrics(
                k,
                flow,
                &p.output.moving_mask,
                &p.output.ego,
                &gt_flow,
                &gt_moving,
                &truth.ego[k],
                resolution_ratio,
            )
        })
        .collect()
}
