//! The training-side view of a sequence. It carries sensor data and pseudo
//! labels only; ground-truth flow and motion never reach the optimiser.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::Calibration;
use crate::losses::{Modalities, PairTargets};
use crate::seed::derive_seed;
use crate::simworld::{fov_indices, sample_indices, RadarFrame, Recording};
use crate::supervision::LabelBundle;

#[derive(Debug, Clone)]
pub struct TrainPair {
    pub source: RadarFrame,
    pub target: RadarFrame,
    pub targets: PairTargets,
}

#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub calib: Calibration,
    pub dt: f64,
    pub pairs: Vec<TrainPair>,
}

/// A pair after per-epoch view filtering and point sampling.
#[derive(Debug, Clone)]
pub struct EpochPair {
    pub source: RadarFrame,
    pub target: RadarFrame,
    pub targets: PairTargets,
    pub calib: Calibration,
    pub dt: f64,
}

impl TrainSequence {
    pub fn new(rec: &Recording, bundles: &[LabelBundle], modalities: Modalities) -> Result<Self> {
        rec.validate()?;
        if bundles.len() != rec.pairs() {
            return Err(Error::Invariant(format!(
                "{} label bundles for {} pairs",
                bundles.len(),
                rec.pairs()
            )));
        }
        let pairs = bundles
            .iter()
            .enumerate()
            .map(|(k, b)| {
                b.validate()?;
                if b.pair != k || b.len() != rec.frames[k].len() {
                    return Err(Error::Invariant(format!(
                        "label bundle {k} does not match its source frame"
                    )));
                }
                Ok(TrainPair {
                    source: rec.frames[k].clone(),
                    target: rec.frames[k + 1].clone(),
                    targets: PairTargets::from_bundle(b, modalities),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            calib: rec.calib,
            dt: rec.dt,
            pairs,
        })
    }

    /// In-view points of both frames, resampled to `cfg.num_points`.
    pub fn epoch_pair(&self, k: usize, cfg: &TrainConfig, label: &str) -> Result<EpochPair> {
        let p = &self.pairs[k];
        let pick = |frame: &RadarFrame, which: &str| -> Result<Vec<usize>> {
            let view = fov_indices(frame, &self.calib, cfg.z_range);
            let s = sample_indices(
                view.len(),
                cfg.num_points,
                derive_seed(cfg.seed, &format!("{label}/{which}")),
            )?;
            Ok(s.into_iter().map(|i| view[i]).collect())
        };
        let si = pick(&p.source, "source")?;
        let ti = pick(&p.target, "target")?;
        Ok(EpochPair {
            source: p.source.subset(&si),
            target: p.target.subset(&ti),
            targets: p.targets.subset(&si),
            calib: self.calib,
            dt: self.dt,
        })
    }
}
