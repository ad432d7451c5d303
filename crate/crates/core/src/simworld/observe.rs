use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::generate::Sequence;
use super::types::{FlowMap, Recording, TrackedBox};
use crate::error::{Error, Result};
use crate::seed::derive_rng;

/// Outlier magnitude range for corrupted flow pixels.
const OUTLIER_PX: (f64, f64) = (15.0, 40.0);

/// Tracker view of the ground-truth boxes: independent dropout per box and
/// Gaussian centre jitter. Ids of surviving boxes are unchanged.
pub fn mot_observe(
    seq: &Sequence,
    p_dropout: f64,
    center_noise: f64,
    seed: u64,
) -> Result<Vec<Vec<TrackedBox>>> {
    observe_boxes(&seq.boxes, p_dropout, center_noise, seed)
}

pub fn observe_boxes(
    boxes: &[Vec<TrackedBox>],
    p_dropout: f64,
    center_noise: f64,
    seed: u64,
) -> Result<Vec<Vec<TrackedBox>>> {
    if !(0.0..1.0).contains(&p_dropout) {
        return Err(Error::InvalidConfig(
            "box dropout must lie in [0, 1)".into(),
        ));
    }
    let jitter = Normal::new(0.0, center_noise)
        .map_err(|_| Error::InvalidConfig("box centre noise must be non-negative".into()))?;
    let mut rng = derive_rng(seed, "mot_observe");
    Ok(boxes
        .iter()
        .map(|frame| {
            frame
                .iter()
                .filter_map(|b| {
                    let keep = rng.random::<f64>() >= p_dropout;
                    let mut out = b.clone();
                    for c in out.center.iter_mut() {
                        *c += jitter.sample(&mut rng);
                    }
                    keep.then_some(out)
                })
                .collect()
        })
        .collect())
}

/// Optical-flow network stand-in: ground-truth flow plus Gaussian pixel noise,
/// with `corrupt_frac` of the pixels replaced by large outliers.
pub fn camera_observe(
    seq: &Sequence,
    flow_noise: f64,
    corrupt_frac: f64,
    seed: u64,
) -> Result<Vec<FlowMap>> {
    observe_flow(&seq.optflow, flow_noise, corrupt_frac, seed)
}

pub fn observe_flow(
    maps: &[FlowMap],
    flow_noise: f64,
    corrupt_frac: f64,
    seed: u64,
) -> Result<Vec<FlowMap>> {
    if !(0.0..=1.0).contains(&corrupt_frac) {
        return Err(Error::InvalidConfig(
            "flow corruption fraction must lie in [0, 1]".into(),
        ));
    }
    let noise = Normal::new(0.0, flow_noise)
        .map_err(|_| Error::InvalidConfig("flow noise must be non-negative".into()))?;
    Ok(maps
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut rng = derive_rng(seed, &format!("camera_observe/{k}"));
            let mut out = m.clone();
            for px in out.data.chunks_exact_mut(2) {
                if corrupt_frac > 0.0 && rng.random::<f64>() < corrupt_frac {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let mag = rng.random_range(OUTLIER_PX.0..OUTLIER_PX.1);
                    px[0] = (mag * angle.cos()) as f32;
                    px[1] = (mag * angle.sin()) as f32;
                } else if flow_noise > 0.0 {
                    px[0] += noise.sample(&mut rng) as f32;
                    px[1] += noise.sample(&mut rng) as f32;
                }
            }
            out
        })
        .collect())
}

impl Sequence {
    /// Applies the configured tracker and camera noise.
    pub fn observe(&self, seed: u64) -> Result<Recording> {
        let n = &self.config.noise;
        Ok(Recording {
            boxes: mot_observe(self, n.box_dropout, n.box_center_noise, seed)?,
            optflow: camera_observe(self, n.flow_noise, n.flow_corrupt_frac, seed)?,
            ..self.clean_recording()
        })
    }
}
