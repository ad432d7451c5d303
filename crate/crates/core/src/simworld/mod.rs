//! Synthetic multi-modal driving sequences with full ground truth.

mod config;
mod generate;
mod io;
mod observe;
mod preprocess;
mod scene;
mod types;

pub use config::{
    CameraConfig, EgoConfig, MoverPoints, NoiseConfig, SimConfig, SIM_CONFIG_VERSION,
};
pub use generate::{generate_sequence, Scene, Sequence};
pub use io::{read_dataset, write_dataset, Dataset, SequenceMeta, DATASET_FORMAT_VERSION};
pub use observe::{camera_observe, mot_observe, observe_boxes, observe_flow};
pub use preprocess::{
    fov_filter, fov_indices, in_fov, sample_indices, sample_points, DEFAULT_Z_RANGE,
};
pub use scene::{Mover, ObjectClass, Parked, SceneBox, Surface, Unicycle};
pub use types::{FlowMap, GroundTruth, Owner, RadarFrame, Recording, TrackedBox, MOVING_THRESHOLD};

#[cfg(test)]
mod tests;
