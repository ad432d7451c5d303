//! The two-stage scene-flow model: set-conv backbone with cost volume,
//! flow and segmentation heads, weighted-Kabsch ego-motion head, and a
//! refinement step that replaces static-point flow by the ego-induced flow.

mod checkpoint;
mod infer;
pub mod layers;
mod model;
mod params;

pub use checkpoint::{
    Checkpoint, Manifest, ResumeInfo, TensorEntry, TrainState, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use infer::{
    ego_estimates, infer_recording, predictions_from_truth, read_predictions, write_predictions,
    PairPrediction, PREDICTIONS_FILE,
};
pub use model::{
    backbone, ego_head, forward, forward_on_tape, refine, BoundModel, EgoWeights, ForwardVars,
    InferenceSession, ModelOutput,
};
pub use params::{Arch, ModelConfig, ParamStore, INPUT_FEATURES, MODEL_CONFIG_VERSION};
