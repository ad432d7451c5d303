use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::types::{FlowMap, GroundTruth, RadarFrame, Recording, TrackedBox};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::geometry::{Calibration, Point3, RigidTransform};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub version: u32,
    pub seed: u64,
    pub dt: f64,
    pub num_frames: usize,
    pub calib: Calibration,
    pub config: SimConfig,
}

/// A sequence as stored on disk: sensor data plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: SequenceMeta,
    pub recording: Recording,
    pub truth: Option<GroundTruth>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    index: usize,
    timestamp: f64,
    #[serde(with = "crate::serde_util::points")]
    coords: Vec<Point3>,
    rrv: Vec<f64>,
    rcs: Vec<f64>,
    odom_pose: RigidTransform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxLine {
    frame_index: usize,
    boxes: Vec<TrackedBox>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtLine {
    pair: usize,
    gt_ego: RigidTransform,
    #[serde(with = "crate::serde_util::points")]
    gt_flow: Vec<Vector3<f64>>,
    gt_moving: Vec<bool>,
}

fn flow_path(dir: &Path, pair: usize) -> std::path::PathBuf {
    dir.join("optflow").join(format!("{pair:05}.bin"))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let rec = &data.recording;
    rec.validate()?;
    fs::create_dir_all(dir.join("optflow"))?;
    write_json(&dir.join("meta.json"), &data.meta)?;
    write_jsonl(
        &dir.join("frames.jsonl"),
        rec.frames
            .iter()
            .zip(&rec.odom_poses)
            .enumerate()
            .map(|(index, (f, pose))| FrameLine {
                index,
                timestamp: f.timestamp,
                coords: f.coords.clone(),
                rrv: f.rrv.clone(),
                rcs: f.rcs.clone(),
                odom_pose: *pose,
            }),
    )?;
    write_jsonl(
        &dir.join("boxes.jsonl"),
        rec.boxes
            .iter()
            .enumerate()
            .map(|(frame_index, b)| BoxLine {
                frame_index,
                boxes: b.clone(),
            }),
    )?;
    for (k, map) in rec.optflow.iter().enumerate() {
        write_atomic(&flow_path(dir, k), &map.to_le_bytes())?;
    }
    if let Some(gt) = &data.truth {
        write_jsonl(
            &dir.join("gt.jsonl"),
            (0..gt.pairs()).map(|k| GtLine {
                pair: k,
                gt_ego: gt.ego[k],
                gt_flow: gt.flow[k].clone(),
                gt_moving: gt.moving[k].clone(),
            }),
        )?;
    }
    Ok(())
}

fn ordered<T>(items: Vec<T>, index: impl Fn(&T) -> usize, what: &str) -> Result<Vec<T>> {
    for (i, it) in items.iter().enumerate() {
        if index(it) != i {
            return Err(Error::Format(format!(
                "{what} line {i} carries index {}",
                index(it)
            )));
        }
    }
    Ok(items)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Format(format!(
            "{} is not a sequence directory",
            dir.display()
        )));
    }
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    if meta.version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            meta.version
        )));
    }
    meta.calib.validate()?;
    let frames: Vec<FrameLine> = ordered(
        read_jsonl(&dir.join("frames.jsonl"))?,
        |f: &FrameLine| f.index,
        "frames.jsonl",
    )?;
    if frames.len() != meta.num_frames {
        return Err(Error::Format(format!(
            "meta.json declares {} frames, frames.jsonl has {}",
            meta.num_frames,
            frames.len()
        )));
    }
    let boxes: Vec<BoxLine> = ordered(
        read_jsonl(&dir.join("boxes.jsonl"))?,
        |b: &BoxLine| b.frame_index,
        "boxes.jsonl",
    )?;
    let [w, h] = meta.calib.image_size;
    let mut optflow = Vec::with_capacity(frames.len().saturating_sub(1));
    for k in 0..frames.len().saturating_sub(1) {
        let p = flow_path(dir, k);
        optflow.push(FlowMap::from_le_bytes(w, h, &fs::read(&p)?)?);
    }
    let (frames, odom_poses): (Vec<RadarFrame>, Vec<RigidTransform>) = frames
        .into_iter()
        .map(|f| {
            (
                RadarFrame {
                    coords: f.coords,
                    rrv: f.rrv,
                    rcs: f.rcs,
                    timestamp: f.timestamp,
                },
                f.odom_pose,
            )
        })
        .unzip();
    let recording = Recording {
        calib: meta.calib,
        dt: meta.dt,
        frames,
        odom_poses,
        boxes: boxes.into_iter().map(|b| b.boxes).collect(),
        optflow,
    };
    recording.validate()?;
    let gt_path = dir.join("gt.jsonl");
    let truth = if gt_path.exists() {
        let lines: Vec<GtLine> = ordered(read_jsonl(&gt_path)?, |g: &GtLine| g.pair, "gt.jsonl")?;
        let mut gt = GroundTruth::default();
        for l in lines {
            gt.ego.push(l.gt_ego);
            gt.flow.push(l.gt_flow);
            gt.moving.push(l.gt_moving);
        }
        gt.validate(&recording.frames)?;
        Some(gt)
    } else {
        None
    };
    Ok(Dataset {
        meta,
        recording,
        truth,
    })
}

impl super::generate::Sequence {
    /// Noisy on-disk form of this sequence, ground truth included.
    pub fn to_dataset(&self, observe_seed: u64) -> Result<Dataset> {
        Ok(Dataset {
            meta: SequenceMeta {
                version: DATASET_FORMAT_VERSION,
                seed: self.seed,
                dt: self.dt,
                num_frames: self.frames.len(),
                calib: self.calib,
                config: self.config.clone(),
            },
            recording: self.observe(observe_seed)?,
            truth: Some(self.truth.clone()),
        })
    }
}
