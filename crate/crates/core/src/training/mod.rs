//! End-to-end optimisation: Adam with per-epoch exponential decay over
//! shuffled batches of mini-clips, with the temporal state threaded through
//! each clip.

mod adam;
mod data;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport, Modalities};
use crate::metrics::{evaluate_predictions, summarize, FlowField};
use crate::network::{
    forward_on_tape, infer_recording, BoundModel, Checkpoint, EgoWeights, ModelConfig, ParamStore,
    ResumeInfo, TrainState,
};
use crate::parallel::par_map;
use crate::seed::{derive_rng, derive_seed};
use crate::simworld::{Dataset, DEFAULT_Z_RANGE};
use crate::supervision::LabelConfig;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use data::{EpochPair, TrainPair, TrainSequence};

pub const TRAIN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub lr: f64,
    /// Per-epoch learning-rate multiplier.
    pub decay: f64,
    pub epochs: usize,
    /// Clips per optimiser step.
    pub batch_size: usize,
    pub seed: u64,
    /// Points sampled from each frame per epoch.
    pub num_points: usize,
    pub z_range: [f64; 2],
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub model: ModelConfig,
    pub labels: LabelConfig,
    pub loss: LossConfig,
    pub modalities: Modalities,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: TRAIN_CONFIG_VERSION,
            lr: 1e-3,
            decay: 0.9,
            epochs: 20,
            batch_size: 1,
            seed: 0,
            num_points: 256,
            z_range: DEFAULT_Z_RANGE,
            grad_clip: 10.0,
            model: ModelConfig::with_scale(0.125),
            labels: LabelConfig::default(),
            loss: LossConfig::default(),
            modalities: Modalities::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.version != TRAIN_CONFIG_VERSION {
            return bad("unsupported train config version");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must be in (0, 1]");
        }
        if self.batch_size == 0 || self.num_points == 0 {
            return bad("batch_size and num_points must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if !(self.z_range[0] < self.z_range[1]) {
            return bad("z_range must be increasing");
        }
        self.model.validate()?;
        self.labels.validate()?;
        self.loss.validate()
    }

    pub fn clip_len(&self) -> usize {
        self.model.clip_len
    }

    /// Learning rate during epoch `k` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// Consecutive windows of `clip_len` pairs; the remainder forms a shorter last clip.
pub fn split_clips(pairs: usize, clip_len: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if clip_len == 0 {
        return Err(Error::InvalidConfig(
            "clip length must be at least 1".into(),
        ));
    }
    Ok((0..pairs)
        .step_by(clip_len)
        .map(|s| s..(s + clip_len).min(pairs))
        .collect())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub pairs: usize,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.bin")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub steps: usize,
    /// Mean loss report over all pairs of each epoch.
    pub epoch_means: Vec<LossReport>,
    /// Validation EPE after each epoch, when a validation set was given.
    pub val_epe: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Result of running a batch of clips through the model.
struct ClipResult {
    grads: Vec<Array>,
    reports: Vec<LossReport>,
}

fn clip_gradients(store: &ParamStore, cfg: &TrainConfig, clip: &[EpochPair]) -> Result<ClipResult> {
    let mut tape = Tape::new();
    let m = BoundModel::bind(&mut tape, store, true)?;
    let mut hidden = None;
    let mut total = None;
    let mut reports = Vec::with_capacity(clip.len());
    for p in clip {
        let weights = match &p.targets.moving {
            Some(s) => EgoWeights::Label(s),
            None => EgoWeights::Predicted,
        };
        let fwd = forward_on_tape(&mut tape, &m, &p.source, &p.target, hidden, weights)?;
        hidden = fwd.hidden;
        let l = total_loss(
            &mut tape,
            &fwd,
            &p.source,
            &p.target.coords,
            p.dt,
            &p.calib,
            &p.targets,
            &cfg.loss,
        )?;
        reports.push(l.report(&tape));
        total = Some(match total {
            None => l.total,
            Some(t) => tape.add(t, l.total)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invariant("empty clip".into()))?;
    let mut g = tape.backward(total)?;
    Ok(ClipResult {
        grads: m.vars.iter().map(|&v| g.take(v)).collect(),
        reports,
    })
}

fn global_norm(grads: &[Array]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// A training run in progress: parameters plus optimiser state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub adam: Adam,
    pub epochs_done: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::init(&cfg.model, derive_seed(cfg.seed, "model"))?;
        let adam = Adam::new(store.arrays());
        Ok(Self {
            cfg,
            store,
            adam,
            epochs_done: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.params.config != cfg.model {
            return Err(Error::InvalidConfig(
                "checkpoint model config differs from the train config".into(),
            ));
        }
        let ts = ck.train_state.ok_or_else(|| {
            Error::InvalidConfig("checkpoint carries no optimiser state to resume from".into())
        })?;
        let adam = Adam::from_state(ts.info.adam_t, ts.m, ts.v, ck.params.arrays())?;
        Ok(Self {
            cfg,
            store: ck.params,
            adam,
            epochs_done: ts.info.epochs_done,
            step: ts.info.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.store.clone(),
            train_state: Some(TrainState {
                info: ResumeInfo {
                    epochs_done: self.epochs_done,
                    step: self.step,
                    adam_t: self.adam.t,
                },
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
        }
    }

    /// One epoch over `data`; returns the per-step log lines.
    pub fn run_epoch(&mut self, data: &[TrainSequence]) -> Result<Vec<StepLog>> {
        let epoch = self.epochs_done;
        let cfg = &self.cfg;
        let lr = cfg.lr_at(epoch);
        let mut clips = Vec::new();
        for (si, seq) in data.iter().enumerate() {
            for r in split_clips(seq.pairs.len(), cfg.clip_len())? {
                clips.push((si, r));
            }
        }
        if clips.is_empty() {
            return Err(Error::InvalidConfig("no training pairs".into()));
        }
        clips.shuffle(&mut derive_rng(cfg.seed, &format!("shuffle/{epoch}")));
        let mut logs = Vec::new();
        for batch in clips.chunks(cfg.batch_size) {
            let prepared: Vec<Vec<EpochPair>> = batch
                .iter()
                .map(|(si, r)| {
                    r.clone()
                        .map(|k| {
                            data[*si].epoch_pair(k, cfg, &format!("epoch{epoch}/seq{si}/pair{k}"))
                        })
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            let store = &self.store;
            let results = par_map(&prepared, |_, clip| clip_gradients(store, cfg, clip));
            let mut sum: Option<Vec<Array>> = None;
            let mut report = LossReport::default();
            let mut pairs = 0;
            for r in results {
                let r = r?;
                for rep in &r.reports {
                    report.accumulate(rep);
                }
                pairs += r.reports.len();
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let report = report.scaled(1.0 / pairs as f64);
            if !report.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: self.step,
                    detail: format!("{report:?}"),
                });
            }
            let mut grads = sum.expect("a batch holds at least one clip");
            let inv = 1.0 / pairs as f64;
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: self.step,
                    detail: "non-finite gradient".into(),
                });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for g in grads.iter_mut() {
                    for x in g.data_mut() {
                        *x *= s;
                    }
                }
            }
            self.adam.step(self.store.arrays_mut(), &grads, lr)?;
            logs.push(StepLog {
                epoch,
                step: self.step,
                lr,
                pairs,
                grad_norm: norm,
                loss: report,
            });
            self.step += 1;
        }
        self.epochs_done += 1;
        Ok(logs)
    }
}

/// Mean EPE of the current model over validation sequences with ground truth.
pub fn validation_epe(store: &ParamStore, val: &[Dataset], z_range: [f64; 2]) -> Result<f64> {
    let mut rows = Vec::new();
    for d in val {
        let truth = d.truth.as_ref().ok_or_else(|| {
            Error::InvalidConfig("validation sequence has no ground truth".into())
        })?;
        let preds = infer_recording(store, &d.recording, z_range)?;
        rows.extend(evaluate_predictions(
            &preds,
            &d.recording,
            truth,
            FlowField::Final,
            1.0,
        )?);
    }
    summarize(&rows)
        .map(|s| s.epe)
        .ok_or_else(|| Error::InvalidConfig("validation set has no pairs".into()))
}

fn epoch_mean(logs: &[StepLog]) -> LossReport {
    let mut acc = LossReport::default();
    let mut n = 0;
    for l in logs {
        acc.accumulate(&l.loss.scaled(l.pairs as f64));
        n += l.pairs;
    }
    acc.scaled(1.0 / n.max(1) as f64)
}

/// Trains until `cfg.epochs`, writing the log and a resumable checkpoint after
/// every epoch, plus `best.bin` when a validation set is given.
pub fn train(
    mut trainer: Trainer,
    data: &[TrainSequence],
    val: &[Dataset],
    out: &TrainOutputs,
) -> Result<(Trainer, TrainSummary)> {
    std::fs::create_dir_all(&out.dir)?;
    let mut log_lines: Vec<StepLog> = if trainer.step > 0 && out.log().exists() {
        crate::fsutil::read_jsonl(&out.log())?
    } else {
        Vec::new()
    };
    log_lines.truncate(trainer.step);
    let mut summary = TrainSummary {
        epochs_done: trainer.epochs_done,
        steps: trainer.step,
        epoch_means: Vec::new(),
        val_epe: Vec::new(),
        best_epoch: None,
    };
    let mut best = f64::INFINITY;
    while trainer.epochs_done < trainer.cfg.epochs {
        let logs = trainer.run_epoch(data)?;
        let mean = epoch_mean(&logs);
        log::info!(
            "epoch {} lr {:.3e} loss {:.4} (ego {:.4} seg {:.4} mot {:.4} opt {:.4} self {:.4})",
            trainer.epochs_done,
            logs[0].lr,
            mean.total,
            mean.ego,
            mean.seg,
            mean.mot,
            mean.opt,
            mean.self_
        );
        summary.epoch_means.push(mean);
        log_lines.extend(logs);
        crate::fsutil::write_jsonl(&out.log(), &log_lines)?;
        trainer.checkpoint().save(&out.checkpoint())?;
        if !val.is_empty() {
            let epe = validation_epe(&trainer.store, val, trainer.cfg.z_range)?;
            log::info!("epoch {} validation EPE {epe:.4}", trainer.epochs_done);
            summary.val_epe.push(epe);
            if epe < best {
                best = epe;
                summary.best_epoch = Some(trainer.epochs_done);
                Checkpoint {
                    params: trainer.store.clone(),
                    train_state: None,
                }
                .save(&out.best())?;
            }
        }
    }
    summary.epochs_done = trainer.epochs_done;
    summary.steps = trainer.step;
    Ok((trainer, summary))
}
