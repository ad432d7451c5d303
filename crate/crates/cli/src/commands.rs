use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use cmflow::fsutil::{read_json, write_atomic, write_json};
use cmflow::geometry::{icp_ego, RigidTransform};
use cmflow::losses::{loss_gradchecks, GRADCHECK_STEPS};
use cmflow::metrics::{
    accumulate_odometry, evaluate_predictions, seg_miou, summarize, trajectory_ate, trajectory_csv,
    write_metrics_csv, FlowField,
};
use cmflow::network::{
    ego_estimates, infer_recording, predictions_from_truth, read_predictions, write_predictions,
    Checkpoint, ModelConfig, PairPrediction, PREDICTIONS_FILE,
};
use cmflow::parallel::par_range;
use cmflow::seed::derive_seed;
use cmflow::simworld::{
    fov_indices, generate_sequence, read_dataset, write_dataset, Dataset, GroundTruth, SimConfig,
    DEFAULT_Z_RANGE,
};
use cmflow::supervision::{
    label_recording, read_labels, rrv_motion_label, write_labels, LabelConfig, RrvMode,
};
use cmflow::training::{train as run_training, TrainConfig, TrainOutputs, TrainSequence, Trainer};

use crate::error::{CliError, CliResult};
use crate::manifest::{hash_inputs, manifest_path, now_ms, RunManifest, MANIFEST_VERSION};
use crate::{Baseline, Field};

pub const LABELS_FILE: &str = "labels.jsonl";
pub const LABEL_QUALITY_FILE: &str = "label_quality.csv";

const ICP_MAX_ITER: usize = 50;
const ICP_TOL: f64 = 1e-6;

pub struct Context {
    started: u64,
    args: Vec<String>,
}

impl Context {
    pub fn new() -> Self {
        Self {
            started: now_ms(),
            args: std::env::args().skip(1).collect(),
        }
    }

    fn finish(
        &self,
        dir: &Path,
        command: &str,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: &[&Path],
    ) -> CliResult<()> {
        let m = RunManifest {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            args: self.args.clone(),
            config: serde_json::to_value(config).map_err(cmflow::Error::from)?,
            seed,
            inputs_sha256: hash_inputs(inputs)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        write_json(&manifest_path(dir, command), &m)?;
        Ok(())
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => read_json(p).map_err(|e| {
            CliError::Core(cmflow::Error::InvalidConfig(format!(
                "{}: {e}",
                p.display()
            )))
        }),
        None => Ok(T::default()),
    }
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    read_dataset(dir).map_err(|e| match e {
        cmflow::Error::Io(io) => {
            CliError::Usage(format!("cannot read sequence {}: {io}", dir.display()))
        }
        other => other.into(),
    })
}

fn require_truth<'a>(data: &'a Dataset, dir: &Path) -> CliResult<&'a GroundTruth> {
    data.truth
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("sequence {} has no ground truth", dir.display())))
}

/// Output directory of a file-valued `--out`.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn predictions_path(pred: &Path) -> PathBuf {
    if pred.is_dir() {
        pred.join(PREDICTIONS_FILE)
    } else {
        pred.to_path_buf()
    }
}

fn load_predictions(pred: &Path) -> CliResult<Vec<PairPrediction>> {
    let path = predictions_path(pred);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "no predictions at {}",
            path.display()
        )));
    }
    Ok(read_predictions(&path)?)
}

pub fn simulate(ctx: &Context, config: Option<&Path>, seed: u64, out: &Path) -> CliResult<()> {
    let cfg: SimConfig = load_config(config)?;
    cfg.validate()?;
    let data = generate_sequence(&cfg, seed)?.to_dataset(derive_seed(seed, "observe"))?;
    write_dataset(out, &data)?;
    let points: usize = data.recording.frames.iter().map(|f| f.len()).sum();
    println!(
        "simulated {} frames ({} radar points) into {}",
        data.recording.frames.len(),
        points,
        out.display()
    );
    let inputs: Vec<&Path> = config.into_iter().collect();
    ctx.finish(out, "simulate", &cfg, Some(seed), &inputs)
}

#[derive(Debug, Clone, Copy, Default)]
struct QualityRow {
    bias_aware: f64,
    direct: f64,
    fused: f64,
}

pub fn labels(
    ctx: &Context,
    seq: &Path,
    out: &Path,
    config: Option<&Path>,
    eta_v: Option<f64>,
    eta_l: Option<f64>,
    direct: bool,
) -> CliResult<()> {
    let mut cfg: LabelConfig = load_config(config)?;
    if let Some(v) = eta_v {
        cfg.eta_v = v;
    }
    if let Some(v) = eta_l {
        cfg.eta_l = v;
    }
    if direct {
        cfg.rrv_mode = RrvMode::Direct;
    }
    cfg.validate()?;
    let data = load_dataset(seq)?;
    let rec = &data.recording;
    let bundles = label_recording(rec, &cfg)?;
    write_labels(&out.join(LABELS_FILE), &bundles)?;
    info!("wrote {} label bundles", bundles.len());

    match &data.truth {
        Some(gt) => {
            let rows = par_range(bundles.len(), |k| -> CliResult<QualityRow> {
                let b = &bundles[k];
                let sv = |mode| {
                    rrv_motion_label(
                        &rec.frames[k],
                        &b.pseudo_t,
                        rec.dt,
                        cfg.eta_v,
                        mode,
                        cfg.rrv_center,
                    )
                    .map(|l| l.s_v)
                };
                Ok(QualityRow {
                    bias_aware: seg_miou(&sv(RrvMode::BiasAware)?, &gt.moving[k])?.miou,
                    direct: seg_miou(&sv(RrvMode::Direct)?, &gt.moving[k])?.miou,
                    fused: seg_miou(&b.s_fused, &gt.moving[k])?.miou,
                })
            })
            .into_iter()
            .collect::<CliResult<Vec<_>>>()?;
            let mean = mean_quality(&rows);
            write_atomic(&out.join(LABEL_QUALITY_FILE), &quality_csv(&rows, &mean)?)?;
            println!("label quality (mIoU vs ground truth, {} pairs)", rows.len());
            println!("  rrv bias-aware  {:.4}", mean.bias_aware);
            println!("  rrv direct      {:.4}", mean.direct);
            println!("  fused           {:.4}", mean.fused);
            let wins = rows.iter().filter(|r| r.bias_aware >= r.direct).count();
            println!("  bias-aware >= direct on {wins}/{} pairs", rows.len());
        }
        None => info!("sequence has no ground truth; skipping the quality report"),
    }
    let mut inputs: Vec<&Path> = vec![seq];
    inputs.extend(config);
    ctx.finish(out, "labels", &cfg, None, &inputs)
}

fn mean_quality(rows: &[QualityRow]) -> QualityRow {
    let n = rows.len().max(1) as f64;
    rows.iter()
        .fold(QualityRow::default(), |acc, r| QualityRow {
            bias_aware: acc.bias_aware + r.bias_aware / n,
            direct: acc.direct + r.direct / n,
            fused: acc.fused + r.fused / n,
        })
}

fn quality_csv(rows: &[QualityRow], mean: &QualityRow) -> CliResult<Vec<u8>> {
    let fmt = |e: csv::Error| CliError::Core(cmflow::Error::Format(e.to_string()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pair", "sv_bias_aware", "sv_direct", "fused"])
        .map_err(fmt)?;
    let record = |label: String, r: &QualityRow| {
        [
            label,
            r.bias_aware.to_string(),
            r.direct.to_string(),
            r.fused.to_string(),
        ]
    };
    for (k, r) in rows.iter().enumerate() {
        w.write_record(record(k.to_string(), r)).map_err(fmt)?;
    }
    w.write_record(record("MEAN".into(), mean)).map_err(fmt)?;
    w.into_inner()
        .map_err(|e| CliError::Core(cmflow::Error::Format(e.to_string())))
}

pub fn train(
    ctx: &Context,
    data: &[PathBuf],
    config: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    val: &[PathBuf],
) -> CliResult<()> {
    let cfg: TrainConfig = load_config(config)?;
    cfg.validate()?;
    let mut seqs = Vec::with_capacity(data.len());
    for dir in data {
        let ds = load_dataset(dir)?;
        let labels_path = dir.join(LABELS_FILE);
        let bundles = if labels_path.is_file() {
            read_labels(&labels_path)?
        } else {
            info!(
                "{} has no {LABELS_FILE}; labelling with the train config",
                dir.display()
            );
            label_recording(&ds.recording, &cfg.labels)?
        };
        seqs.push(TrainSequence::new(&ds.recording, &bundles, cfg.modalities)?);
    }
    let mut val_sets = Vec::with_capacity(val.len());
    for dir in val {
        let ds = load_dataset(dir)?;
        require_truth(&ds, dir)?;
        val_sets.push(ds);
    }
    let trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let outputs = TrainOutputs::new(out);
    let (_, summary) = run_training(trainer, &seqs, &val_sets, &outputs)?;
    write_json(&out.join("train_summary.json"), &summary)?;
    if let Some(last) = summary.epoch_means.last() {
        println!(
            "trained {} epochs ({} steps); final epoch loss {:.4}",
            summary.epochs_done, summary.steps, last.total
        );
    }
    if let (Some(best), Some(epe)) = (
        summary.best_epoch,
        summary.val_epe.iter().cloned().reduce(f64::min),
    ) {
        println!("best validation EPE {epe:.4} after epoch {best}");
    }
    let mut inputs: Vec<&Path> = data.iter().map(PathBuf::as_path).collect();
    inputs.extend(config);
    inputs.extend(resume);
    inputs.extend(val.iter().map(PathBuf::as_path));
    ctx.finish(out, "train", &cfg, Some(cfg.seed), &inputs)
}

pub fn infer(
    ctx: &Context,
    ckpt: Option<&Path>,
    seq: &Path,
    out: &Path,
    from_truth: bool,
) -> CliResult<()> {
    let data = load_dataset(seq)?;
    let (preds, model) = if from_truth {
        (
            predictions_from_truth(&data.recording, require_truth(&data, seq)?)?,
            None,
        )
    } else {
        let path = ckpt.ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
        let ck = Checkpoint::load(path)?;
        (
            infer_recording(&ck.params, &data.recording, DEFAULT_Z_RANGE)?,
            Some(ck.params.config.clone()),
        )
    };
    write_predictions(&out.join(PREDICTIONS_FILE), &preds)?;
    println!(
        "wrote predictions for {} pairs to {}",
        preds.len(),
        out.display()
    );
    let mut inputs: Vec<&Path> = vec![seq];
    inputs.extend(ckpt);
    #[derive(Serialize)]
    struct InferConfig {
        from_truth: bool,
        z_range: [f64; 2],
        model: Option<ModelConfig>,
    }
    let echo = InferConfig {
        from_truth,
        z_range: DEFAULT_Z_RANGE,
        model,
    };
    ctx.finish(out, "infer", &echo, None, &inputs)
}

pub fn eval(
    ctx: &Context,
    pred: &Path,
    seq: &Path,
    ratio: f64,
    field: Field,
    out: &Path,
) -> CliResult<()> {
    let preds = load_predictions(pred)?;
    let data = load_dataset(seq)?;
    let truth = require_truth(&data, seq)?;
    let flow_field = match field {
        Field::Initial => FlowField::Initial,
        Field::Final => FlowField::Final,
    };
    let rows = evaluate_predictions(&preds, &data.recording, truth, flow_field, ratio)?;
    write_metrics_csv(out, &rows)?;
    if let Some(m) = summarize(&rows) {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "EPE {:.4}  AccS {:.4}  AccR {:.4}  RNE {:.4}  MRNE {}  SRNE {}  mIoU {:.4}  RTE {:.4}  RAE {:.4}",
            m.epe,
            m.acc_s,
            m.acc_r,
            m.rne,
            opt(m.mrne),
            opt(m.srne),
            m.miou,
            m.rte,
            m.rae
        );
    }
    let echo = serde_json::json!({
        "resolution_ratio": ratio,
        "field": format!("{field:?}").to_lowercase(),
    });
    let pred_file = predictions_path(pred);
    ctx.finish(
        &parent_dir(out),
        "eval",
        &echo,
        None,
        &[pred_file.as_path(), seq],
    )
}

/// Per-pair ICP estimates on the in-view points.
fn icp_transforms(data: &Dataset) -> CliResult<Vec<RigidTransform>> {
    let rec = &data.recording;
    par_range(rec.pairs(), |k| {
        let pick = |f: usize| {
            let frame = &rec.frames[f];
            fov_indices(frame, &rec.calib, DEFAULT_Z_RANGE)
                .into_iter()
                .map(|i| frame.coords[i])
                .collect::<Vec<_>>()
        };
        icp_ego(&pick(k), &pick(k + 1), ICP_MAX_ITER, ICP_TOL)
    })
    .into_iter()
    .map(|r| r.map_err(CliError::from))
    .collect()
}

pub fn odometry(
    ctx: &Context,
    pred: &Path,
    seq: &Path,
    baseline: Option<Baseline>,
    out: &Path,
) -> CliResult<()> {
    let preds = load_predictions(pred)?;
    let data = load_dataset(seq)?;
    if preds.len() != data.recording.pairs() {
        return Err(cmflow::Error::Invariant(format!(
            "{} predictions for {} pairs",
            preds.len(),
            data.recording.pairs()
        ))
        .into());
    }
    let mut names = vec!["estimate"];
    let mut trajectories = vec![accumulate_odometry(&ego_estimates(&preds))];
    if let Some(Baseline::Icp) = baseline {
        names.push("icp");
        trajectories.push(accumulate_odometry(&icp_transforms(&data)?));
    }
    if let Some(gt) = &data.truth {
        let gt_traj = accumulate_odometry(&gt.ego);
        for (name, t) in names.iter().zip(&trajectories) {
            let ate = trajectory_ate(t, &gt_traj)?;
            println!(
                "{name}: final-pose ATE {:.4} m",
                ate.last().copied().unwrap_or(0.0)
            );
        }
        names.push("gt");
        trajectories.push(gt_traj);
    }
    write_atomic(out, &trajectory_csv(&names, &trajectories)?)?;
    let echo = serde_json::json!({
        "baseline": baseline.map(|_| "icp"),
        "icp_max_iter": ICP_MAX_ITER,
        "icp_tol": ICP_TOL,
    });
    let pred_file = predictions_path(pred);
    ctx.finish(
        &parent_dir(out),
        "odometry",
        &echo,
        None,
        &[pred_file.as_path(), seq],
    )
}

pub fn gradcheck(
    ctx: &Context,
    scale: f64,
    points: usize,
    seed: u64,
    per_param: usize,
    tolerance: f64,
    out: Option<&Path>,
) -> CliResult<()> {
    let model = ModelConfig::with_scale(scale);
    model.validate()?;
    let results = loss_gradchecks(&model, points, seed, &GRADCHECK_STEPS, per_param)?;
    println!(
        "{:<6} {:>14} {:>14} {:>8}",
        "loss", "value", "max_rel_err", "coords"
    );
    let mut worst = 0.0f64;
    for r in &results {
        println!(
            "{:<6} {:>14.6e} {:>14.3e} {:>8}",
            r.name, r.value, r.report.max_rel_error, r.report.coords_checked
        );
        worst = worst.max(r.report.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    if let Some(dir) = out {
        #[derive(Serialize)]
        struct Entry {
            loss: &'static str,
            value: f64,
            max_rel_error: f64,
            coords_checked: usize,
        }
        let entries: Vec<Entry> = results
            .iter()
            .map(|r| Entry {
                loss: r.name,
                value: r.value,
                max_rel_error: r.report.max_rel_error,
                coords_checked: r.report.coords_checked,
            })
            .collect();
        write_json(&dir.join("gradcheck.json"), &entries)?;
        let echo = serde_json::json!({
            "scale": scale,
            "points": points,
            "per_param": per_param,
            "tolerance": tolerance,
            "steps": GRADCHECK_STEPS,
        });
        ctx.finish(dir, "gradcheck", &echo, Some(seed), &[])?;
    }
    if !(worst < tolerance) {
        return Err(CliError::CheckFailed(format!(
            "max relative gradient error {worst:.3e} exceeds {tolerance:.1e}"
        )));
    }
    Ok(())
}
