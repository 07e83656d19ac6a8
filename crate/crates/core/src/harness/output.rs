//! Files written by the CLI verbs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, PcanError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::train::{evaluate, heuristic_baseline, EpochRecord, TrainOutcome};
use crate::metrics::EvalReport;
use crate::model::{Inference, InferenceModel};
use crate::pam::{build_groups_from, ContrastiveGroupSet};
use crate::render::{mask_overlay, RgbImage, GREEN, ORANGE, RED};
use crate::rng::{stream, sub_seed};
use crate::synthdata::{PriorLabel, SceneRecord};

pub const OVERLAY_SCALE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub heuristic: EvalReport,
    pub history: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub final_report: EvalReport,
    pub aborted: Option<String>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_overlays(dir: &Path, scenes: &[SceneRecord], preds: &[Inference], limit: usize) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (s, p) in scenes.iter().zip(preds).take(limit) {
        let path = dir.join("overlays").join(format!("{:06}.png", s.id));
        mask_overlay(s.image(), &p.mask, s.target_mask(), OVERLAY_SCALE).save_png(&path)?;
        out.push(path);
    }
    Ok(out)
}

pub fn training_report(cfg: &RunConfig, outcome: &TrainOutcome, heuristic: &EvalReport) -> String {
    let mut s = format!("run {} (seed {}, {} epochs)\n\n", &cfg.hash()[..12], cfg.seed, cfg.epochs);
    s.push_str("epoch  lr         train_loss  val_oIoU  val_mIoU  seconds\n");
    for r in &outcome.history {
        let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        s.push_str(&format!("{:>5}  {:<9.2e}  {:>10}  {:>8.4}  {:>8.4}  {:>7.1}\n", r.epoch, r.lr, loss, r.val.oiou, r.val.miou, r.seconds));
    }
    s.push_str("\nvalidation\n");
    s.push_str(&outcome.final_eval().to_table());
    s.push_str("\nlargest-object heuristic\n");
    s.push_str(&heuristic.to_table());
    if let Some(a) = &outcome.aborted {
        s.push_str(&format!("\nABORTED: {a}\n"));
    }
    s
}

/// checkpoint.json, metrics.json, loss.csv, report.txt and overlays for a
/// finished training run.
pub fn write_training_outputs(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome, val: &[SceneRecord]) -> Result<()> {
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    let heuristic = heuristic_baseline(val)?;
    let model = InferenceModel::new(outcome.model.clone());
    let (_, preds) = evaluate(&model, val)?;
    write_overlays(dir, val, &preds, 8)?;
    let metrics = MetricsFile {
        config_hash: cfg.hash(),
        heuristic: heuristic.clone(),
        history: outcome.history.clone(),
        final_report: outcome.final_eval().clone(),
        aborted: outcome.aborted.clone(),
    };
    write(&dir.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
    write(&dir.join("loss.csv"), outcome.loss_csv())?;
    write(&dir.join("report.txt"), training_report(cfg, outcome, &heuristic))?;
    write(&dir.join("config.toml"), cfg.to_toml())
}

pub fn write_eval_outputs(dir: &Path, ckpt: &Checkpoint, scenes: &[SceneRecord]) -> Result<EvalReport> {
    let model = ckpt.inference_model()?;
    let (report, preds) = evaluate(&model, scenes)?;
    let heuristic = heuristic_baseline(scenes)?;
    write_overlays(dir, scenes, &preds, 8)?;
    #[derive(Serialize)]
    struct EvalFile<'a> {
        config_hash: &'a str,
        epoch: usize,
        report: &'a EvalReport,
        heuristic: &'a EvalReport,
    }
    let file = EvalFile { config_hash: &ckpt.config_hash, epoch: ckpt.epoch, report: &report, heuristic: &heuristic };
    write(&dir.join("metrics.json"), serde_json::to_vec_pretty(&file)?)?;
    let text = format!("checkpoint epoch {}\n\n{}\nlargest-object heuristic\n{}", ckpt.epoch, report.to_table(), heuristic.to_table());
    write(&dir.join("report.txt"), text)?;
    Ok(report)
}

pub fn find_scene<'a>(scenes: &'a [SceneRecord], id: usize) -> Result<&'a SceneRecord> {
    scenes.iter().find(|s| s.id == id).ok_or_else(|| PcanError::OutOfRange(format!("no scene with id {id}")))
}

/// Predict one scene and save `overlays/infer_<id>.png`.
pub fn infer_scene(dir: &Path, model: &InferenceModel, scene: &SceneRecord, tokens: Option<&[u32]>) -> Result<(Inference, PathBuf)> {
    let tokens = tokens.unwrap_or(&scene.expression);
    let p = model.predict(scene.image(), tokens)?;
    let path = dir.join("overlays").join(format!("infer_{:06}.png", scene.id));
    mask_overlay(scene.image(), &p.mask, scene.target_mask(), OVERLAY_SCALE).save_png(&path)?;
    Ok((p, path))
}

/// Build the contrastive groups PAM would give for `scene` and draw them:
/// positive green, detector negatives orange, synthetic negatives red.
pub fn inspect_pam(dir: &Path, cfg: &RunConfig, scene: &SceneRecord) -> Result<(ContrastiveGroupSet, PathBuf)> {
    let mut rng = stream(sub_seed(cfg.seed, "pam"), scene.id as u64);
    let groups = build_groups_from(
        cfg.switches.effective_source(),
        &scene.target().bbox,
        &scene.detections,
        (scene.height, scene.width),
        &cfg.pam,
        &mut rng,
    )?;
    let mut img = RgbImage::from_array(scene.image(), OVERLAY_SCALE);
    // only the first group: later ones are perturbed copies
    if let Some(first) = groups.groups.first() {
        for s in first.iter().rev() {
            let color = match s.label {
                PriorLabel::Positive => GREEN,
                PriorLabel::NegativeDetected => ORANGE,
                PriorLabel::NegativeSynthetic => RED,
            };
            img.draw_box(&s.bbox, color);
        }
    }
    let path = dir.join("overlays").join(format!("pam_{:06}.png", scene.id));
    img.save_png(&path)?;
    write(&dir.join(format!("pam_{:06}.json", scene.id)), serde_json::to_vec_pretty(&groups)?)?;
    Ok((groups, path))
}
