//! Training loop, validation, and the largest-object heuristic baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{PcanError, Result};
use crate::geometry::xyxy_to_cxcywh;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::losses::{scene_objective, LossBreakdown, ObjectiveFlags, Target};
use crate::metrics::{EvalReport, PairStats};
use crate::model::{Inference, InferenceModel, Pcan};
use crate::nn::{AdamW, GradBuffer};
use crate::pam::build_groups_from;
use crate::rng::{stream, sub_seed, SeededRandomSource};
use crate::synthdata::{generate_dataset, load_split, SceneRecord, Split};

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    if let Some(root) = &cfg.data.root {
        return Ok(Datasets { train: load_split(root, Split::Train)?, val: load_split(root, Split::Val)? });
    }
    let all = generate_dataset(cfg.data.n_scenes, cfg.seed, &cfg.data.scene)?;
    let (train, val) = all.into_iter().partition(|s| s.split == Split::Train);
    Ok(Datasets { train, val })
}

pub fn target_of(scene: &SceneRecord) -> Target {
    Target::new(xyxy_to_cxcywh(scene.target().bbox.corners()), scene.target_mask())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub scene: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based; 0 is the evaluation of an untrained model.
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's scenes.
    pub train_loss: Option<f64>,
    pub mean_breakdown: Option<LossBreakdown>,
    pub val: EvalReport,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Pcan,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Set when training stopped on a non-finite loss; `model` and
    /// `checkpoint` then hold the last finished epoch.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> &EvalReport {
        &self.history.last().expect("at least one evaluation").val
    }

    pub fn loss_csv(&self) -> String {
        let mut s = format!("step,epoch,scene,lr,{}\n", LossBreakdown::CSV_HEADER);
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{:e},{}\n", r.step, r.epoch, r.scene, r.lr, r.loss.csv_row()));
        }
        s
    }
}

/// Objective switches after folding in the run-level ablation switches.
pub fn effective_flags(cfg: &RunConfig) -> ObjectiveFlags {
    ObjectiveFlags { contrastive_loss: cfg.objective.contrastive_loss && cfg.switches.use_contrastive_loss, ..cfg.objective }
}

/// Forward and backward for one scene; gradients are added to `buf` with
/// weight `scale`.
pub fn scene_step(
    model: &Pcan,
    cfg: &RunConfig,
    scene: &SceneRecord,
    rng: &mut SeededRandomSource,
    buf: &mut GradBuffer,
    scale: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let enc = model.encode_scene(&mut g, scene.image(), &scene.expression)?;
    let matching = model.matching_part(&mut g, &enc)?;
    let target = target_of(scene);
    let flags = effective_flags(cfg);
    let obj = if cfg.switches.use_clum {
        let gt = scene.target().bbox;
        let groups =
            build_groups_from(cfg.switches.effective_source(), &gt, &scene.detections, (scene.height, scene.width), &cfg.pam, rng)?;
        let parts = model.contrastive_part(&mut g, &enc, &groups)?;
        let preds: Vec<_> = parts.into_iter().map(|p| p.predictions).collect();
        scene_objective(&mut g, &matching.predictions, Some((&preds, &groups)), &target, &cfg.loss, &flags)?
    } else {
        scene_objective(&mut g, &matching.predictions, None, &target, &cfg.loss, &flags)?
    };
    let grads = g.backward(obj.loss);
    buf.accumulate(&grads, scale);
    Ok(obj.breakdown)
}

pub fn evaluate(model: &InferenceModel, scenes: &[SceneRecord]) -> Result<(EvalReport, Vec<Inference>)> {
    let mut stats = Vec::with_capacity(scenes.len());
    let mut lengths = Vec::with_capacity(scenes.len());
    let mut preds = Vec::with_capacity(scenes.len());
    for s in scenes {
        let p = model.predict(s.image(), &s.expression)?;
        stats.push(PairStats::new(&p.mask[..], s.target_mask())?);
        lengths.push(s.expression.len());
        preds.push(p);
    }
    Ok((EvalReport::from_stats(&stats, &lengths)?, preds))
}

/// Box-filled mask of the object with the largest box (lowest index on ties).
pub fn largest_object_mask(scene: &SceneRecord) -> Vec<u8> {
    let area = |b: [u32; 4]| u64::from(b[2] - b[0]) * u64::from(b[3] - b[1]);
    let mut best = 0;
    for (i, o) in scene.objects.iter().enumerate() {
        if area(o.pixel_box) > area(scene.objects[best].pixel_box) {
            best = i;
        }
    }
    let [x1, y1, x2, y2] = scene.objects[best].pixel_box.map(|v| v as usize);
    let mut m = vec![0u8; scene.height * scene.width];
    for y in y1..y2.min(scene.height) {
        for x in x1..x2.min(scene.width) {
            m[y * scene.width + x] = 1;
        }
    }
    m
}

pub fn heuristic_baseline(scenes: &[SceneRecord]) -> Result<EvalReport> {
    let stats = scenes.iter().map(|s| PairStats::new(&largest_object_mask(s)[..], s.target_mask())).collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = scenes.iter().map(|s| s.expression.len()).collect();
    EvalReport::from_stats(&stats, &lengths)
}

fn eval_subset<'a>(cfg: &RunConfig, val: &'a [SceneRecord]) -> &'a [SceneRecord] {
    if cfg.eval_limit == 0 {
        val
    } else {
        &val[..cfg.eval_limit.min(val.len())]
    }
}

pub fn train(cfg: &RunConfig, data: &Datasets) -> Result<TrainOutcome> {
    train_with_progress(cfg, data, |_| {})
}

/// As [`train`], calling `progress` after every epoch.
pub fn train_with_progress(cfg: &RunConfig, data: &Datasets, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() && cfg.epochs > 0 {
        return Err(PcanError::Config("training split is empty".into()));
    }
    let mut model = Pcan::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.adamw(), &model.store);
    let mut buf = GradBuffer::zeros_like(&model.store);
    let mut checkpoint = Checkpoint::capture(cfg, &model, Some(&opt), 0);
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut aborted = None;
    let val = eval_subset(cfg, &data.val);

    if cfg.epochs == 0 {
        let t = Instant::now();
        let (report, _) = evaluate(&InferenceModel::new(model.clone()), val)?;
        let rec = EpochRecord { epoch: 0, lr: cfg.optim.lr, train_loss: None, mean_breakdown: None, val: report, seconds: t.elapsed().as_secs_f64() };
        progress(&rec);
        history.push(rec);
    }

    let n = data.train.len();
    let batch = cfg.optim.batch_size;
    'epochs: for epoch in 0..cfg.epochs {
        let t = Instant::now();
        let lr = cfg.optim.lr_at(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(sub_seed(cfg.seed, "order"), epoch as u64));
        let mut mean = LossBreakdown::default();
        for (k, &i) in order.iter().enumerate() {
            let scene = &data.train[i];
            let mut rng = stream(sub_seed(cfg.seed, "pam"), (epoch * n + i) as u64);
            let in_batch = batch.min(n - (k / batch) * batch);
            let loss = match scene_step(&model, cfg, scene, &mut rng, &mut buf, 1.0 / in_batch as f64) {
                Ok(l) => l,
                Err(e @ PcanError::NonFiniteLoss { .. }) => {
                    aborted = Some(format!("epoch {}, scene {}: {e}", epoch + 1, scene.id));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            mean.add_scaled(&loss, 1.0 / n as f64);
            steps.push(StepRecord { step: steps.len(), epoch: epoch + 1, scene: scene.id, lr, loss });
            if (k + 1) % batch == 0 || k + 1 == n {
                if !buf.all_finite() {
                    aborted = Some(format!("epoch {}: non-finite gradient", epoch + 1));
                    break 'epochs;
                }
                if cfg.optim.grad_clip > 0.0 {
                    buf.clip_norm(cfg.optim.grad_clip);
                }
                opt.apply(&mut model.store, &buf, lr);
                buf.clear();
            }
        }
        let (report, _) = evaluate(&InferenceModel::new(model.clone()), val)?;
        checkpoint = Checkpoint::capture(cfg, &model, Some(&opt), epoch + 1);
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: Some(mean.total),
            mean_breakdown: Some(mean),
            val: report,
            seconds: t.elapsed().as_secs_f64(),
        };
        progress(&rec);
        history.push(rec);
    }

    if aborted.is_some() {
        model = checkpoint.model()?;
        if history.is_empty() {
            let (report, _) = evaluate(&InferenceModel::new(model.clone()), val)?;
            history.push(EpochRecord { epoch: 0, lr: cfg.optim.lr, train_loss: None, mean_breakdown: None, val: report, seconds: 0.0 });
        }
    }
    Ok(TrainOutcome { model, checkpoint, history, steps, aborted })
}

/// Moving averages over `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
