//! Desk-scale end-to-end run: synthetic data, a VQ tokenizer for dense
//! targets, joint multi-task training through the mixture sampler, and
//! evaluation with the inference pipelines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{synth, write_jsonl, Manifest};
use crate::prep::{tokenizer_corpus, vq_images};
use crate::dense_codec::{seg_to_raster, InstanceMaskSet};
use crate::error::Result;
use crate::infer::{self, DecodeMode, DenseOutput, DenseTask};
use crate::model::{Model, ModelConfig};
use crate::raster::RasterImage;
use crate::rng::derive_seed;
use crate::taskgen::{class_instances, PromptRegistry, Record, TaskContext, TaskOptions};
use crate::text_tok::SubwordModel;
use crate::trainer::{run_stage, Adafactor, AdafactorConfig, LrSchedule, Optimizer, Stage, StageData, TrainConfig};
use crate::vocab::VocabLayout;
use crate::vq::{train_vq, VqConfig, VqTrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub image_size: usize,
    pub train_records: usize,
    pub eval_records: usize,
    pub vq: VqConfig,
    pub vq_steps: usize,
    pub model: ModelConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps at peak learning rate before the inverse-sqrt decay.
    pub hold_steps: u64,
    pub text_vocab: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let mut model = ModelConfig::preset("micro").expect("preset");
        model.model_dim = 64;
        model.mlp_dim = 128;
        model.heads = 4;
        model.head_dim = 16;
        Self {
            seed: 0,
            image_size: synth::DEFAULT_SIZE,
            train_records: 5000,
            eval_records: 50,
            vq: VqConfig { codebook_size: 128, latent_dim: 16, downsample: 8, hidden: 64, beta: 0.25 },
            vq_steps: 1500,
            model,
            steps: 4000,
            batch_size: 16,
            lr: 3e-3,
            hold_steps: 1000,
            text_vocab: 320,
        }
    }
}

/// Acceptance targets for the toy run.
pub const LOC_IOU_RATE: f64 = 0.9;
pub const CAPTION_EXACT: f64 = 0.9;
pub const DEPTH_RMSE_FRAC: f64 = 0.1;
pub const SEG_IOU: f64 = 0.8;
pub const KEYPOINT_RATE: f64 = 0.9;
pub const KEYPOINT_TOL_BINS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    /// Fraction of localization queries whose every true box is matched at IoU >= 0.5.
    pub localization_iou50: f64,
    pub caption_exact: f64,
    /// Mean per-image depth RMSE divided by max depth.
    pub depth_rmse_frac: f64,
    pub segmentation_iou: f64,
    /// Mean fraction of joints within the bin tolerance.
    pub keypoint_within_tol: f64,
    pub vq_heldout_mse: f64,
    /// Segmentation IoU when the ground-truth target codes are decoded, an upper bound.
    pub vq_segmentation_iou: f64,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl ToyReport {
    pub fn checks(&self) -> Vec<(&'static str, f64, f64, bool)> {
        vec![
            ("localization IoU@0.5", self.localization_iou50, LOC_IOU_RATE, self.localization_iou50 >= LOC_IOU_RATE),
            ("caption exact match", self.caption_exact, CAPTION_EXACT, self.caption_exact >= CAPTION_EXACT),
            ("depth RMSE / max_depth", self.depth_rmse_frac, DEPTH_RMSE_FRAC, self.depth_rmse_frac <= DEPTH_RMSE_FRAC),
            ("segmentation IoU", self.segmentation_iou, SEG_IOU, self.segmentation_iou >= SEG_IOU),
            ("keypoints within 2 bins", self.keypoint_within_tol, KEYPOINT_RATE, self.keypoint_within_tol >= KEYPOINT_RATE),
        ]
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.3)
    }
}

/// Generator, dataset id and mixture weight size of each training dataset.
const DATASETS: [(&str, &str, f64); 6] = [
    ("colored_square_localization", "squares", 1.0),
    ("stick_localization", "people", 0.5),
    ("stick_keypoints", "keypoints", 1.5),
    ("color_caption", "captions", 1.0),
    ("gradient_depth", "depth", 1.0),
    ("square_segmentation", "segmentation", 1.0),
];

fn manifest(cfg: &ToyConfig, count: usize, salt: &str) -> Result<Manifest> {
    let datasets: Vec<serde_json::Value> = DATASETS
        .iter()
        .map(|(g, id, w)| {
            serde_json::json!({
                "id": id,
                "task": synth::generator_task(g).expect("known").name(),
                "weight_size": w,
                "generator": {"name": g, "count": count, "seed": derive_seed(cfg.seed, &format!("{salt}/{id}")), "size": cfg.image_size}
            })
        })
        .collect();
    let v = serde_json::json!({
        "format": "uio-manifest",
        "version": 1,
        "group_rates": {"sparse_labelling": 0.5, "dense_labelling": 0.3, "image_captioning": 0.2},
        "datasets": datasets
    });
    Manifest::from_value(&v, Path::new("."))
}

fn seg_target(rec: &Record) -> Result<(InstanceMaskSet, RasterImage)> {
    let m = class_instances(rec.masks.as_ref().expect("segmentation record"), rec.label.as_ref().expect("label"))?;
    let r = seg_to_raster(&m)?.0;
    Ok((m, r))
}

/// Mean matched IoU, counting unmatched predictions and truths as zero.
pub fn instance_iou(pred: &InstanceMaskSet, truth: &InstanceMaskSet) -> f64 {
    let n = pred.instances.len().max(truth.instances.len());
    if n == 0 {
        return 1.0;
    }
    let mut used = vec![false; pred.instances.len()];
    let mut total = 0.0;
    for t in &truth.instances {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pred.instances.iter().enumerate() {
            let v = t.iou(p);
            if !used[i] && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, v)) = best {
            used[i] = true;
            total += v;
        }
    }
    total / n as f64
}

#[derive(Serialize)]
struct ResultLine<'a> {
    task: &'a str,
    index: usize,
    output: serde_json::Value,
    score: f64,
}

/// Runs the full toy pipeline. With `out`, writes `vq.ckpt`, `model.ckpt`,
/// `state.ckpt`, `metrics.jsonl`, `results.jsonl` and `report.json`.
pub fn run_toy(cfg: &ToyConfig, out: Option<&Path>) -> Result<ToyReport> {
    let prompts = PromptRegistry::default();
    let train = manifest(cfg, cfg.train_records, "train")?;
    let eval = manifest(cfg, cfg.eval_records, "eval")?;
    let tok = SubwordModel::train(&tokenizer_corpus(&train, &prompts), cfg.text_vocab)?;

    let mut vq_images = vq_images(&train, None)?;
    let held = vq_images.split_off(vq_images.len() - vq_images.len() / 10);
    let vq_opts = VqTrainOptions {
        steps: cfg.vq_steps,
        seed: derive_seed(cfg.seed, "vq"),
        eval_every: cfg.vq_steps.max(1),
        ..VqTrainOptions::default()
    };
    let (vq, vq_report) = train_vq(&vq_images, &held, cfg.vq, vq_opts)?;
    let vq_heldout_mse = vq_report.evals.last().map(|e| e.1).unwrap_or(f64::NAN);

    let layout = VocabLayout::new(tok.id_limit(), crate::sparse_codec::DEFAULT_BINS, cfg.vq.codebook_size)?;
    let ctx = TaskContext {
        layout: &layout,
        tok: &tok,
        prompts: &prompts,
        vq: Some(&vq),
        opts: TaskOptions {
            input_size: (cfg.image_size, cfg.image_size),
            target_size: (cfg.image_size, cfg.image_size),
            patch_size: cfg.model.patch_size,
            ..TaskOptions::default()
        },
    };
    let mut model = Model::new(cfg.model, layout, derive_seed(cfg.seed, "model"))?;
    let mut opt = Adafactor::new(
        AdafactorConfig { schedule: LrSchedule { peak: cfg.lr, hold_steps: cfg.hold_steps.max(1) }, ..AdafactorConfig::default() },
        &model.params,
    );
    let data = StageData::multitask(&train)?;
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "train"),
        checkpoint_every: 0,
        ..TrainConfig::new(Stage::Multitask, cfg.steps)
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let _ = std::fs::remove_file(dir.join(crate::trainer::METRICS_FILE));
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        vq.save(dir.join("vq.ckpt"))?;
        tok.save(dir.join("tokenizer.json"))?;
    }
    let report = run_stage(&mut model, &mut opt, &train, &data, &ctx, &tc, out)?;
    let (first_loss, final_loss) = report.loss_ends(20).unwrap_or((f64::NAN, f64::NAN));
    log::info!("toy training: loss {first_loss:.4} -> {final_loss:.4} after {} steps", opt.steps());

    let mut results: Vec<ResultLine> = Vec::new();
    let g = DecodeMode::Greedy;
    let ds = |id: &str| eval.dataset(id).expect("eval dataset");

    let loc_scores = crate::par::map(&ds("squares").records, |r| -> Result<(f64, serde_json::Value)> {
        let label = r.label.as_ref().expect("label");
        let pred = infer::localize(&model, &ctx, r.image.as_ref().expect("image"), label, g)?;
        let truth: Vec<_> = r.boxes.iter().filter(|b| &b.label == label).map(|b| b.bbox).collect();
        let ok = pred.len() == truth.len() && truth.iter().all(|t| pred.iter().any(|p| p.iou(t) >= 0.5));
        Ok((ok as u8 as f64, serde_json::to_value(&pred)?))
    });
    let localization_iou50 = collect("localization", loc_scores, &mut results)?;

    let cap_scores = crate::par::map(&ds("captions").records, |r| -> Result<(f64, serde_json::Value)> {
        let c = infer::generate_caption(&model, &ctx, r.image.as_ref().expect("image"), g)?;
        Ok(((Some(&c) == r.text.as_ref()) as u8 as f64, serde_json::Value::String(c)))
    });
    let caption_exact = collect("captioning", cap_scores, &mut results)?;

    let depth_scores = crate::par::map(&ds("depth").records, |r| -> Result<(f64, serde_json::Value)> {
        let truth = r.depth.as_ref().expect("depth");
        match infer::dense_pipeline(&model, &ctx, r.image.as_ref().expect("image"), DenseTask::Depth, truth.max_depth, g)? {
            DenseOutput::Depth(d) => Ok((d.rmse(truth)? / truth.max_depth, serde_json::json!({"mean": d.data.iter().sum::<f64>() / d.data.len() as f64}))),
            DenseOutput::Normals(_) => unreachable!("depth task"),
        }
    });
    let depth_rmse_frac = collect("depth", depth_scores, &mut results)?;

    let seg_scores = crate::par::map(&ds("segmentation").records, |r| -> Result<(f64, serde_json::Value)> {
        let (truth, _) = seg_target(r)?;
        let pred = infer::segmentation_pipeline(&model, &ctx, r.image.as_ref().expect("image"), r.label.as_ref().expect("label"), g)?;
        let areas: Vec<usize> = pred.instances.iter().map(|i| i.area()).collect();
        Ok((instance_iou(&pred, &truth), serde_json::json!({"instances": areas})))
    });
    let segmentation_iou = collect("segmentation", seg_scores, &mut results)?;
    let oracle = crate::par::map(&ds("segmentation").records, |r| -> Result<f64> {
        let (truth, raster) = seg_target(r)?;
        let ids = ctx.vision_target(&raster)?;
        let dec = infer::tokens_to_image(&ctx, &ids)?.resize_nearest(cfg.image_size, cfg.image_size)?;
        Ok(instance_iou(&crate::dense_codec::raster_to_masks(&dec, &crate::dense_codec::palette())?, &truth))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let vq_segmentation_iou = oracle.iter().sum::<f64>() / oracle.len().max(1) as f64;

    let bins = layout.num_locations();
    let kp_scores = crate::par::map(&ds("keypoints").records, |r| -> Result<(f64, serde_json::Value)> {
        let truth = r.keypoints.as_ref().expect("keypoints");
        let region = r.region.expect("region");
        let found = infer::keypoint_pipeline(&model, &ctx, r.image.as_ref().expect("image"), g)?;
        let best = found.iter().max_by(|a, b| a.region.iou(&region).total_cmp(&b.region.iou(&region)));
        let score = best.map_or(0.0, |k| infer::keypoint_agreement(&k.keypoints, truth, bins, KEYPOINT_TOL_BINS));
        Ok((score, serde_json::to_value(&found)?))
    });
    let keypoint_within_tol = collect("keypoints", kp_scores, &mut results)?;

    let rep = ToyReport {
        localization_iou50,
        caption_exact,
        depth_rmse_frac,
        segmentation_iou,
        keypoint_within_tol,
        vq_heldout_mse,
        vq_segmentation_iou,
        first_loss,
        final_loss,
    };
    if let Some(dir) = out {
        model.save(dir.join("model.ckpt"))?;
        write_jsonl(dir.join("results.jsonl"), &results)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
    }
    Ok(rep)
}

fn collect<'a>(task: &'a str, scores: Vec<Result<(f64, serde_json::Value)>>, results: &mut Vec<ResultLine<'a>>) -> Result<f64> {
    let mut sum = 0.0;
    let n = scores.len();
    for (index, s) in scores.into_iter().enumerate() {
        let (score, output) = s?;
        sum += score;
        results.push(ResultLine { task, index, output, score });
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
