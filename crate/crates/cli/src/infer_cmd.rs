//! `infer`: one JSON line per input in `results.jsonl`, plus a raster file for
//! image-like outputs. Exits nonzero if any input fails.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};
use uio_core::data_io::{load_manifest, write_raster};
use uio_core::dense_codec::{depth_to_raster, normals_to_raster, seg_to_raster};
use uio_core::infer::{self, DecodeMode, DecodeOptions, DenseOutput, DenseTask};
use uio_core::model::Model;
use uio_core::raster::RasterImage;
use uio_core::rng::keyed_rng;
use uio_core::taskgen::{build_example, LossSpace, Record, TaskContext, TaskId};

use crate::artifacts::Artifacts;
use crate::config::RunConfig;
use crate::tokens::{depth_summary, read_records};
use crate::CliError;

struct Job {
    task: TaskId,
    record: Record,
    classes: Vec<String>,
}

fn jobs(cfg: &RunConfig) -> Result<Vec<Job>, CliError> {
    let task = cfg.task_id()?;
    match (&cfg.input, &cfg.manifest) {
        (Some(p), _) => {
            let task = task.ok_or_else(|| CliError::Usage("--task is required with --input".into()))?;
            Ok(read_records(p)?.into_iter().map(|record| Job { task, record, classes: Vec::new() }).collect())
        }
        (None, Some(p)) => {
            let m = load_manifest(p)?;
            Ok(m.datasets
                .into_iter()
                .filter(|d| task.is_none_or(|t| t == d.task))
                .flat_map(|d| {
                    let (t, classes) = (d.task, d.classes);
                    d.records.into_iter().map(move |record| Job { task: t, record, classes: classes.clone() })
                })
                .collect())
        }
        (None, None) => Err(CliError::Usage("infer needs --input or --manifest".into())),
    }
}

/// Fills the target field a generic prompt build needs but inference lacks.
fn with_placeholder_target(task: TaskId, rec: &Record, ctx: &TaskContext) -> Result<Record, CliError> {
    use TaskId::*;
    let mut r = rec.clone();
    let fill = |f: &mut Option<String>| {
        f.get_or_insert_with(|| "?".into());
    };
    match task {
        ImageClassification | ObjectCategorization => fill(&mut r.label),
        RegionCaptioning | ImageCaptioning => fill(&mut r.text),
        Vqa | RelationshipDetection | QuestionAnswering | TextClassification | Summarization => fill(&mut r.answer),
        SegmentationToImage if r.image.is_none() => {
            let (h, w) = ctx.opts.target_size;
            r.image = Some(RasterImage::filled(h, w, 3, 0.0)?);
        }
        _ => {}
    }
    Ok(r)
}

fn save_raster(r: &RasterImage, dir: &Path, index: usize, task: TaskId) -> Result<String, CliError> {
    let ext = if r.channels() == 1 { "pgm" } else { "ppm" };
    let p = dir.join(format!("{index:05}_{}.{ext}", task.name()));
    write_raster(&r.quantize_8bit(), &p)?;
    Ok(p.file_name().expect("file name").to_string_lossy().into_owned())
}

fn image_of<'r>(rec: &'r Record) -> Result<&'r RasterImage, CliError> {
    rec.image.as_ref().ok_or_else(|| CliError::Run("record has no image".into()))
}

fn label_of(rec: &Record) -> Result<&str, CliError> {
    rec.label.as_deref().ok_or_else(|| CliError::Run("record has no label (the class to find)".into()))
}

fn run_one(model: &Model, ctx: &TaskContext, job: &Job, index: usize, mode: DecodeMode, cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    use TaskId::*;
    let rec = &job.record;
    let text_opts = DecodeOptions { mode, ..DecodeOptions::text(ctx.opts.max_text_out) };
    Ok(match job.task {
        ObjectLocalization => {
            let class = label_of(rec)?;
            json!({"class": class, "boxes": infer::localize(model, ctx, image_of(rec)?, class, mode)?})
        }
        ObjectSegmentation => {
            let class = label_of(rec)?;
            let m = infer::segmentation_pipeline(model, ctx, image_of(rec)?, class, mode)?;
            let file = save_raster(&seg_to_raster(&m)?.0, out, index, job.task)?;
            let inst: Vec<Value> = m.instances.iter().map(|i| json!({"label": i.label, "area": i.area()})).collect();
            json!({"class": class, "instances": inst, "raster": file})
        }
        KeypointEstimation => {
            let found = infer::keypoint_pipeline(model, ctx, image_of(rec)?, mode)?;
            log::info!("input {index}: {} person region(s) with keypoints", found.len());
            json!({"people": found})
        }
        DepthEstimation | SurfaceNormals => {
            let (task, max_depth) = match job.task {
                DepthEstimation => (DenseTask::Depth, rec.depth.as_ref().map_or(cfg.max_depth, |d| d.max_depth)),
                _ => (DenseTask::Normals, cfg.max_depth),
            };
            match infer::dense_pipeline(model, ctx, image_of(rec)?, task, max_depth, mode)? {
                DenseOutput::Depth(d) => {
                    let mut v = depth_summary(&d.data);
                    if let Some(truth) = &rec.depth {
                        v["rmse"] = json!(d.rmse(truth)?);
                    }
                    v["raster"] = json!(save_raster(&depth_to_raster(&d)?, out, index, job.task)?);
                    v
                }
                DenseOutput::Normals(n) => json!({"raster": save_raster(&normals_to_raster(&n)?, out, index, job.task)?}),
            }
        }
        ImageCaptioning => json!({"text": infer::generate_caption(model, ctx, image_of(rec)?, mode)?}),
        ImageGeneration => {
            let caption = rec.text.as_deref().ok_or_else(|| CliError::Run("record has no text".into()))?;
            json!({"raster": save_raster(&infer::image_generation(model, ctx, caption, mode)?, out, index, job.task)?})
        }
        ObjectDetection | ReferringExpression | GroundedVqa | TextDenoising => {
            return Err(CliError::Run(format!("infer does not support {}", job.task.name())))
        }
        task => {
            let filled = with_placeholder_target(task, rec, ctx)?;
            let ex = build_example(ctx, task, &filled, &mut keyed_rng(cfg.seed, 0, index as u64))?;
            let inp = infer::encoder_input(ctx, ex.input_ids.clone(), ex.input_image.as_ref())?;
            if task.loss_space() == LossSpace::ImageLike {
                let img = infer::generate_image(model, ctx, &inp, mode)?;
                json!({"raster": save_raster(&img, out, index, task)?})
            } else if !job.classes.is_empty() && matches!(task, ImageClassification | ObjectCategorization) {
                let ranked = infer::score_labels(model, ctx, &inp, &job.classes)?;
                json!({"label": ranked[0].0, "scores": ranked})
            } else {
                let g = infer::generate(model, &inp, &text_opts)?;
                json!({"text": ctx.tok.decode(&g.tokens)?})
            }
        }
    })
}

pub fn infer(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let mode = cfg.decode_mode()?;
    let jobs = jobs(cfg)?;
    let art = Artifacts::load(cfg, true)?;
    let model = art.model.as_ref().expect("loaded with need_model");
    let ctx = art.ctx();
    cfg.log_into(out, command)?;
    let mut f = std::fs::File::create(out.join("results.jsonl")).map_err(uio_core::Error::from)?;
    let mut failed = 0;
    for (i, job) in jobs.iter().enumerate() {
        let line = match run_one(model, &ctx, job, i, mode, cfg, out) {
            Ok(v) => json!({"index": i, "task": job.task.name(), "ok": true, "output": v}),
            Err(CliError::Usage(e) | CliError::Run(e)) => {
                failed += 1;
                log::error!("input {i} ({}): {e}", job.task.name());
                json!({"index": i, "task": job.task.name(), "ok": false, "error": e})
            }
        };
        writeln!(f, "{line}").map_err(uio_core::Error::from)?;
    }
    println!("{} of {} inputs processed", jobs.len() - failed, jobs.len());
    if failed > 0 {
        return Err(CliError::Run(format!("{failed} input(s) failed; see results.jsonl")));
    }
    Ok(())
}
